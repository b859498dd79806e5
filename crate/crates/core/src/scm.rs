//! Finite-alphabet structural causal models over the explanation DAG
//! `(α, β) → X → Y`, evaluated by exhaustive enumeration.
//!
//! These are exact oracles: information flow is computed from truncated
//! (intervened) factorisations, mutual information from observational joints.

use crate::error::{Error, Result};
use crate::prob::SeededRng;

const ROW_TOL: f64 = 1e-12;
/// Largest joint state space [`DiscreteSCM`] will enumerate.
pub const MAX_STATES: usize = 1_000_000;

/// Independent root factors `α_1..α_K`, `β_1..β_L`, then `X | (α, β)` and `Y | X`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSCM {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    /// Row per joint `(α, β)` configuration, mixed radix with `α_1` most significant.
    x_given: Vec<Vec<f64>>,
    y_given_x: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() || row.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!(
            "{what}: empty row or negative entry"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what}: row sums to {s}"
        )));
    }
    Ok(())
}

fn dirichlet_row(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mixed-radix digits of `idx`, most significant first.
fn digits(mut idx: usize, sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0; sizes.len()];
    for (o, &s) in out.iter_mut().zip(sizes).rev() {
        *o = idx % s;
        idx /= s;
    }
    out
}

fn index(values: &[usize], sizes: &[usize]) -> usize {
    values
        .iter()
        .zip(sizes)
        .fold(0, |acc, (&v, &s)| acc * s + v)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// A joint distribution over the model's nodes, dense in mixed radix.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl JointTable {
    /// Marginal over `nodes`, in the given order.
    pub fn marginal(&self, nodes: &[usize]) -> JointTable {
        let sizes: Vec<usize> = nodes.iter().map(|&n| self.sizes[n]).collect();
        let mut probs = vec![0.0; sizes.iter().product()];
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let d = digits(i, &self.sizes);
            let sub: Vec<usize> = nodes.iter().map(|&n| d[n]).collect();
            probs[index(&sub, &sizes)] += p;
        }
        JointTable { sizes, probs }
    }

    pub fn entropy_of(&self, nodes: &[usize]) -> f64 {
        if nodes.is_empty() {
            return 0.0;
        }
        entropy(&self.marginal(nodes).probs)
    }

    /// `I(A; B | C)` through `H(A,C) + H(B,C) − H(A,B,C) − H(C)`.
    pub fn conditional_mi(&self, a: &[usize], b: &[usize], c: &[usize]) -> f64 {
        let cat = |x: &[usize], y: &[usize]| [x, y].concat();
        self.entropy_of(&cat(a, c)) + self.entropy_of(&cat(b, c))
            - self.entropy_of(&[a, b, c].concat())
            - self.entropy_of(c)
    }
}

/// Residuals of the four identities relating the influence variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityReport {
    /// `C − C_iu − (1/K) Σ I(α_¬i; Y | α_i)`.
    pub a: f64,
    /// `C_jc − C_ic − (1/K) Σ I(α_¬i; Y | β)`.
    pub b: f64,
    /// `C_jc − C − I(α; β | Y)`.
    pub c: f64,
    /// `C_ic − C_iu − (1/K) Σ I(α_i; α_¬i, β | Y)`.
    pub d: f64,
}

impl IdentityReport {
    pub fn max_abs(&self) -> f64 {
        [self.a, self.b, self.c, self.d]
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl DiscreteSCM {
    pub fn new(
        alpha: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        x_given: Vec<Vec<f64>>,
        y_given_x: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one causal factor".into(),
            ));
        }
        for (i, r) in alpha.iter().enumerate() {
            check_row(r, &format!("p(alpha_{i})"))?;
        }
        for (i, r) in beta.iter().enumerate() {
            check_row(r, &format!("p(beta_{i})"))?;
        }
        let configs: usize = alpha.iter().chain(&beta).map(Vec::len).product();
        if x_given.len() != configs {
            return Err(Error::DimensionMismatch {
                what: "rows of p(x | alpha, beta)",
                expected: configs,
                got: x_given.len(),
            });
        }
        let nx = x_given[0].len();
        for r in &x_given {
            if r.len() != nx {
                return Err(Error::InvalidDistribution(
                    "p(x | alpha, beta) rows differ in length".into(),
                ));
            }
            check_row(r, "p(x | alpha, beta)")?;
        }
        if y_given_x.len() != nx {
            return Err(Error::DimensionMismatch {
                what: "rows of p(y | x)",
                expected: nx,
                got: y_given_x.len(),
            });
        }
        let ny = y_given_x[0].len();
        for r in &y_given_x {
            if r.len() != ny {
                return Err(Error::InvalidDistribution(
                    "p(y | x) rows differ in length".into(),
                ));
            }
            check_row(r, "p(y | x)")?;
        }
        let scm = Self {
            alpha,
            beta,
            x_given,
            y_given_x,
        };
        if scm.sizes().iter().product::<usize>() > MAX_STATES {
            return Err(Error::InvalidArgument(format!(
                "more than {MAX_STATES} joint states"
            )));
        }
        Ok(scm)
    }

    /// Random tables: flat-Dirichlet rows throughout.
    pub fn random(
        alpha_sizes: &[usize],
        beta_sizes: &[usize],
        x_size: usize,
        y_size: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let alpha = alpha_sizes.iter().map(|&n| dirichlet_row(n, rng)).collect();
        let beta = beta_sizes.iter().map(|&n| dirichlet_row(n, rng)).collect();
        let configs: usize = alpha_sizes.iter().chain(beta_sizes).product();
        let x_given = (0..configs).map(|_| dirichlet_row(x_size, rng)).collect();
        let y_given_x = (0..x_size).map(|_| dirichlet_row(y_size, rng)).collect();
        Self::new(alpha, beta, x_given, y_given_x)
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn l(&self) -> usize {
        self.beta.len()
    }

    /// Node indices of `α`.
    pub fn alpha_nodes(&self) -> Vec<usize> {
        (0..self.k()).collect()
    }

    /// Node indices of `β`.
    pub fn beta_nodes(&self) -> Vec<usize> {
        (self.k()..self.k() + self.l()).collect()
    }

    pub fn x_node(&self) -> usize {
        self.k() + self.l()
    }

    pub fn y_node(&self) -> usize {
        self.x_node() + 1
    }

    /// Alphabet sizes of all nodes: `α…, β…, X, Y`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.alpha.iter().chain(&self.beta).map(Vec::len).collect();
        s.push(self.y_given_x.len());
        s.push(self.y_given_x[0].len());
        s
    }

    /// Joint distribution of all nodes with the mechanisms of the nodes in
    /// `fixed` replaced by point masses (do-truncation).
    pub fn joint_under(&self, fixed: &[(usize, usize)]) -> JointTable {
        let sizes = self.sizes();
        let roots = self.k() + self.l();
        let root_sizes = &sizes[..roots];
        let total: usize = sizes.iter().product();
        let root_tables: Vec<&Vec<f64>> = self.alpha.iter().chain(&self.beta).collect();
        let mech = |node: usize, state: &[usize]| -> f64 {
            if let Some(&(_, v)) = fixed.iter().find(|(n, _)| *n == node) {
                return if state[node] == v { 1.0 } else { 0.0 };
            }
            if node < roots {
                root_tables[node][state[node]]
            } else if node == roots {
                self.x_given[index(&state[..roots], root_sizes)][state[node]]
            } else {
                self.y_given_x[state[roots]][state[node]]
            }
        };
        let probs = (0..total)
            .map(|i| {
                let st = digits(i, &sizes);
                (0..sizes.len()).map(|n| mech(n, &st)).product()
            })
            .collect();
        JointTable { sizes, probs }
    }

    pub fn observational(&self) -> JointTable {
        self.joint_under(&[])
    }

    /// Information flow from node set `u` to `Y`, imposing node set `w`
    /// (empty `w` gives plain information flow), by literal do-truncation.
    pub fn information_flow(&self, u: &[usize], w: &[usize]) -> f64 {
        let sizes = self.sizes();
        let y = self.y_node();
        let obs = self.observational();
        let w_sizes: Vec<usize> = w.iter().map(|&n| sizes[n]).collect();
        let u_sizes: Vec<usize> = u.iter().map(|&n| sizes[n]).collect();
        let p_w = obs.marginal(w);
        let mut total = 0.0;
        for wi in 0..w_sizes.iter().product() {
            let pw = p_w.probs[wi];
            if pw == 0.0 {
                continue;
            }
            let wv = digits(wi, &w_sizes);
            let do_w: Vec<(usize, usize)> = w.iter().copied().zip(wv).collect();
            let p_u = self.joint_under(&do_w).marginal(u);
            let n_u: usize = u_sizes.iter().product();
            let mut cond = Vec::with_capacity(n_u);
            for ui in 0..n_u {
                let uv = digits(ui, &u_sizes);
                let mut fixed = do_w.clone();
                fixed.extend(u.iter().copied().zip(uv));
                cond.push(self.joint_under(&fixed).marginal(&[y]).probs);
            }
            let ny = sizes[y];
            let mix: Vec<f64> = (0..ny)
                .map(|m| (0..n_u).map(|ui| p_u.probs[ui] * cond[ui][m]).sum())
                .collect();
            let mut inner = 0.0;
            for ui in 0..n_u {
                for m in 0..ny {
                    let p = cond[ui][m];
                    if p > 0.0 && p_u.probs[ui] > 0.0 {
                        inner += p_u.probs[ui] * p * (p / mix[m]).ln();
                    }
                }
            }
            total += pw * inner;
        }
        total
    }

    /// `I(α → Y)`, or `I(α → Y | do(β))` when `imposing_beta`.
    pub fn exact_information_flow(&self, imposing_beta: bool) -> f64 {
        let w = if imposing_beta {
            self.beta_nodes()
        } else {
            vec![]
        };
        self.information_flow(&self.alpha_nodes(), &w)
    }

    /// Observational joint over `(α, Y)` as a `|α| × |Y|` table.
    pub fn alpha_y_table(&self) -> Vec<Vec<f64>> {
        let mut nodes = self.alpha_nodes();
        nodes.push(self.y_node());
        let t = self.observational().marginal(&nodes);
        let ny = *t.sizes.last().unwrap();
        t.probs.chunks(ny).map(<[f64]>::to_vec).collect()
    }

    /// Observational joint over `(α, Y, β)` as `[a][y][b]`.
    pub fn alpha_y_beta_table(&self) -> Vec<Vec<Vec<f64>>> {
        let mut nodes = self.alpha_nodes();
        nodes.push(self.y_node());
        nodes.extend(self.beta_nodes());
        let t = self.observational().marginal(&nodes);
        let nb: usize = self.beta.iter().map(Vec::len).product();
        let ny = self.sizes()[self.y_node()];
        t.probs
            .chunks(ny * nb)
            .map(|a| a.chunks(nb).map(<[f64]>::to_vec).collect())
            .collect()
    }

    /// Residuals of the four identities relating `C`, `C_iu`, `C_ic`, `C_jc`,
    /// with every variant computed as an information flow and every
    /// adjustment term as an observational conditional MI.
    pub fn variant_identities(&self) -> IdentityReport {
        let k = self.k();
        let alpha = self.alpha_nodes();
        let beta = self.beta_nodes();
        let y = [self.y_node()];
        let obs = self.observational();
        let not = |i: usize| -> Vec<usize> { alpha.iter().copied().filter(|&j| j != i).collect() };
        let kf = k as f64;

        let c = self.information_flow(&alpha, &[]);
        let c_jc = self.information_flow(&alpha, &beta);
        let c_iu = (0..k)
            .map(|i| self.information_flow(&[i], &[]))
            .sum::<f64>()
            / kf;
        let c_ic = (0..k)
            .map(|i| self.information_flow(&[i], &[not(i), beta.clone()].concat()))
            .sum::<f64>()
            / kf;

        let adj_a = (0..k)
            .map(|i| obs.conditional_mi(&not(i), &y, &[i]))
            .sum::<f64>()
            / kf;
        let adj_b = (0..k)
            .map(|i| obs.conditional_mi(&not(i), &y, &beta))
            .sum::<f64>()
            / kf;
        let adj_c = obs.conditional_mi(&alpha, &beta, &y);
        let adj_d = (0..k)
            .map(|i| obs.conditional_mi(&[i], &[not(i), beta.clone()].concat(), &y))
            .sum::<f64>()
            / kf;
        IdentityReport {
            a: c - c_iu - adj_a,
            b: c_jc - c_ic - adj_b,
            c: c_jc - c - adj_c,
            d: c_ic - c_iu - adj_d,
        }
    }
}

fn check_joint(total: f64) -> Result<()> {
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("joint sums to {total}")));
    }
    Ok(())
}

/// `I(A; Y) = Σ p(a, y) log [p(a, y) / (p(a) p(y))]` for a joint `[a][y]`.
pub fn exact_mi(joint: &[Vec<f64>]) -> Result<f64> {
    if joint.is_empty() || joint.iter().flatten().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidDistribution(
            "empty joint or negative entry".into(),
        ));
    }
    let ny = joint[0].len();
    if joint.iter().any(|r| r.len() != ny) {
        return Err(Error::InvalidDistribution("ragged joint table".into()));
    }
    check_joint(joint.iter().flatten().sum())?;
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
    let mut mi = 0.0;
    for (a, row) in joint.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (pa[a] * py[y])).ln();
            }
        }
    }
    Ok(mi)
}

/// `I(A; Y | B) = Σ p(a, y, b) log [p(a, y | b) / (p(a | b) p(y | b))]` for `[a][y][b]`.
pub fn exact_conditional_mi(joint: &[Vec<Vec<f64>>]) -> Result<f64> {
    let flat: Vec<f64> = joint.iter().flatten().flatten().copied().collect();
    if flat.is_empty() || flat.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidDistribution(
            "empty joint or negative entry".into(),
        ));
    }
    check_joint(flat.iter().sum())?;
    let (na, ny, nb) = (joint.len(), joint[0].len(), joint[0][0].len());
    if joint
        .iter()
        .any(|r| r.len() != ny || r.iter().any(|c| c.len() != nb))
    {
        return Err(Error::InvalidDistribution("ragged joint table".into()));
    }
    let pb: Vec<f64> = (0..nb)
        .map(|b| {
            (0..na)
                .flat_map(|a| (0..ny).map(move |y| (a, y)))
                .map(|(a, y)| joint[a][y][b])
                .sum()
        })
        .collect();
    let pab = |a: usize, b: usize| (0..ny).map(|y| joint[a][y][b]).sum::<f64>();
    let pyb = |y: usize, b: usize| (0..na).map(|a| joint[a][y][b]).sum::<f64>();
    let mut mi = 0.0;
    for a in 0..na {
        for y in 0..ny {
            for b in 0..nb {
                let p = joint[a][y][b];
                if p > 0.0 {
                    mi += p * (p * pb[b] / (pab(a, b) * pyb(y, b))).ln();
                }
            }
        }
    }
    Ok(mi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_scm(seed: u64, k: usize, l: usize) -> DiscreteSCM {
        let mut rng = SeededRng::new(seed);
        DiscreteSCM::random(&vec![3; k], &vec![3; l], 4, 2, &mut rng).unwrap()
    }

    #[test]
    fn constant_output_has_no_flow() {
        let mut scm = random_scm(1, 1, 1);
        scm.y_given_x = vec![vec![0.3, 0.7]; 4];
        assert!(scm.exact_information_flow(false).abs() < 1e-15);
        assert!(scm.exact_information_flow(true).abs() < 1e-15);
    }

    #[test]
    fn flow_equals_mutual_information() {
        for seed in 0..10 {
            let scm = random_scm(seed, 1, 1);
            let mi = exact_mi(&scm.alpha_y_table()).unwrap();
            assert!((scm.exact_information_flow(false) - mi).abs() < 1e-9);
        }
    }

    #[test]
    fn imposing_flow_equals_conditional_mi() {
        for seed in 0..10 {
            let scm = random_scm(100 + seed, 1, 1);
            let cmi = exact_conditional_mi(&scm.alpha_y_beta_table()).unwrap();
            assert!((scm.exact_information_flow(true) - cmi).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_joint_has_zero_mi() {
        let pa = [0.2, 0.5, 0.3];
        let py = [0.6, 0.4];
        let joint: Vec<Vec<f64>> = pa
            .iter()
            .map(|a| py.iter().map(|y| a * y).collect())
            .collect();
        assert!(exact_mi(&joint).unwrap().abs() < 1e-15);
    }

    #[test]
    fn perfectly_correlated_bits_give_log2() {
        let mi = exact_mi(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mi_agrees_with_entropy_difference() {
        let mut rng = SeededRng::new(7);
        let flat = dirichlet_row(9, &mut rng);
        let joint: Vec<Vec<f64>> = flat.chunks(3).map(<[f64]>::to_vec).collect();
        let py: Vec<f64> = (0..3).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
        let h_y_given_a: f64 = joint
            .iter()
            .map(|r| {
                let pa: f64 = r.iter().sum();
                pa * entropy(&r.iter().map(|v| v / pa).collect::<Vec<_>>())
            })
            .sum();
        assert!((exact_mi(&joint).unwrap() - (entropy(&py) - h_y_given_a)).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_tables_rejected() {
        assert!(exact_mi(&[vec![0.5, 0.6]]).is_err());
        let bad = DiscreteSCM::new(
            vec![vec![0.5, 0.6]],
            vec![],
            vec![vec![1.0]; 2],
            vec![vec![1.0]],
        );
        assert!(matches!(bad, Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn single_causal_factor_identity_a_is_exact() {
        let r = random_scm(3, 1, 1).variant_identities();
        assert!(r.a.abs() < 1e-15, "{}", r.a);
    }

    #[test]
    fn identities_hold_with_two_causal_factors() {
        for seed in 0..5 {
            let r = random_scm(200 + seed, 2, 1).variant_identities();
            assert!(r.max_abs() < 1e-9, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn flow_bounded_by_output_entropy(seed in 0u64..10_000) {
            let scm = random_scm(seed, 1, 1);
            let obs = scm.observational();
            let h_y = obs.entropy_of(&[scm.y_node()]);
            let flow = scm.exact_information_flow(false);
            prop_assert!(flow >= -1e-12 && flow <= h_y + 1e-12);
        }
    }
}

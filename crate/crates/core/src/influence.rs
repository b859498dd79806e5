//! Sample-based estimates of the causal influence of latent factors on a
//! classifier's output, with reparameterised gradients.
//!
//! Every variant is an instance of one nested estimator. The latent
//! coordinates are split into a conditioning set `R`, a target set `S` and a
//! nuisance set `T`; for `nr` draws of `R`, `ns` draws of `S` per `R` and `nt`
//! draws of `T` (and generator noise) per `(R, S)`,
//!
//! ```text
//! p_rs = mean_t f(g(r, s, t))        p_r = mean_s p_rs
//! value = mean_r [ H(p_r) − mean_s H(p_rs) ]
//! ```
//!
//! which is `I(S; Y | R)` with `R` imposed. With `R = ∅`, `S = α` and
//! `T = β` this is exactly the two-loop algorithm over `N_α` and `N_β`
//! samples (one data draw per `(α, β)` pair by default).

use crate::autodiff::{Tape, Tensor};
use crate::classifiers::Classifier;
use crate::error::{Error, Result};
use crate::generative::{GenerativeMap, LinearGaussianMap};
use crate::prob::{binary_entropy, normal_cdf, normal_pdf, SeededRng, Stream};

/// Probabilities below this are clamped inside `p log p`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which causal-influence functional to estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `C = I(α; Y)`.
    Joint,
    /// `C_iu = (1/K) Σ_i I(α_i; Y)`.
    IndependentUnconditional,
    /// `C_ic = (1/K) Σ_i I(α_i; Y | α_¬i, β)`.
    IndependentConditional,
    /// `C_jc = I(α; Y | β)`.
    JointConditional,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Joint,
        Variant::IndependentUnconditional,
        Variant::IndependentConditional,
        Variant::JointConditional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::IndependentUnconditional => "independent-unconditional",
            Self::IndependentConditional => "independent-conditional",
            Self::JointConditional => "joint-conditional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown influence variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sample counts for the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleBudget {
    pub n_alpha: usize,
    pub n_beta: usize,
    /// Data draws per latent draw.
    pub n_x: usize,
}

impl SampleBudget {
    pub fn new(n_alpha: usize, n_beta: usize) -> Self {
        Self {
            n_alpha,
            n_beta,
            n_x: 1,
        }
    }

    pub fn with_n_x(self, n_x: usize) -> Self {
        Self { n_x, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.n_alpha == 0 || self.n_beta == 0 || self.n_x == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample counts must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A causal-influence value in nats with the budget that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfluenceEstimate {
    pub value: f64,
    pub variant: Variant,
    pub n_alpha: usize,
    pub n_beta: usize,
    pub n_x: usize,
    pub seed: u64,
}

/// Role assignment of latent coordinates for one nested estimate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Grid {
    pub r: Vec<usize>,
    pub s: Vec<usize>,
    pub t: Vec<usize>,
    pub nr: usize,
    pub ns: usize,
    /// Draws of `T` per `(r, s)`.
    pub nj: usize,
    pub nx: usize,
    /// Selects the random substreams.
    pub stream: u64,
}

impl Grid {
    fn cells(&self) -> usize {
        self.nr * self.ns * self.nj * self.nx
    }

    fn nt(&self) -> usize {
        self.nj * self.nx
    }
}

fn rest(dim: usize, skip: &[usize]) -> Vec<usize> {
    (0..dim).filter(|i| !skip.contains(i)).collect()
}

/// Grids whose mean value is the requested variant.
pub(crate) fn variant_grids(
    variant: Variant,
    k: usize,
    l: usize,
    b: SampleBudget,
) -> Result<Vec<Grid>> {
    if k == 0 {
        return Err(Error::InvalidArgument(format!(
            "{variant} influence needs at least one causal factor (K = 0)"
        )));
    }
    let d = k + l;
    let alpha: Vec<usize> = (0..k).collect();
    let beta: Vec<usize> = (k..d).collect();
    let grid =
        |r: Vec<usize>, s: Vec<usize>, t: Vec<usize>, nr: usize, nj: usize, stream: u64| Grid {
            r,
            s,
            t,
            nr,
            ns: b.n_alpha,
            nj,
            nx: b.n_x,
            stream,
        };
    Ok(match variant {
        Variant::Joint => vec![grid(vec![], alpha, beta, 1, b.n_beta, 0)],
        Variant::IndependentUnconditional => (0..k)
            .map(|i| grid(vec![], vec![i], rest(d, &[i]), 1, b.n_beta, i as u64))
            .collect(),
        Variant::JointConditional => vec![grid(beta, alpha, vec![], b.n_beta, 1, 0)],
        Variant::IndependentConditional => (0..k)
            .map(|i| grid(rest(d, &[i]), vec![i], vec![], b.n_beta, 1, i as u64))
            .collect(),
    })
}

/// Grid for the flow from a single latent factor, all others marginalised.
pub(crate) fn factor_grid(factor: usize, d: usize, b: SampleBudget) -> Grid {
    Grid {
        r: vec![],
        s: vec![factor],
        t: rest(d, &[factor]),
        nr: 1,
        ns: b.n_alpha,
        nj: b.n_beta,
        nx: b.n_x,
        stream: factor as u64,
    }
}

/// Latent and noise draws laid out `r`-major, then `s`, then `T` draw, then data draw.
pub(crate) fn draw_grid(
    grid: &Grid,
    latent_dim: usize,
    noise_dim: usize,
    rng: &SeededRng,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut rr = rng.substream(Stream::Beta, 2 * grid.stream + 1);
    let mut rs = rng.substream(Stream::Alpha, grid.stream);
    let mut rt = rng.substream(Stream::Beta, 2 * grid.stream);
    let mut rn = rng.substream(Stream::Noise, grid.stream);
    let n = grid.cells();
    let mut z = vec![0.0; n * latent_dim];
    let mut row = 0;
    for _ in 0..grid.nr {
        let rv = rr.standard_normals(grid.r.len());
        for _ in 0..grid.ns {
            let sv = rs.standard_normals(grid.s.len());
            for _ in 0..grid.nj {
                let tv = rt.standard_normals(grid.t.len());
                for _ in 0..grid.nx {
                    let cell = &mut z[row * latent_dim..(row + 1) * latent_dim];
                    for (&i, &v) in grid.r.iter().zip(&rv) {
                        cell[i] = v;
                    }
                    for (&i, &v) in grid.s.iter().zip(&sv) {
                        cell[i] = v;
                    }
                    for (&i, &v) in grid.t.iter().zip(&tv) {
                        cell[i] = v;
                    }
                    row += 1;
                }
            }
        }
    }
    let z = Tensor::matrix(n, latent_dim, z)?;
    let eps = if noise_dim > 0 {
        Some(Tensor::matrix(
            n,
            noise_dim,
            rn.standard_normals(n * noise_dim),
        )?)
    } else {
        None
    };
    Ok((z, eps))
}

fn plogp_sum(p: &[f64]) -> f64 {
    p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum()
}

/// Per-`(r, s)` conditionals averaged over `T`.
fn inner_means(p: &Tensor, grid: &Grid) -> Vec<Vec<f64>> {
    let m = p.cols();
    let nt = grid.nt();
    (0..grid.nr * grid.ns)
        .map(|rs| {
            let mut acc = vec![0.0; m];
            for t in 0..nt {
                for (a, &v) in acc.iter_mut().zip(p.row(rs * nt + t)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= nt as f64);
            acc
        })
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Entropy pieces of one nested estimate.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NestedTerms {
    /// `mean_r H(p_r)`.
    pub outer_entropy: f64,
    /// `mean_r mean_s H(p_rs)`.
    pub inner_entropy: f64,
    /// `p_rs` in `r`-major order.
    pub conditionals: Vec<Vec<f64>>,
    /// `p_r`.
    pub marginals: Vec<Vec<f64>>,
}

impl NestedTerms {
    pub fn value(&self) -> f64 {
        self.outer_entropy - self.inner_entropy
    }
}

pub(crate) fn nested_terms(p: &Tensor, grid: &Grid) -> NestedTerms {
    let cond = inner_means(p, grid);
    let marginals: Vec<Vec<f64>> = cond.chunks(grid.ns).map(mean_rows).collect();
    let outer = -marginals.iter().map(|q| plogp_sum(q)).sum::<f64>() / grid.nr as f64;
    let inner = -cond.iter().map(|q| plogp_sum(q)).sum::<f64>() / cond.len() as f64;
    NestedTerms {
        outer_entropy: outer,
        inner_entropy: inner,
        conditionals: cond,
        marginals,
    }
}

/// `∂ value / ∂ P[r, s, t, m] = (log p_rs[m] − log p_r[m]) / (nr · ns · nt)`.
pub(crate) fn nested_cotangent(terms: &NestedTerms, grid: &Grid, m: usize) -> Result<Tensor> {
    let nt = grid.nt();
    let scale = 1.0 / (grid.nr * grid.ns * nt) as f64;
    let mut out = Vec::with_capacity(grid.cells() * m);
    for (rs, p_rs) in terms.conditionals.iter().enumerate() {
        let p_r = &terms.marginals[rs / grid.ns];
        let row: Vec<f64> = p_rs
            .iter()
            .zip(p_r)
            .map(|(&a, &b)| (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()) * scale)
            .collect();
        for _ in 0..nt {
            out.extend_from_slice(&row);
        }
    }
    Tensor::matrix(grid.cells(), m, out)
}

fn check_compat(g: &dyn GenerativeMap, f: &dyn Classifier) -> Result<()> {
    if g.data_dim() != f.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "classifier input vs generator output",
            expected: f.input_dim(),
            got: g.data_dim(),
        });
    }
    Ok(())
}

fn grid_value(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    grid: &Grid,
    rng: &SeededRng,
) -> Result<NestedTerms> {
    let (z, eps) = draw_grid(grid, g.latent_dim(), g.noise_dim(), rng)?;
    let x = generate_in_chunks(g, &z, eps.as_ref())?;
    let p = crate::classifiers::predict_in_chunks(f, &x)?;
    Ok(nested_terms(&p, grid))
}

fn generate_in_chunks(g: &dyn GenerativeMap, z: &Tensor, eps: Option<&Tensor>) -> Result<Tensor> {
    const CHUNK: usize = 1 << 16;
    let n = z.rows();
    if n <= CHUNK {
        return g.generate_batch(z, eps);
    }
    let mut out = Vec::with_capacity(n * g.data_dim());
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let e = eps.map(|e| e.select_rows(&idx));
        out.extend(
            g.generate_batch(&z.select_rows(&idx), e.as_ref())?
                .into_data(),
        );
    }
    Tensor::matrix(n, g.data_dim(), out)
}

fn estimate(variant: Variant, b: SampleBudget, rng: &SeededRng, value: f64) -> InfluenceEstimate {
    InfluenceEstimate {
        value,
        variant,
        n_alpha: b.n_alpha,
        n_beta: b.n_beta,
        n_x: b.n_x,
        seed: rng.seed(),
    }
}

/// Estimates a causal-influence variant of `g`'s causal factors on `f`.
pub fn estimate_influence(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    variant: Variant,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<InfluenceEstimate> {
    budget.validate()?;
    check_compat(g, f)?;
    let grids = variant_grids(variant, g.k(), g.l(), budget)?;
    let mut total = 0.0;
    for grid in &grids {
        total += grid_value(g, f, grid, rng)?.value();
    }
    Ok(estimate(variant, budget, rng, total / grids.len() as f64))
}

/// Like [`estimate_influence`], also returning the gradient with respect to
/// each of `g.params()` (reparameterised; the draws are held fixed).
pub fn estimate_influence_with_grad(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    variant: Variant,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<(InfluenceEstimate, Vec<Tensor>)> {
    budget.validate()?;
    check_compat(g, f)?;
    let grids = variant_grids(variant, g.k(), g.l(), budget)?;
    let mut grads: Vec<Tensor> = g
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut total = 0.0;
    let weight = 1.0 / grids.len() as f64;
    for grid in &grids {
        let (z, eps) = draw_grid(grid, g.latent_dim(), g.noise_dim(), rng)?;
        let tape = Tape::new();
        let bound = g.bind(&tape, true);
        let zv = tape.constant(z);
        let ev = eps.map(|e| tape.constant(e));
        let x = g.generate_on(&tape, &bound, zv, ev)?;
        let xval = tape.value(x);
        let p = f.predict_proba_batch(&xval)?;
        let terms = nested_terms(&p, grid);
        total += terms.value();
        let mut cot = nested_cotangent(&terms, grid, p.cols())?;
        cot.scale_assign(weight);
        let gx = f.pullback_batch(&xval, &cot)?;
        tape.backward_from(x, gx)?;
        for (acc, &v) in grads.iter_mut().zip(&bound) {
            if let Some(gv) = tape.grad(v) {
                acc.add_assign(&gv)?;
            }
        }
    }
    Ok((estimate(variant, budget, rng, total * weight), grads))
}

/// `(H(Y), E_α[H(Y | α)])` on the joint estimator's sample grid; their
/// difference is the joint estimate bit for bit.
pub fn decomposition_terms(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<(f64, f64)> {
    budget.validate()?;
    check_compat(g, f)?;
    let grid = &variant_grids(Variant::Joint, g.k(), g.l(), budget)?[0];
    let t = grid_value(g, f, grid, rng)?;
    Ok((t.outer_entropy, t.inner_entropy))
}

/// `I(z_i; Y)` for every latent coordinate, the others treated as nuisance.
pub fn per_factor_flows(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<Vec<f64>> {
    budget.validate()?;
    check_compat(g, f)?;
    let d = g.latent_dim();
    (0..d)
        .map(|i| Ok(grid_value(g, f, &factor_grid(i, d, budget), rng)?.value()))
        .collect()
}

/// Error of the MAP prediction of `Y` from `α`: `E_α[1 − max_y p(y | α)]`,
/// on the joint estimator's grid.
pub fn map_prediction_error(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<f64> {
    budget.validate()?;
    check_compat(g, f)?;
    let grid = &variant_grids(Variant::Joint, g.k(), g.l(), budget)?[0];
    let t = grid_value(g, f, grid, rng)?;
    let n = t.conditionals.len() as f64;
    Ok(t.conditionals
        .iter()
        .map(|p| 1.0 - p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n)
}

/// Exact `I(α; Y)` for a linear-Gaussian map read by `Φ(aᵀx)`.
///
/// With `s² = |W_αᵀa|²` and `v = |W_βᵀa|² + γ|a|²`, `p(y=1 | α)` depends on
/// `α` only through `u = aᵀW_α α ~ N(0, s²)` and equals `Φ(u / √(1 + v))`,
/// so the value is `ln 2 − ∫ φ(t) h_b(Φ(s t / √(1 + v))) dt` (Simpson's rule).
pub fn linear_cdf_influence(g: &LinearGaussianMap, a: &[f64]) -> Result<f64> {
    let (n, kl) = (g.w().rows(), g.w().cols());
    if a.len() != n {
        return Err(Error::DimensionMismatch {
            what: "hyperplane normal",
            expected: n,
            got: a.len(),
        });
    }
    let proj = |j: usize| -> f64 { (0..n).map(|i| a[i] * g.w().get2(i, j)).sum() };
    let s2: f64 = (0..g.k()).map(|j| proj(j).powi(2)).sum();
    let v: f64 = (g.k()..kl).map(|j| proj(j).powi(2)).sum::<f64>()
        + g.gamma() * a.iter().map(|x| x * x).sum::<f64>();
    let scale = (s2 / (1.0 + v)).sqrt();
    const HALF: usize = 4000;
    const SPAN: f64 = 12.0;
    let h = SPAN / HALF as f64;
    let mut acc = 0.0;
    for i in 0..=2 * HALF {
        let t = -SPAN + i as f64 * h;
        let w = if i == 0 || i == 2 * HALF {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * normal_pdf(t) * binary_entropy(normal_cdf(scale * t))?;
    }
    Ok(std::f64::consts::LN_2 - acc * h / 3.0)
}

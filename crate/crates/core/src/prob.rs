//! Gaussian and categorical utilities shared by the analytic and learned paths.
//!
//! All information quantities are in nats.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// Standard-normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `p log p` with the `0 log 0 = 0` convention.
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no categories".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "entry {p} is not a probability"
            )));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().map(|&p| plogp(p)).sum::<f64>()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Shannon entropy of a categorical distribution.
pub fn entropy_categorical(d: &CategoricalDist) -> f64 {
    d.entropy()
}

/// `h_b(p) = −(p log p + (1−p) log(1−p))`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidDistribution(format!("{p} is outside [0, 1]")));
    }
    Ok(-(plogp(p) + plogp(1.0 - p)))
}

/// `E[Φ(Z)]` for `Z ~ N(mu, var)`, which equals `Φ(mu / √(1 + var))`.
pub fn gaussian_sigmoid_expectation(mu: f64, var: f64) -> Result<f64> {
    if !(var >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance {var} is negative"
        )));
    }
    Ok(normal_cdf(mu / (1.0 + var).sqrt()))
}

/// A multivariate normal with symmetric positive-definite covariance.
#[derive(Clone, Debug)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "covariance order",
                expected: n,
                got: cov.nrows(),
            });
        }
        for i in 0..n {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self { mean, cov })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![0.0; cov.nrows()], cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// `KL(N(0, I) ‖ N(0, Σ)) = ½ (tr Σ⁻¹ − n + ln |Σ|)`.
pub fn kl_std_normal_vs(g: &GaussianSpec) -> Result<f64> {
    if g.mean.iter().any(|&m| m != 0.0) {
        return Err(Error::InvalidArgument(
            "expected a zero-mean Gaussian".into(),
        ));
    }
    let n = g.dim();
    kl_zero_mean(&DMatrix::identity(n, n), &g.cov)
}

/// `KL(N(0, P) ‖ N(0, Q)) = ½ (tr(Q⁻¹P) − n + ln|Q| − ln|P|)`.
///
/// `ln|P|` is taken over eigenvalues floored at `1e-12`, so rank-deficient
/// `P` yields a large but finite constant.
pub fn kl_zero_mean(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let n = p.nrows();
    let chol = q.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let logdet_q = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol.solve(p).trace();
    Ok(0.5 * (trace - n as f64 + logdet_q - floored_logdet(p)))
}

pub(crate) fn floored_logdet(p: &DMatrix<f64>) -> f64 {
    match p.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => SymmetricEigen::new(p.clone())
            .eigenvalues
            .iter()
            .map(|&l| l.max(1e-12).ln())
            .sum(),
    }
}

/// Purpose tag for a derived random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Alpha,
    Beta,
    Noise,
    Batch,
    Posterior,
    Intervention,
    Trial,
}

/// Reproducible counter-based generator with derivable substreams.
///
/// A `(seed, stream)` pair fully determines the draw sequence, so work split
/// across substreams is independent of evaluation order.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for `(purpose, index)`, independent of how many draws
    /// the parent has made.
    pub fn substream(&self, purpose: Stream, index: u64) -> Self {
        let tag = (purpose as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let stream = splitmix(self.stream ^ splitmix(tag ^ splitmix(index)));
        Self::with_stream(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn standard_normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. standard-normal draws.
pub fn sample_std_normal(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    rng.standard_normals(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn categorical_entropy_examples() {
        let half = CategoricalDist::new(vec![0.5, 0.5]).unwrap();
        assert!((entropy_categorical(&half) - LN_2).abs() < 1e-15);
        let point = CategoricalDist::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy_categorical(&point), 0.0);
        let quarter = CategoricalDist::uniform(4);
        assert!((entropy_categorical(&quarter) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_rejects_invalid() {
        assert!(CategoricalDist::new(vec![-0.1, 1.1]).is_err());
        assert!(CategoricalDist::new(vec![0.3, 0.3]).is_err());
    }

    #[test]
    fn binary_entropy_examples() {
        assert!((binary_entropy(0.5).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        let direct = -(0.1f64 * 0.1f64.ln() + 0.9 * 0.9f64.ln());
        let via_cat = CategoricalDist::new(vec![0.1, 0.9]).unwrap().entropy();
        let hb = binary_entropy(0.1).unwrap();
        assert!((hb - direct).abs() < 1e-15 && (hb - via_cat).abs() < 1e-15);
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn normal_cdf_reference_values() {
        // Φ(1), Φ(2), Φ(-3) to 16 digits.
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(2.0) - 0.977_249_868_051_820_8).abs() < 1e-15);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-17);
    }

    #[test]
    fn gaussian_sigmoid_expectation_examples() {
        assert_eq!(gaussian_sigmoid_expectation(0.0, 7.0).unwrap(), 0.5);
        assert_eq!(
            gaussian_sigmoid_expectation(2.0, 0.0).unwrap(),
            normal_cdf(2.0)
        );
        assert!(gaussian_sigmoid_expectation(1.0, -1.0).is_err());

        let mut rng = SeededRng::new(11);
        let n = 1_000_000;
        let mc: f64 = (0..n)
            .map(|_| normal_cdf(1.0 + 3f64.sqrt() * rng.standard_normal()))
            .sum::<f64>()
            / n as f64;
        assert!((mc - normal_cdf(0.5)).abs() < 1e-3, "{mc}");
    }

    #[test]
    fn kl_examples() {
        let id = GaussianSpec::zero_mean(DMatrix::identity(3, 3)).unwrap();
        assert!(kl_std_normal_vs(&id).unwrap().abs() < 1e-15);

        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let g = GaussianSpec::zero_mean(cov).unwrap();
        // ½ (tr Σ⁻¹ − 2 + ln|Σ|) with Σ⁻¹ = diag(0.5, 2), |Σ| = 1.
        let expected = 0.5 * (0.5 + 2.0 - 2.0 + 0.0);
        assert!((kl_std_normal_vs(&g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_for_orthogonal_normalized_map() {
        let gamma: f64 = 0.05;
        let c = (1.0 - gamma).sqrt();
        let (s, co) = (0.3f64.sin(), 0.3f64.cos());
        let w = DMatrix::from_row_slice(2, 2, &[c * co, -c * s, c * s, c * co]);
        let cov = &w * w.transpose() + DMatrix::identity(2, 2) * gamma;
        let cov = (&cov + cov.transpose()) * 0.5;
        let g = GaussianSpec::zero_mean(cov).unwrap();
        assert!(kl_std_normal_vs(&g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianSpec::zero_mean(cov),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_std_normal(&mut SeededRng::new(5), 3);
        let b = sample_std_normal(&mut SeededRng::new(5), 3);
        assert_eq!(a, b);
        let c = sample_std_normal(&mut SeededRng::new(6), 3);
        assert_ne!(a, c);
    }

    #[test]
    fn substreams_are_order_independent() {
        let root = SeededRng::new(1);
        let mut advanced = root.clone();
        advanced.standard_normals(10);
        let a = root.substream(Stream::Alpha, 3).standard_normals(4);
        let b = advanced.substream(Stream::Alpha, 3).standard_normals(4);
        assert_eq!(a, b);
        let c = root.substream(Stream::Beta, 3).standard_normals(4);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_moments() {
        let xs = sample_std_normal(&mut SeededRng::new(2024), 1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.005, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    fn random_simplex(raw: Vec<f64>) -> CategoricalDist {
        let s: f64 = raw.iter().sum();
        CategoricalDist::new(raw.iter().map(|x| x / s).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn entropy_is_concave(
            p in prop::collection::vec(0.01f64..1.0, 4),
            q in prop::collection::vec(0.01f64..1.0, 4),
            lam in 0.0f64..1.0,
        ) {
            let (p, q) = (random_simplex(p), random_simplex(q));
            let mix: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let mix = random_simplex(mix);
            prop_assert!(mix.entropy() + 1e-12 >= lam * p.entropy() + (1.0 - lam) * q.entropy());
        }

        #[test]
        fn entropy_bounded_by_log_m(p in prop::collection::vec(0.0f64..1.0, 1..6)) {
            prop_assume!(p.iter().sum::<f64>() > 1e-6);
            let d = random_simplex(p);
            let h = d.entropy();
            prop_assert!(h >= 0.0 && h <= (d.num_classes() as f64).ln() + 1e-12);
        }

        #[test]
        fn kl_invariant_under_rotation(theta in 0.0f64..6.3, l1 in 0.2f64..3.0, l2 in 0.2f64..3.0) {
            let (s, c) = theta.sin_cos();
            let r = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![l1, l2]));
            let rotated = &r * &d * r.transpose();
            let rotated = (&rotated + rotated.transpose()) * 0.5;
            let a = kl_std_normal_vs(&GaussianSpec::zero_mean(d).unwrap()).unwrap();
            let b = kl_std_normal_vs(&GaussianSpec::zero_mean(rotated).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn binary_entropy_symmetric(p in 0.0f64..=1.0) {
            prop_assert!((binary_entropy(p).unwrap() - binary_entropy(1.0 - p).unwrap()).abs() < 1e-12);
        }
    }
}

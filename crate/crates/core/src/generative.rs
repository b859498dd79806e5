//! Generative maps `g: (α, β) → X`: a linear-Gaussian map and a VAE.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::prob::{floored_logdet, SeededRng, Stream};

/// Causal factors `α ∈ R^K` followed by noncausal factors `β ∈ R^L`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LatentVector {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() && beta.is_empty() {
            return Err(Error::InvalidArgument(
                "latent vector needs K + L >= 1".into(),
            ));
        }
        Ok(Self { alpha, beta })
    }

    pub fn zeros(k: usize, l: usize) -> Self {
        Self {
            alpha: vec![0.0; k],
            beta: vec![0.0; l],
        }
    }

    /// Independent standard-normal draw from the prior.
    pub fn sample(k: usize, l: usize, rng: &mut SeededRng) -> Self {
        Self {
            alpha: rng.standard_normals(k),
            beta: rng.standard_normals(l),
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn l(&self) -> usize {
        self.beta.len()
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut z = self.alpha.clone();
        z.extend_from_slice(&self.beta);
        z
    }
}

/// How a VAE turns decoder logits into a data sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecodeMode {
    #[default]
    Mean,
    Bernoulli,
}

/// A differentiable map from latents (and exogenous noise) to data space.
///
/// Latent matrices are `n × (K + L)` with the causal factors first.
pub trait GenerativeMap {
    fn k(&self) -> usize;
    fn l(&self) -> usize;
    fn data_dim(&self) -> usize;
    /// Width of the standard-normal noise each sample consumes.
    fn noise_dim(&self) -> usize;

    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn bind(&self, tape: &Tape, tracked: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if tracked {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Maps `z` (`n × (K+L)`) and `eps` (`n × noise_dim`, ignored when the
    /// noise width is zero) to `n × data_dim` samples.
    fn generate_on(&self, tape: &Tape, bound: &[Var], z: Var, eps: Option<Var>) -> Result<Var>;

    fn latent_dim(&self) -> usize {
        self.k() + self.l()
    }

    /// Forward pass without gradient tracking.
    fn generate_batch(&self, z: &Tensor, eps: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let zv = tape.constant(z.clone());
        let ev = eps.map(|e| tape.constant(e.clone()));
        let x = self.generate_on(&tape, &bound, zv, ev)?;
        Ok((*tape.value(x)).clone())
    }
}

fn check_latent(z: &LatentVector, k: usize, l: usize) -> Result<()> {
    if z.k() != k {
        return Err(Error::DimensionMismatch {
            what: "causal factor count",
            expected: k,
            got: z.k(),
        });
    }
    if z.l() != l {
        return Err(Error::DimensionMismatch {
            what: "noncausal factor count",
            expected: l,
            got: z.l(),
        });
    }
    Ok(())
}

fn check_width(tape: &Tape, v: Var, width: usize, what: &'static str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] != width {
        return Err(Error::DimensionMismatch {
            what,
            expected: width,
            got: s.last().copied().unwrap_or(0),
        });
    }
    Ok(s[0])
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// `X = W_α α + W_β β + ε` with `ε ~ N(0, γI)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianMap {
    k: usize,
    /// `N × (K+L)`, the columns of `W_α` followed by those of `W_β`.
    w: Tensor,
    gamma: f64,
}

impl LinearGaussianMap {
    pub const DEFAULT_GAMMA: f64 = 0.05;

    pub fn new(w_alpha: &Tensor, w_beta: &Tensor, gamma: f64) -> Result<Self> {
        let (n, k) = w_alpha.as_matrix("W_alpha")?;
        let (n2, l) = w_beta.as_matrix("W_beta")?;
        if n != n2 {
            return Err(Error::DimensionMismatch {
                what: "W_beta rows",
                expected: n,
                got: n2,
            });
        }
        let mut w = Tensor::zeros(&[n, k + l]);
        for i in 0..n {
            for j in 0..k {
                w.set2(i, j, w_alpha.get2(i, j));
            }
            for j in 0..l {
                w.set2(i, k + j, w_beta.get2(i, j));
            }
        }
        Self::from_matrix(w, k, gamma)
    }

    pub fn from_matrix(w: Tensor, k: usize, gamma: f64) -> Result<Self> {
        let (_, kl) = w.as_matrix("W")?;
        if kl == 0 || k > kl {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= K + L and K <= K + L, got K={k}, K+L={kl}"
            )));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance {gamma} not in (0, 1)"
            )));
        }
        if !w.is_finite() {
            return Err(Error::InvalidArgument("W has non-finite entries".into()));
        }
        Ok(Self { k, w, gamma })
    }

    /// Random Gaussian columns projected to norm `√(1−γ)`.
    pub fn random(n: usize, k: usize, l: usize, gamma: f64, rng: &mut SeededRng) -> Result<Self> {
        let w = Tensor::matrix(n, k + l, rng.standard_normals(n * (k + l)))?;
        let mut m = Self::from_matrix(w, k, gamma)?;
        m.normalize_columns();
        Ok(m)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.w.rows()).map(|i| self.w.get2(i, j)).collect()
    }

    /// `W_α`, or `None` when `K = 0`.
    pub fn w_alpha(&self) -> Option<Tensor> {
        self.columns(0..self.k)
    }

    /// `W_β`, or `None` when `L = 0`.
    pub fn w_beta(&self) -> Option<Tensor> {
        self.columns(self.k..self.w.cols())
    }

    fn columns(&self, range: std::ops::Range<usize>) -> Option<Tensor> {
        let n = self.w.rows();
        let width = range.len();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend(range.clone().map(|j| self.w.get2(i, j)));
        }
        (width > 0).then(|| Tensor::matrix(n, width, out).expect("column slice"))
    }

    /// Rescales every nonzero column to magnitude `√(1−γ)`.
    pub fn normalize_columns(&mut self) {
        let target = (1.0 - self.gamma).sqrt();
        let (n, c) = (self.w.rows(), self.w.cols());
        for j in 0..c {
            let norm = (0..n)
                .map(|i| self.w.get2(i, j).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for i in 0..n {
                    let v = self.w.get2(i, j) * target / norm;
                    self.w.set2(i, j, v);
                }
            }
        }
    }

    /// Covariance `WWᵀ + γI` of the generated distribution.
    pub fn model_covariance(&self) -> DMatrix<f64> {
        let w = to_dmatrix(&self.w);
        let n = w.nrows();
        &w * w.transpose() + DMatrix::identity(n, n) * self.gamma
    }

    /// `D = −KL(N(0, Σ_data) ‖ N(0, WWᵀ + γI))` and its gradient with respect to `W`.
    pub fn fidelity(&self, data_cov: &DMatrix<f64>) -> Result<(f64, Tensor)> {
        let n = self.w.rows();
        if data_cov.nrows() != n || data_cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "data covariance size",
                expected: n,
                got: data_cov.nrows(),
            });
        }
        let s = self.model_covariance();
        let s_inv = s
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .inverse();
        let kl = 0.5
            * ((&s_inv * data_cov).trace() - n as f64 + floored_logdet(&s)
                - floored_logdet(data_cov));
        let dkl_ds = (&s_inv - &s_inv * data_cov * &s_inv) * 0.5;
        let grad = -(dkl_ds * to_dmatrix(&self.w) * 2.0);
        let mut g = Tensor::zeros(&[n, self.w.cols()]);
        for i in 0..n {
            for j in 0..self.w.cols() {
                g.set2(i, j, grad[(i, j)]);
            }
        }
        Ok((-kl, g))
    }

    pub fn generate(&self, z: &LatentVector, rng: &mut SeededRng) -> Result<Tensor> {
        check_latent(z, self.k, self.l())?;
        let n = self.w.rows();
        let zt = Tensor::matrix(1, self.latent_dim(), z.concat())?;
        let eps = Tensor::matrix(1, n, rng.standard_normals(n))?;
        self.generate_batch(&zt, Some(&eps))
    }
}

impl GenerativeMap for LinearGaussianMap {
    fn k(&self) -> usize {
        self.k
    }

    fn l(&self) -> usize {
        self.w.cols() - self.k
    }

    fn data_dim(&self) -> usize {
        self.w.rows()
    }

    fn noise_dim(&self) -> usize {
        self.w.rows()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w]
    }

    fn generate_on(&self, tape: &Tape, bound: &[Var], z: Var, eps: Option<Var>) -> Result<Var> {
        let n = check_width(tape, z, self.latent_dim(), "latent width")?;
        let wt = tape.transpose(bound[0])?;
        let x = tape.matmul(z, wt)?;
        let eps = eps.ok_or_else(|| {
            Error::InvalidArgument("linear-Gaussian map needs a noise draw".into())
        })?;
        if check_width(tape, eps, self.data_dim(), "noise width")? != n {
            return Err(Error::ShapeMismatch {
                op: "generate",
                lhs: tape.shape(z),
                rhs: tape.shape(eps),
            });
        }
        tape.add(x, tape.scale(eps, self.gamma.sqrt()))
    }
}

/// Dense VAE: Bernoulli decoder over `[0, 1]` data and a diagonal-Gaussian encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    k: usize,
    l: usize,
    decoder: Mlp,
    trunk: Mlp,
    mu_head: Mlp,
    logvar_head: Mlp,
    pub decode_mode: DecodeMode,
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub sample: Tensor,
}

/// ELBO pieces, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.kl
    }
}

impl VaeModel {
    pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];

    /// Encoder `data → hidden[0] → hidden[1] → (μ, log σ²)`, decoder the mirror image.
    pub fn new(
        data_dim: usize,
        k: usize,
        l: usize,
        hidden: &[usize],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k + l == 0 {
            return Err(Error::InvalidArgument("VAE needs K + L >= 1".into()));
        }
        if hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "VAE needs at least one hidden layer".into(),
            ));
        }
        let z = k + l;
        let mut enc = vec![data_dim];
        enc.extend_from_slice(hidden);
        let mut dec = vec![z];
        dec.extend(hidden.iter().rev());
        dec.push(data_dim);
        let last = *hidden.last().unwrap();
        let mut rng = rng.substream(Stream::Init, 1);
        let decoder = Mlp::new(&dec, &mut rng)?;
        let trunk = Mlp::new(&enc, &mut rng)?;
        let mu_head = Mlp::new(&[last, z], &mut rng)?;
        let mut logvar_head = Mlp::new(&[last, z], &mut rng)?;
        // Start the posterior variances near the prior's.
        logvar_head.params_mut()[0].scale_assign(0.01);
        Ok(Self {
            k,
            l,
            decoder,
            trunk,
            mu_head,
            logvar_head,
            decode_mode: DecodeMode::Mean,
        })
    }

    pub fn from_parts(
        k: usize,
        l: usize,
        decoder: Mlp,
        trunk: Mlp,
        mu_head: Mlp,
        logvar_head: Mlp,
    ) -> Result<Self> {
        let z = k + l;
        let ok = z > 0
            && decoder.input_dim() == z
            && trunk.input_dim() == decoder.output_dim()
            && mu_head.input_dim() == trunk.output_dim()
            && logvar_head.input_dim() == trunk.output_dim()
            && mu_head.output_dim() == z
            && logvar_head.output_dim() == z;
        if !ok {
            return Err(Error::InvalidArgument(
                "VAE parts have inconsistent sizes".into(),
            ));
        }
        Ok(Self {
            k,
            l,
            decoder,
            trunk,
            mu_head,
            logvar_head,
            decode_mode: DecodeMode::Mean,
        })
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// The four networks in storage order: decoder, trunk, μ head, log-variance head.
    pub fn parts(&self) -> [&Mlp; 4] {
        [&self.decoder, &self.trunk, &self.mu_head, &self.logvar_head]
    }

    fn decoder_param_count(&self) -> usize {
        self.decoder.params().len()
    }

    /// Decoder logits on the tape.
    pub fn decode_logits(&self, tape: &Tape, bound: &[Var], z: Var) -> Result<Var> {
        self.decoder
            .forward(tape, &bound[..self.decoder_param_count()], z)
    }

    /// `(μ, log σ²)` on the tape.
    pub fn encode_on(&self, tape: &Tape, bound: &[Var], x: Var) -> Result<(Var, Var)> {
        let d = self.decoder_param_count();
        let t = self.trunk.params().len();
        let m = self.mu_head.params().len();
        let h = tape.relu(self.trunk.forward(tape, &bound[d..d + t], x)?);
        let mu = self.mu_head.forward(tape, &bound[d + t..d + t + m], h)?;
        let lv = self.logvar_head.forward(tape, &bound[d + t + m..], h)?;
        Ok((mu, lv))
    }

    /// Posterior mean, log-variance and a reparameterised sample for each row of `x`.
    pub fn encode(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Posterior> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let n = x.rows();
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.encode_on(&tape, &bound, xv)?;
        let eps = tape.constant(Tensor::matrix(
            n,
            self.latent_dim(),
            rng.standard_normals(n * self.latent_dim()),
        )?);
        let sample = reparameterize(&tape, mu, lv, eps)?;
        Ok(Posterior {
            mean: (*tape.value(mu)).clone(),
            logvar: (*tape.value(lv)).clone(),
            sample: (*tape.value(sample)).clone(),
        })
    }

    /// Decoder mean (or a Bernoulli sample, per `decode_mode`) for each latent row.
    pub fn decode(&self, z: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let mean = self.generate_batch(z, None)?;
        Ok(match self.decode_mode {
            DecodeMode::Mean => mean,
            DecodeMode::Bernoulli => {
                let data = mean
                    .data()
                    .iter()
                    .map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(mean.shape().to_vec(), data)?
            }
        })
    }

    pub fn generate(&self, z: &LatentVector, rng: &mut SeededRng) -> Result<Tensor> {
        check_latent(z, self.k, self.l)?;
        self.decode(&Tensor::matrix(1, self.latent_dim(), z.concat())?, rng)
    }

    /// Batch-averaged ELBO on the tape; returns `(elbo, reconstruction, kl)` vars.
    pub fn elbo_on(
        &self,
        tape: &Tape,
        bound: &[Var],
        batch: &Tensor,
        rng: &mut SeededRng,
    ) -> Result<(Var, Var, Var)> {
        let (n, d) = batch.as_matrix("elbo batch")?;
        if d != self.data_dim() {
            return Err(Error::DimensionMismatch {
                what: "batch width",
                expected: self.data_dim(),
                got: d,
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("ELBO of an empty batch".into()));
        }
        if batch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "ELBO data must lie in [0, 1]".into(),
            ));
        }
        let x = tape.constant(batch.clone());
        let (mu, lv) = self.encode_on(tape, bound, x)?;
        let eps = tape.constant(Tensor::matrix(
            n,
            self.latent_dim(),
            rng.standard_normals(n * self.latent_dim()),
        )?);
        let z = reparameterize(tape, mu, lv, eps)?;
        let logits = self.decode_logits(tape, bound, z)?;
        // x·ℓ − softplus(ℓ) is log Bernoulli(x; sigmoid(ℓ)).
        let rec = tape.sub(tape.mul(x, logits)?, tape.softplus(logits))?;
        let rec = tape.scale(tape.sum(rec), 1.0 / n as f64);
        let kl_terms = tape.sub(
            tape.add(tape.mul(mu, mu)?, tape.exp(lv))?,
            tape.add_scalar(lv, 1.0),
        )?;
        let kl = tape.scale(tape.sum(kl_terms), 0.5 / n as f64);
        Ok((tape.sub(rec, kl)?, rec, kl))
    }

    pub fn elbo_terms(&self, batch: &Tensor, rng: &mut SeededRng) -> Result<ElboTerms> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (_, rec, kl) = self.elbo_on(&tape, &bound, batch, rng)?;
        Ok(ElboTerms {
            reconstruction: tape.value(rec).item(),
            kl: tape.value(kl).item(),
        })
    }

    pub fn elbo(&self, batch: &Tensor, rng: &mut SeededRng) -> Result<f64> {
        Ok(self.elbo_terms(batch, rng)?.elbo())
    }
}

fn reparameterize(tape: &Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let std = tape.exp(tape.scale(logvar, 0.5));
    tape.add(mu, tape.mul(std, eps)?)
}

impl GenerativeMap for VaeModel {
    fn k(&self) -> usize {
        self.k
    }

    fn l(&self) -> usize {
        self.l
    }

    fn data_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    fn noise_dim(&self) -> usize {
        0
    }

    fn params(&self) -> Vec<&Tensor> {
        self.parts()
            .into_iter()
            .flat_map(|m| m.params().iter())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            decoder,
            trunk,
            mu_head,
            logvar_head,
            ..
        } = self;
        [decoder, trunk, mu_head, logvar_head]
            .into_iter()
            .flat_map(|m| m.params_mut().iter_mut())
            .collect()
    }

    fn generate_on(&self, tape: &Tape, bound: &[Var], z: Var, _eps: Option<Var>) -> Result<Var> {
        check_width(tape, z, self.latent_dim(), "latent width")?;
        let logits = self.decode_logits(tape, bound, z)?;
        Ok(tape.sigmoid(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn empirical_cov(x: &Tensor) -> DMatrix<f64> {
        crate::data::Dataset::new(x.clone(), None)
            .unwrap()
            .second_moment()
    }

    fn lingauss_draws(m: &LinearGaussianMap, n: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        let z =
            Tensor::matrix(n, m.latent_dim(), rng.standard_normals(n * m.latent_dim())).unwrap();
        let e = Tensor::matrix(n, m.noise_dim(), rng.standard_normals(n * m.noise_dim())).unwrap();
        m.generate_batch(&z, Some(&e)).unwrap()
    }

    #[test]
    fn zero_latent_small_noise_gives_origin() {
        let w = Tensor::eye(2);
        let m = LinearGaussianMap::from_matrix(w, 1, 1e-300).unwrap();
        let x = m
            .generate(&LatentVector::zeros(1, 1), &mut SeededRng::new(1))
            .unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 1e-140));
    }

    #[test]
    fn normalized_identity_map_reproduces_unit_covariance() {
        let gamma = 0.05f64;
        let mut w = Tensor::eye(2);
        w.scale_assign((1.0 - gamma).sqrt());
        let m = LinearGaussianMap::from_matrix(w, 1, gamma).unwrap();
        let cov = empirical_cov(&lingauss_draws(&m, 100_000, 3));
        assert!((cov - DMatrix::<f64>::identity(2, 2)).norm() < 0.02);
    }

    #[test]
    fn draws_converge_to_model_covariance() {
        let mut rng = SeededRng::new(11);
        for n in 2..=4 {
            let w = Tensor::matrix(n, 3, rng.standard_normals(3 * n)).unwrap();
            let m = LinearGaussianMap::from_matrix(w, 2, 0.05).unwrap();
            let cov = empirical_cov(&lingauss_draws(&m, 100_000, n as u64));
            let err = (cov - m.model_covariance()).norm();
            let scale = m.model_covariance().norm();
            assert!(err < 0.05 * scale.max(1.0), "N={n}: {err}");
        }
    }

    #[test]
    fn orthogonal_normalized_w_has_zero_kl() {
        let mut m = LinearGaussianMap::random(3, 1, 2, 0.05, &mut SeededRng::new(2)).unwrap();
        let q = crate::data::random_orthonormal(3, 3, &mut SeededRng::new(5));
        m.w = q;
        m.normalize_columns();
        let (d, g) = m.fidelity(&DMatrix::identity(3, 3)).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(4);
        let m = LinearGaussianMap::from_matrix(
            Tensor::matrix(3, 2, rng.standard_normals(6)).unwrap(),
            1,
            0.1,
        )
        .unwrap();
        let a = Tensor::matrix(3, 3, rng.standard_normals(9)).unwrap();
        let cov = to_dmatrix(&a) * to_dmatrix(&a).transpose() + DMatrix::identity(3, 3) * 0.1;
        let (_, g) = m.fidelity(&cov).unwrap();
        let h = 1e-6;
        for idx in 0..6 {
            let mut p = m.clone();
            p.w.data_mut()[idx] += h;
            let mut q = m.clone();
            q.w.data_mut()[idx] -= h;
            let fd = (p.fidelity(&cov).unwrap().0 - q.fidelity(&cov).unwrap().0) / (2.0 * h);
            assert!(
                (fd - g.data()[idx]).abs() < 1e-6 * fd.abs().max(1.0),
                "{idx}: {fd} vs {}",
                g.data()[idx]
            );
        }
    }

    #[test]
    fn latent_dimension_checked() {
        let m = LinearGaussianMap::random(2, 1, 1, 0.05, &mut SeededRng::new(1)).unwrap();
        assert!(m
            .generate(&LatentVector::zeros(2, 0), &mut SeededRng::new(1))
            .is_err());
        assert!(LatentVector::new(vec![], vec![]).is_err());
    }

    fn small_vae(seed: u64) -> VaeModel {
        VaeModel::new(6, 1, 2, &[5, 4], &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn vae_decoding_is_deterministic() {
        let vae = small_vae(1);
        let z = LatentVector::new(vec![0.3], vec![-1.0, 2.0]).unwrap();
        let a = vae.generate(&z, &mut SeededRng::new(1)).unwrap();
        let b = vae.generate(&z, &mut SeededRng::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_encoder_gives_prior_sample() {
        let mut vae = small_vae(2);
        for (i, p) in vae.params_mut().into_iter().enumerate() {
            if i >= 6 {
                p.scale_assign(0.0);
            }
        }
        let x = Tensor::zeros(&[1, 6]);
        let post = vae.encode(&x, &mut SeededRng::new(9)).unwrap();
        let draws = Tensor::from_vec(SeededRng::new(9).standard_normals(3));
        assert!(post.mean.data().iter().all(|&v| v == 0.0));
        assert_eq!(post.sample.data(), draws.data());
    }

    #[test]
    fn elbo_terms_have_expected_signs_and_oracle_kl() {
        let vae = small_vae(3);
        let mut rng = SeededRng::new(3);
        let batch = Tensor::matrix(4, 6, (0..24).map(|_| rng.uniform()).collect()).unwrap();
        let terms = vae.elbo_terms(&batch, &mut SeededRng::new(1)).unwrap();
        assert!(terms.reconstruction <= 0.0 && terms.kl >= 0.0);
        let post = vae.encode(&batch, &mut SeededRng::new(1)).unwrap();
        let mut kl = 0.0;
        for (m, lv) in post.mean.data().iter().zip(post.logvar.data()) {
            let var = lv.exp();
            kl += 0.5 * (m * m + var - 1.0 - var.ln());
        }
        assert!((terms.kl - kl / 4.0).abs() < 1e-12);
    }

    #[test]
    fn prior_encoder_and_uninformed_decoder() {
        let mut vae = small_vae(4);
        for p in vae.params_mut() {
            p.scale_assign(0.0);
        }
        let batch = Tensor::full(&[3, 6], 0.3);
        let t = vae.elbo_terms(&batch, &mut SeededRng::new(1)).unwrap();
        assert_eq!(t.kl, 0.0);
        assert!((t.reconstruction + 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn elbo_rejects_out_of_range_data() {
        let vae = small_vae(5);
        let batch = Tensor::full(&[1, 6], 1.5);
        assert!(vae.elbo(&batch, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let vae = small_vae(6);
        let mut rng = SeededRng::new(6);
        let batch = Tensor::matrix(3, 6, (0..18).map(|_| rng.uniform()).collect()).unwrap();
        let params: Vec<Tensor> = vae.params().into_iter().cloned().collect();
        let check = gradcheck::check(
            |t, vars| {
                let (e, _, _) = vae.elbo_on(t, vars, &batch, &mut SeededRng::new(42))?;
                Ok(e)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(check.rel_error < 1e-4, "{}", check.rel_error);
    }

    #[test]
    fn encoder_sample_gradient_matches_finite_differences() {
        let vae = small_vae(7);
        let mut rng = SeededRng::new(7);
        let x = Tensor::matrix(2, 6, (0..12).map(|_| rng.uniform()).collect()).unwrap();
        let eps = Tensor::matrix(2, 3, rng.standard_normals(6)).unwrap();
        let params: Vec<Tensor> = vae.params().into_iter().cloned().collect();
        let check = gradcheck::check(
            |t, vars| {
                let xv = t.constant(x.clone());
                let (mu, lv) = vae.encode_on(t, vars, xv)?;
                let s = reparameterize(t, mu, lv, t.constant(eps.clone()))?;
                Ok(t.sum(t.mul(s, s)?))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(check.rel_error < 1e-5, "{}", check.rel_error);
    }
}

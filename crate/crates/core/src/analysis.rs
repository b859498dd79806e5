//! Evaluating a trained explainer: latent sweeps, objective landscapes over
//! column orientations, per-factor influence, intervention tests and the
//! capacity certificate.

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;

use crate::autodiff::Tensor;
use crate::classifiers::{
    predict_in_chunks, AndClassifier, Classifier, LinearSigmoidClassifier, Sigmoid,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{GenerativeMap, LinearGaussianMap};
use crate::influence::{
    decomposition_terms, estimate_influence, per_factor_flows, SampleBudget, Variant,
};
use crate::objective::Explainer;
use crate::prob::{argmax, SeededRng, Stream};

/// Decodes latent rows with the noise set to zero (decoder mean for the VAE).
pub fn decode_mean(g: &dyn GenerativeMap, z: &Tensor) -> Result<Tensor> {
    let nd = g.noise_dim();
    if nd == 0 {
        return g.generate_batch(z, None);
    }
    let eps = Tensor::zeros(&[z.rows(), nd]);
    g.generate_batch(z, Some(&eps))
}

/// Decoded outputs of a one-factor traversal around each anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    /// `n_anchors × (K+L)`.
    pub anchors: Tensor,
    pub factor: usize,
    /// Offsets added to the swept coordinate, one per column.
    pub values: Vec<f64>,
    /// `(n_anchors·steps) × data_dim`, anchor-major.
    pub outputs: Tensor,
    /// `(n_anchors·steps) × M`, same order as `outputs`.
    pub probs: Tensor,
}

impl SweepGrid {
    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.rows()
    }

    pub fn cell(&self, anchor: usize, step: usize) -> &[f64] {
        self.outputs.row(anchor * self.steps() + step)
    }

    pub fn cell_probs(&self, anchor: usize, step: usize) -> &[f64] {
        self.probs.row(anchor * self.steps() + step)
    }
}

/// `steps` evenly spaced offsets over `[−range, range]`; a single step is offset 0.
pub fn sweep_offsets(range: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..steps)
            .map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

/// Varies latent coordinate `factor` around each anchor row and decodes every cell.
pub fn latent_sweep(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    anchors: &Tensor,
    factor: usize,
    range: f64,
    steps: usize,
) -> Result<SweepGrid> {
    let d = g.latent_dim();
    if factor >= d {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} out of range for {d} latent dimensions"
        )));
    }
    if anchors.shape().len() != 2 || anchors.cols() != d {
        return Err(Error::DimensionMismatch {
            what: "anchor width",
            expected: d,
            got: anchors.shape().last().copied().unwrap_or(0),
        });
    }
    if steps == 0 || !(range >= 0.0) || !range.is_finite() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one step and a finite range >= 0".into(),
        ));
    }
    if f.input_dim() != g.data_dim() {
        return Err(Error::DimensionMismatch {
            what: "classifier input width",
            expected: g.data_dim(),
            got: f.input_dim(),
        });
    }
    let values = sweep_offsets(range, steps);
    let n = anchors.rows();
    let mut z = Tensor::zeros(&[n * steps, d]);
    for a in 0..n {
        for (s, v) in values.iter().enumerate() {
            let row = z.row_mut(a * steps + s);
            row.copy_from_slice(anchors.row(a));
            row[factor] += v;
        }
    }
    let outputs = decode_mean(g, &z)?;
    let probs = predict_in_chunks(f, &outputs)?;
    Ok(SweepGrid {
        anchors: anchors.clone(),
        factor,
        values,
        outputs,
        probs,
    })
}

/// Classifiers studied in the orientation landscapes (2-D data).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LandscapeKind {
    /// `K = L = 1`, logistic boundary with normal `[1, 0]`; axes are `θ(w_α)`, `θ(w_β)`.
    SingleHyperplane { steepness: f64 },
    /// `K = 2, L = 0`, conjunction of normals `[1, 0]` and `[0, 1]`; axes are `θ(w_α1)`, `θ(w_α2)`.
    And { steepness: f64 },
}

impl LandscapeKind {
    pub fn single_default() -> Self {
        Self::SingleHyperplane { steepness: 5.0 }
    }

    pub fn and_default() -> Self {
        Self::And { steepness: 100.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::SingleHyperplane { .. } => "single",
            Self::And { .. } => "and",
        }
    }

    pub fn classifier(&self) -> Result<Box<dyn Classifier>> {
        Ok(match *self {
            Self::SingleHyperplane { steepness } => Box::new(LinearSigmoidClassifier::new(
                vec![1.0, 0.0],
                Sigmoid::Logistic { steepness },
            )?),
            Self::And { steepness } => Box::new(AndClassifier::new(
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                steepness,
            )?),
        })
    }

    fn split(&self) -> usize {
        match self {
            Self::SingleHyperplane { .. } => 1,
            Self::And { .. } => 2,
        }
    }
}

/// Objective values over a regular grid of column orientations.
///
/// Cell `(i, j)` (row-major) has the first column at `angles[i]` and the
/// second at `angles[j]`, both of norm `√(1−γ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleLandscape {
    pub kind: LandscapeKind,
    pub gamma: f64,
    /// Degrees in `[0, 180)`.
    pub angles: Vec<f64>,
    pub causal: Vec<(Variant, Vec<f64>)>,
    /// `D` against isotropic unit-variance data.
    pub fidelity: Vec<f64>,
    /// `H(Y)` per cell, single hyperplane only.
    pub output_entropy: Option<Vec<f64>>,
}

impl AngleLandscape {
    pub fn res(&self) -> usize {
        self.angles.len()
    }

    pub fn causal_of(&self, v: Variant) -> Option<&[f64]> {
        self.causal
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, c)| c.as_slice())
    }

    /// `C + λD` per cell.
    pub fn total(&self, v: Variant, lambda: f64) -> Option<Vec<f64>> {
        let c = self.causal_of(v)?;
        Some(
            c.iter()
                .zip(&self.fidelity)
                .map(|(c, d)| c + lambda * d)
                .collect(),
        )
    }

    /// Angles of the best cell of `values` (first on ties).
    pub fn argmax(&self, values: &[f64]) -> (f64, f64) {
        let i = argmax(values);
        (self.angles[i / self.res()], self.angles[i % self.res()])
    }
}

/// Distance between two orientations in degrees, modulo 180.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

fn unit(deg: f64, scale: f64) -> [f64; 2] {
    let t = deg * PI / 180.0;
    [scale * t.cos(), scale * t.sin()]
}

/// Evaluates every requested variant and `D` on a `⌈180/res⌉²` grid of orientations.
///
/// All cells reuse the same draws, so differences between cells are not
/// masked by independent sampling noise.
pub fn angle_landscape(
    kind: LandscapeKind,
    variants: &[Variant],
    grid_res_deg: f64,
    budget: SampleBudget,
    gamma: f64,
    rng: &SeededRng,
) -> Result<AngleLandscape> {
    if !(grid_res_deg > 0.0 && grid_res_deg <= 180.0) {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must be in (0, 180], got {grid_res_deg}"
        )));
    }
    let n = (180.0 / grid_res_deg - 1e-9).ceil() as usize;
    let angles: Vec<f64> = (0..n).map(|i| i as f64 * grid_res_deg).collect();
    let f = kind.classifier()?;
    let k = kind.split();
    let scale = (1.0 - gamma).sqrt();
    let data_cov = DMatrix::<f64>::identity(2, 2);
    let mut causal: Vec<(Variant, Vec<f64>)> = variants
        .iter()
        .map(|&v| (v, Vec::with_capacity(n * n)))
        .collect();
    let mut fidelity = Vec::with_capacity(n * n);
    let mut entropy =
        matches!(kind, LandscapeKind::SingleHyperplane { .. }).then(|| Vec::with_capacity(n * n));
    for &a1 in &angles {
        for &a2 in &angles {
            let (c1, c2) = (unit(a1, scale), unit(a2, scale));
            let w = Tensor::matrix(2, 2, vec![c1[0], c2[0], c1[1], c2[1]])?;
            let g = LinearGaussianMap::from_matrix(w, k, gamma)?;
            for (v, out) in causal.iter_mut() {
                out.push(estimate_influence(&g, f.as_ref(), *v, budget, rng)?.value);
            }
            fidelity.push(g.fidelity(&data_cov)?.0);
            if let Some(h) = entropy.as_mut() {
                h.push(decomposition_terms(&g, f.as_ref(), budget, rng)?.0);
            }
        }
    }
    Ok(AngleLandscape {
        kind,
        gamma,
        angles,
        causal,
        fidelity,
        output_entropy: entropy,
    })
}

/// Influence of each latent coordinate on its own, the rest treated as nuisance.
pub fn per_factor_information_flow(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    budget: SampleBudget,
    rng: &SeededRng,
) -> Result<Vec<f64>> {
    per_factor_flows(g, f, budget, rng)
}

/// Classifier accuracies on held-out data before and after removing one latent factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterventionResult {
    pub factor: usize,
    /// On the data itself.
    pub original: f64,
    /// On reconstructions through the posterior mean.
    pub reencoded: f64,
    /// On reconstructions with `factor` redrawn from the prior.
    pub intervened: f64,
}

impl InterventionResult {
    /// Accuracy lost to the intervention relative to plain reconstruction.
    pub fn drop(&self) -> f64 {
        self.reencoded - self.intervened
    }
}

fn label_accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(probs.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Encodes each sample, replaces latent `factor` by a fresh `N(0, 1)` draw and
/// measures how much the classifier's accuracy falls.
pub fn intervention_accuracy_drop(
    g: &Explainer,
    f: &dyn Classifier,
    data: &Dataset,
    factor: usize,
    rng: &SeededRng,
) -> Result<InterventionResult> {
    let vae = match g {
        Explainer::Vae(v) => v,
        Explainer::LinearGaussian(_) => {
            return Err(Error::Unsupported(
                "interventions need an encoder; the linear-Gaussian map has none".into(),
            ))
        }
    };
    let d = vae.latent_dim();
    if factor >= d {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} out of range for {d} latent dimensions"
        )));
    }
    let labels = data.labels()?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "intervention needs at least one labeled sample".into(),
        ));
    }
    let original = label_accuracy(&predict_in_chunks(f, &data.x)?, labels);
    let mut z = vae
        .encode(&data.x, &mut rng.substream(Stream::Posterior, 0))?
        .mean;
    let reencoded = label_accuracy(&predict_in_chunks(f, &decode_mean(vae, &z)?)?, labels);
    let mut draw = rng.substream(Stream::Intervention, factor as u64);
    for i in 0..z.rows() {
        z.row_mut(i)[factor] = draw.standard_normal();
    }
    let intervened = label_accuracy(&predict_in_chunks(f, &decode_mean(vae, &z)?)?, labels);
    Ok(InterventionResult {
        factor,
        original,
        reencoded,
        intervened,
    })
}

/// Upper bound on the error of predicting `Y` from `α` by MAP, given
/// `I(α; Y)` in nats and `M` classes.
///
/// Inverts the piecewise-linear envelope through `((m−1)/m, log₂ m)`,
/// `m = 1..M`, at `H(Y|α) ≤ log₂ M − I/ln 2` bits.
pub fn capacity_certificate(mi_nats: f64, classes: usize) -> Result<f64> {
    if classes == 0 {
        return Err(Error::InvalidArgument(
            "class count must be positive".into(),
        ));
    }
    let ln_m = (classes as f64).ln();
    if !mi_nats.is_finite() || mi_nats < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mutual information must be finite and >= 0, got {mi_nats}"
        )));
    }
    if mi_nats > ln_m + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "mutual information {mi_nats} exceeds ln {classes} = {ln_m}"
        )));
    }
    let h = ((classes as f64).log2() - mi_nats / LN_2).max(0.0);
    for m in 1..classes {
        let (h0, h1) = ((m as f64).log2(), ((m + 1) as f64).log2());
        if h <= h1 {
            let (p0, p1) = ((m - 1) as f64 / m as f64, m as f64 / (m + 1) as f64);
            return Ok(p0 + (h - h0) / (h1 - h0) * (p1 - p0));
        }
    }
    Ok((classes - 1) as f64 / classes as f64)
}

/// MAP error of `Y` from binned `α`: draws `(α, β)` from the prior, samples
/// `Y` from the classifier, bins each causal coordinate into `bins` cells
/// over `[−3, 3]` and predicts each bin's majority label.
pub fn binned_map_error(
    g: &dyn GenerativeMap,
    f: &dyn Classifier,
    n: usize,
    bins: usize,
    rng: &SeededRng,
) -> Result<f64> {
    let k = g.k();
    if k == 0 || n == 0 || bins == 0 {
        return Err(Error::InvalidArgument(
            "binned error needs K >= 1, samples and bins".into(),
        ));
    }
    let n_cells = bins
        .checked_pow(k as u32)
        .filter(|&c| c <= 1 << 24)
        .ok_or_else(|| Error::InvalidArgument(format!("{bins}^{k} bins is too many")))?;
    let d = g.latent_dim();
    let z = Tensor::matrix(
        n,
        d,
        rng.substream(Stream::Alpha, 0).standard_normals(n * d),
    )?;
    let eps = (g.noise_dim() > 0)
        .then(|| {
            Tensor::matrix(
                n,
                g.noise_dim(),
                rng.substream(Stream::Noise, 0)
                    .standard_normals(n * g.noise_dim()),
            )
        })
        .transpose()?;
    let x = g.generate_batch(&z, eps.as_ref())?;
    let p = predict_in_chunks(f, &x)?;
    let m = f.num_classes();
    let mut counts = vec![0usize; n_cells * m];
    let mut pick = rng.substream(Stream::Trial, 0);
    for i in 0..n {
        let mut cell = 0;
        for &a in &z.row(i)[..k] {
            let b = (((a + 3.0) / 6.0 * bins as f64).floor().max(0.0) as usize).min(bins - 1);
            cell = cell * bins + b;
        }
        let u = pick.uniform();
        let mut acc = 0.0;
        let mut y = m - 1;
        for (c, &q) in p.row(i).iter().enumerate() {
            acc += q;
            if u < acc {
                y = c;
                break;
            }
        }
        counts[cell * m + y] += 1;
    }
    let correct: usize = counts
        .chunks(m)
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(1.0 - correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::ConstantClassifier;
    use crate::generative::VaeModel;
    use crate::prob::CategoricalDist;
    use proptest::prelude::*;

    fn prop2_optimum() -> LinearGaussianMap {
        let s = (0.95f64).sqrt();
        LinearGaussianMap::from_matrix(Tensor::matrix(2, 2, vec![s, 0.0, 0.0, s]).unwrap(), 1, 0.05)
            .unwrap()
    }

    #[test]
    fn single_step_sweep_equals_reconstruction() {
        let g = prop2_optimum();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let anchors = Tensor::matrix(2, 2, vec![0.3, -1.0, 1.2, 0.4]).unwrap();
        let s = latent_sweep(&g, &f, &anchors, 0, 3.0, 1).unwrap();
        assert_eq!(s.outputs, decode_mean(&g, &anchors).unwrap());
        let s7 = latent_sweep(&g, &f, &anchors, 1, 3.0, 7).unwrap();
        assert_eq!(s7.outputs.rows(), 14);
        assert_eq!(s7.probs.rows(), 14);
        assert_eq!(s7.cell(1, 3), s.cell(1, 0));
    }

    #[test]
    fn sweep_rejects_bad_factor() {
        let g = prop2_optimum();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let anchors = Tensor::zeros(&[1, 2]);
        assert!(latent_sweep(&g, &f, &anchors, 2, 3.0, 7).is_err());
    }

    #[test]
    fn sweeps_at_the_optimum_move_across_or_along_the_boundary() {
        let g = prop2_optimum();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let anchors = Tensor::zeros(&[1, 2]);
        let a = latent_sweep(&g, &f, &anchors, 0, 3.0, 7).unwrap();
        let pa: Vec<f64> = (0..7).map(|s| a.cell_probs(0, s)[1]).collect();
        assert!(pa.windows(2).all(|w| w[1] > w[0]), "{pa:?}");
        let b = latent_sweep(&g, &f, &anchors, 1, 3.0, 7).unwrap();
        let pb: Vec<f64> = (0..7).map(|s| b.cell_probs(0, s)[1]).collect();
        assert!(pb.iter().all(|p| (p - pb[0]).abs() < 0.01), "{pb:?}");
    }

    #[test]
    fn per_factor_flow_separates_alpha_from_beta() {
        let g = prop2_optimum();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let flows =
            per_factor_information_flow(&g, &f, SampleBudget::new(1000, 100), &SeededRng::new(3))
                .unwrap();
        assert!(flows[0] > 10.0 * flows[1], "{flows:?}");
        let c = ConstantClassifier::new(2, CategoricalDist::new(vec![0.3, 0.7]).unwrap());
        let flat =
            per_factor_information_flow(&g, &c, SampleBudget::new(200, 20), &SeededRng::new(3))
                .unwrap();
        assert!(flat.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn intervention_rejects_linear_gaussian() {
        let g = Explainer::LinearGaussian(prop2_optimum());
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let data = Dataset::new(Tensor::zeros(&[4, 2]), Some(vec![0, 1, 0, 1])).unwrap();
        assert!(matches!(
            intervention_accuracy_drop(&g, &f, &data, 0, &SeededRng::new(0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn intervening_on_unused_factor_changes_nothing() {
        let mut rng = SeededRng::new(5);
        let mut vae = VaeModel::new(4, 1, 1, &[8], &mut rng).unwrap();
        {
            let w = &mut vae.params_mut()[0];
            for j in 0..w.cols() {
                w.set2(1, j, 0.0);
            }
        }
        let x = Tensor::matrix(6, 4, (0..24).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        let data = Dataset::new(x, Some(vec![0, 1, 1, 0, 1, 0])).unwrap();
        let f =
            LinearSigmoidClassifier::new(vec![1.0, -1.0, 0.5, 0.0], Sigmoid::NormalCdf).unwrap();
        let r = intervention_accuracy_drop(&Explainer::Vae(vae), &f, &data, 1, &SeededRng::new(1))
            .unwrap();
        assert_eq!(r.intervened, r.reencoded);
    }

    #[test]
    fn certificate_endpoints_and_worked_example() {
        assert!(capacity_certificate(3f64.ln(), 3).unwrap().abs() < 1e-9);
        assert!((capacity_certificate(0.0, 3).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((capacity_certificate(1.03, 3).unwrap() - 0.05).abs() < 0.005);
        assert!(capacity_certificate(1.2, 3).is_err());
        assert!(capacity_certificate(-0.1, 3).is_err());
        assert_eq!(capacity_certificate(0.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn binned_error_respects_certificate() {
        let g = prop2_optimum();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let rng = SeededRng::new(8);
        let mi = estimate_influence(&g, &f, Variant::Joint, SampleBudget::new(2000, 200), &rng)
            .unwrap()
            .value;
        let bound = capacity_certificate(mi.min(2f64.ln()), 2).unwrap();
        let err = binned_map_error(&g, &f, 20000, 20, &rng).unwrap();
        assert!(err <= bound + 0.05, "err {err} bound {bound}");
    }

    #[test]
    fn landscape_grid_covers_half_turn() {
        let l = angle_landscape(
            LandscapeKind::single_default(),
            &[Variant::Joint],
            45.0,
            SampleBudget::new(50, 10),
            0.05,
            &SeededRng::new(0),
        )
        .unwrap();
        assert_eq!(l.angles, vec![0.0, 45.0, 90.0, 135.0]);
        assert_eq!(l.fidelity.len(), 16);
        assert_eq!(l.output_entropy.as_ref().unwrap().len(), 16);
        assert!(l.fidelity[2].abs() < 1e-9);
    }

    #[test]
    fn circular_distance_wraps() {
        assert_eq!(circular_distance(0.0, 165.0), 15.0);
        assert_eq!(circular_distance(90.0, 90.0), 0.0);
        assert_eq!(circular_distance(10.0, 100.0), 90.0);
    }

    proptest! {
        #[test]
        fn certificate_monotone(i in 0.0f64..1.0, j in 0.0f64..1.0, m in 2usize..12) {
            let (lo, hi) = (i.min(j), i.max(j));
            let ln_m = (m as f64).ln();
            let (a, b) = (lo * ln_m, hi * ln_m);
            prop_assert!(capacity_certificate(a, m).unwrap() >= capacity_certificate(b, m).unwrap() - 1e-12);
            prop_assert!(capacity_certificate(a, m + 1).unwrap() >= capacity_certificate(a, m).unwrap() - 1e-12);
            let v = capacity_certificate(a, m).unwrap();
            prop_assert!((0.0..=(m - 1) as f64 / m as f64 + 1e-12).contains(&v));
        }
    }
}

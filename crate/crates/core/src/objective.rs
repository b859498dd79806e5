//! The explainer objective `C + λ·D` and its maximisation with Adam.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Tensor};
use crate::classifiers::Classifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{GenerativeMap, LinearGaussianMap, VaeModel};
use crate::influence::{estimate_influence_with_grad, SampleBudget, Variant};
use crate::prob::{SeededRng, Stream};

/// A trained or trainable generative map.
#[derive(Clone, Debug, PartialEq)]
pub enum Explainer {
    LinearGaussian(LinearGaussianMap),
    Vae(VaeModel),
}

/// Which kind of explainer to build, with its structural settings.
#[derive(Clone, Debug, PartialEq)]
pub enum BackendKind {
    LinearGaussian { gamma: f64 },
    Vae { hidden: Vec<usize> },
}

impl BackendKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LinearGaussian { .. } => "lingauss",
            Self::Vae { .. } => "vae",
        }
    }
}

impl Explainer {
    /// Fresh explainer with random parameters.
    pub fn init(
        kind: &BackendKind,
        data_dim: usize,
        k: usize,
        l: usize,
        rng: &SeededRng,
    ) -> Result<Self> {
        let mut rng = rng.substream(Stream::Init, 0);
        Ok(match kind {
            BackendKind::LinearGaussian { gamma } => {
                Self::LinearGaussian(LinearGaussianMap::random(data_dim, k, l, *gamma, &mut rng)?)
            }
            BackendKind::Vae { hidden } => {
                Self::Vae(VaeModel::new(data_dim, k, l, hidden, &mut rng)?)
            }
        })
    }

    pub fn map(&self) -> &dyn GenerativeMap {
        match self {
            Self::LinearGaussian(m) => m,
            Self::Vae(m) => m,
        }
    }

    pub fn map_mut(&mut self) -> &mut dyn GenerativeMap {
        match self {
            Self::LinearGaussian(m) => m,
            Self::Vae(m) => m,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::LinearGaussian(_) => "lingauss",
            Self::Vae(_) => "vae",
        }
    }
}

/// Data against which the fidelity term `D` is measured.
#[derive(Clone, Copy, Debug)]
pub enum FidelityInput<'a> {
    /// Second-moment matrix of the data (linear-Gaussian backend).
    Covariance(&'a DMatrix<f64>),
    /// A minibatch of data rows.
    Batch(&'a Tensor),
}

/// Settings for explainer training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    pub n_alpha: usize,
    pub n_beta: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Record a trace row every this many steps (and at the last step).
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 1,
            l: 1,
            lambda: 1.0,
            n_alpha: 100,
            n_beta: 25,
            steps: 1000,
            batch_size: 64,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            variant: Variant::Joint,
            trace_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.n_alpha == 0 || self.n_beta == 0 || self.batch_size == 0 || self.trace_every == 0 {
            return Err(Error::InvalidArgument(
                "sample counts, batch size and trace interval must be positive".into(),
            ));
        }
        if self.k + self.l == 0 {
            return Err(Error::InvalidArgument("need K + L >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn budget(&self) -> SampleBudget {
        SampleBudget::new(self.n_alpha, self.n_beta)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One row of a training trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub causal: f64,
    pub fidelity: f64,
    pub total: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Mean of the causal term over the last `n` rows.
    pub fn tail_causal(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.causal).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean of the fidelity term over the last `n` rows.
    pub fn tail_fidelity(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.fidelity).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// The three traced quantities of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub causal: f64,
    pub fidelity: f64,
}

fn fidelity_with_grad(
    g: &Explainer,
    input: FidelityInput<'_>,
    rng: &SeededRng,
) -> Result<(f64, Vec<Tensor>)> {
    match (g, input) {
        (Explainer::LinearGaussian(m), FidelityInput::Covariance(cov)) => {
            let (d, grad) = m.fidelity(cov)?;
            Ok((d, vec![grad]))
        }
        (Explainer::LinearGaussian(m), FidelityInput::Batch(b)) => {
            let cov = Dataset::new(b.clone(), None)?.second_moment();
            let (d, grad) = m.fidelity(&cov)?;
            Ok((d, vec![grad]))
        }
        (Explainer::Vae(vae), FidelityInput::Batch(batch)) => {
            let tape = Tape::new();
            let bound = vae.bind(&tape, true);
            let mut r = rng.substream(Stream::Posterior, 0);
            let (elbo, _, _) = vae.elbo_on(&tape, &bound, batch, &mut r)?;
            tape.backward(elbo)?;
            let grads = bound
                .iter()
                .zip(vae.params())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            Ok((tape.value(elbo).item(), grads))
        }
        (Explainer::Vae(_), FidelityInput::Covariance(_)) => Err(Error::InvalidArgument(
            "the VAE fidelity term needs a data batch".into(),
        )),
    }
}

/// `C + λ·D` and the gradient of the total with respect to `g`'s parameters.
pub fn combined_objective_with_grad(
    g: &Explainer,
    f: &dyn Classifier,
    cfg: &TrainConfig,
    input: Option<FidelityInput<'_>>,
    rng: &SeededRng,
) -> Result<(ObjectiveValue, Vec<Tensor>)> {
    let input =
        input.ok_or_else(|| Error::InvalidArgument("the fidelity term needs data".into()))?;
    // With no causal factors only the fidelity term is optimised.
    let (c, mut grads) = if g.map().k() == 0 {
        (
            0.0,
            g.map()
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        )
    } else {
        let (c, grads) = estimate_influence_with_grad(g.map(), f, cfg.variant, cfg.budget(), rng)?;
        (c.value, grads)
    };
    let (d, dgrads) = fidelity_with_grad(g, input, rng)?;
    for (acc, dg) in grads.iter_mut().zip(&dgrads) {
        let mut scaled = dg.clone();
        scaled.scale_assign(cfg.lambda);
        acc.add_assign(&scaled)?;
    }
    let value = ObjectiveValue {
        total: c + cfg.lambda * d,
        causal: c,
        fidelity: d,
    };
    Ok((value, grads))
}

/// `C + λ·D` at the current parameters.
pub fn combined_objective(
    g: &Explainer,
    f: &dyn Classifier,
    cfg: &TrainConfig,
    input: Option<FidelityInput<'_>>,
    rng: &SeededRng,
) -> Result<ObjectiveValue> {
    Ok(combined_objective_with_grad(g, f, cfg, input, rng)?.0)
}

/// Objective terms measured after training: `C` with `budget` (zero when
/// `K = 0`) and `D` on the whole dataset (VAE: ELBO over at most
/// `max_rows` rows).
pub fn evaluate_explainer(
    g: &Explainer,
    f: &dyn Classifier,
    data: &Dataset,
    variant: Variant,
    budget: SampleBudget,
    lambda: f64,
    rng: &SeededRng,
) -> Result<ObjectiveValue> {
    const MAX_ROWS: usize = 1024;
    let causal = if g.map().k() == 0 {
        0.0
    } else {
        crate::influence::estimate_influence(g.map(), f, variant, budget, rng)?.value
    };
    let fidelity = match g {
        Explainer::LinearGaussian(m) => m.fidelity(&data.second_moment())?.0,
        Explainer::Vae(vae) => {
            let n = data.len().min(MAX_ROWS);
            let idx: Vec<usize> = (0..n).collect();
            vae.elbo(
                &data.x.select_rows(&idx),
                &mut rng.substream(Stream::Posterior, 1),
            )?
        }
    };
    Ok(ObjectiveValue {
        total: causal + lambda * fidelity,
        causal,
        fidelity,
    })
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| Tensor::zeros(s);
        Self {
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam step that *ascends* along `grads`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            what: "parameter tensors",
            expected: params.len(),
            got: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.expect_same_shape(g, "adam_step")?;
        p.expect_same_shape(m, "adam_step")?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *pi += cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Maximises `C + λ·D` for `init` with Adam. Fresh estimator samples and a
/// fresh minibatch are drawn every step.
pub fn train_explainer(
    init: Explainer,
    f: &dyn Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Explainer, TrainTrace)> {
    cfg.validate()?;
    let mut g = init;
    let map = g.map();
    if map.k() != cfg.k || map.l() != cfg.l {
        return Err(Error::InvalidArgument(format!(
            "explainer has K={}, L={} but the config asks for K={}, L={}",
            map.k(),
            map.l(),
            cfg.k,
            cfg.l
        )));
    }
    if data.dim() != map.data_dim() {
        return Err(Error::DimensionMismatch {
            what: "data dimension",
            expected: map.data_dim(),
            got: data.dim(),
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let covariance = match g {
        Explainer::LinearGaussian(_) => Some(data.second_moment()),
        Explainer::Vae(_) => None,
    };
    let root = SeededRng::new(cfg.seed);
    let mut batch_rng = root.substream(Stream::Batch, 0);
    let mut state = AdamState::for_params(&g.map().params());
    let adam = cfg.adam();
    let start = Instant::now();
    let mut trace = TrainTrace::default();

    for step in 0..cfg.steps {
        let step_rng = root.substream(Stream::Trial, step as u64);
        let batch;
        let input = match &covariance {
            Some(c) => FidelityInput::Covariance(c),
            None => {
                let idx: Vec<usize> = (0..cfg.batch_size.min(data.len()))
                    .map(|_| batch_rng.below(data.len()))
                    .collect();
                batch = data.x.select_rows(&idx);
                FidelityInput::Batch(&batch)
            }
        };
        let (value, grads) = combined_objective_with_grad(&g, f, cfg, Some(input), &step_rng)?;
        if !value.total.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                value: value.total,
            });
        }
        if step % cfg.trace_every == 0 || step + 1 == cfg.steps {
            trace.rows.push(TraceRow {
                step,
                causal: value.causal,
                fidelity: value.fidelity,
                total: value.total,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        adam_step(&mut g.map_mut().params_mut(), &grads, &mut state, &adam)?;
        if let Explainer::LinearGaussian(m) = &mut g {
            m.normalize_columns();
        }
    }
    Ok((g, trace))
}

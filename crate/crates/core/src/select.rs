//! Choosing the latent budget `K + L`, the causal factor count `K` and the
//! fidelity weight `λ` from training outcomes.
//!
//! 1. Train on the fidelity term alone and grow `L` until `D` stops improving.
//! 2. Starting from `K = 1`, move one factor from `β` to `α` at a time. For each
//!    split pick the smallest `λ` on the ladder `base·2^j` whose final `D` is
//!    close to the step-1 reference.
//! 3. Stop when `C` stops improving and keep the split before that.

use crate::classifiers::Classifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::influence::SampleBudget;
use crate::objective::{evaluate_explainer, train_explainer, BackendKind, Explainer, TrainConfig};
use crate::prob::SeededRng;

/// Largest latent budget tried in step 1.
pub const L_MAX: usize = 16;

/// `(new − old) / max(|old|, 1)`.
pub fn relative_gain(old: f64, new: f64) -> f64 {
    (new - old) / old.abs().max(1.0)
}

/// Step-1 outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBudget {
    pub l_total: usize,
    /// `(L, D)` for every budget trained.
    pub fidelity: Vec<(usize, f64)>,
    /// False when `L_MAX` was reached without a plateau.
    pub plateaued: bool,
}

impl LatentBudget {
    /// `D` at the chosen budget, the reference for later steps.
    pub fn reference_fidelity(&self) -> f64 {
        self.fidelity
            .iter()
            .find(|(l, _)| *l == self.l_total)
            .map(|p| p.1)
            .unwrap_or(f64::NAN)
    }
}

fn train_and_measure(
    kind: &BackendKind,
    f: &dyn Classifier,
    data: &Dataset,
    cfg: &TrainConfig,
    eval_budget: SampleBudget,
) -> Result<(f64, f64)> {
    let init = Explainer::init(kind, data.dim(), cfg.k, cfg.l, &SeededRng::new(cfg.seed))?;
    let (g, _) = train_explainer(init, f, data, cfg)?;
    let v = evaluate_explainer(
        &g,
        f,
        data,
        cfg.variant,
        eval_budget,
        cfg.lambda,
        &SeededRng::new(cfg.seed ^ 0x5eed),
    )?;
    Ok((v.causal, v.fidelity))
}

/// Step 1: fidelity-only training for `L = 1, 2, …`; returns the last `L`
/// before the relative gain in `D` drops below `plateau_eps`.
pub fn select_latent_budget(
    kind: &BackendKind,
    f: &dyn Classifier,
    data: &Dataset,
    base: &TrainConfig,
    plateau_eps: f64,
) -> Result<LatentBudget> {
    if !(plateau_eps > 0.0) {
        return Err(Error::InvalidArgument(
            "plateau threshold must be positive".into(),
        ));
    }
    let eval = SampleBudget::new(1, 1);
    let mut fidelity: Vec<(usize, f64)> = Vec::new();
    for l in 1..=L_MAX {
        let cfg = TrainConfig {
            k: 0,
            l,
            lambda: 1.0,
            ..base.clone()
        };
        let (_, d) = train_and_measure(kind, f, data, &cfg, eval)?;
        if let Some(&(_, prev)) = fidelity.last() {
            if relative_gain(prev, d) < plateau_eps {
                fidelity.push((l, d));
                return Ok(LatentBudget {
                    l_total: l - 1,
                    fidelity,
                    plateaued: true,
                });
            }
        }
        fidelity.push((l, d));
    }
    let best = fidelity
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |b, p| if p.1 > b.1 { p } else { b });
    Ok(LatentBudget {
        l_total: best.0,
        fidelity,
        plateaued: false,
    })
}

/// Skips the search of step 1 for a known budget, training only the
/// fidelity reference at `l_total`.
pub fn reference_budget(
    kind: &BackendKind,
    f: &dyn Classifier,
    data: &Dataset,
    base: &TrainConfig,
    l_total: usize,
) -> Result<LatentBudget> {
    if l_total == 0 || l_total > L_MAX {
        return Err(Error::InvalidArgument(format!(
            "latent budget must be in 1..={L_MAX}, got {l_total}"
        )));
    }
    let cfg = TrainConfig {
        k: 0,
        l: l_total,
        lambda: 1.0,
        ..base.clone()
    };
    let (_, d) = train_and_measure(kind, f, data, &cfg, SampleBudget::new(1, 1))?;
    Ok(LatentBudget {
        l_total,
        fidelity: vec![(l_total, d)],
        plateaued: true,
    })
}

/// Settings for steps 2–3.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectOptions {
    /// Relative gain in `C` below which `C` has plateaued.
    pub plateau_eps_c: f64,
    /// `D` is close enough when `D ≥ D_ref − slack·max(|D_ref|, 1)`.
    pub fidelity_slack: f64,
    pub lambda_base: f64,
    /// Ladder exponents run over `0..=max_ladder`.
    pub max_ladder: u32,
    /// `C` below this (nats) at `K = 1` means no causal signal at all.
    pub no_signal: f64,
    /// Budget used to measure `C` after each training run.
    pub eval_budget: SampleBudget,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            plateau_eps_c: 0.05,
            fidelity_slack: 0.05,
            lambda_base: 0.01,
            max_ladder: 10,
            no_signal: 0.01,
            eval_budget: SampleBudget::new(1000, 50),
        }
    }
}

impl SelectOptions {
    pub fn fidelity_ok(&self, d: f64, d_ref: f64) -> bool {
        d >= d_ref - self.fidelity_slack * d_ref.abs().max(1.0)
    }
}

/// One training run of steps 2–3.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionRow {
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    pub ladder_step: u32,
    pub causal: f64,
    pub fidelity: f64,
    pub fidelity_ok: bool,
    /// This run's `λ` was kept for its `K`.
    pub chosen: bool,
    /// No ladder step met the fidelity target for this `K`.
    pub flagged: bool,
}

/// Every run of steps 2–3 plus the thresholds that judged them.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTrace {
    pub l_total: usize,
    pub reference_fidelity: f64,
    pub options: SelectOptions,
    pub rows: Vec<SelectionRow>,
}

/// Outcome of steps 2–3.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub k: usize,
    pub l: usize,
    pub lambda: f64,
    /// `C` was already negligible at `K = 1`.
    pub no_signal: bool,
    /// `C` kept improving up to `K = L_total`.
    pub exhausted: bool,
}

/// Applies the plateau rule to the chosen rows of a trace. Returns `None`
/// while the rule has not fired and more `K` remain.
pub fn decide(trace: &SelectionTrace) -> Option<Selection> {
    let chosen: Vec<&SelectionRow> = trace.rows.iter().filter(|r| r.chosen).collect();
    let first = chosen.first()?;
    let pick = |r: &SelectionRow, no_signal, exhausted| Selection {
        k: r.k,
        l: r.l,
        lambda: r.lambda,
        no_signal,
        exhausted,
    };
    if first.causal < trace.options.no_signal {
        return Some(pick(first, true, false));
    }
    for w in chosen.windows(2) {
        if relative_gain(w[0].causal, w[1].causal) < trace.options.plateau_eps_c {
            return Some(pick(w[0], false, false));
        }
    }
    let last = chosen.last()?;
    (last.k >= trace.l_total).then(|| pick(last, false, true))
}

/// Steps 2–3 given the step-1 budget and reference fidelity.
pub fn select_params(
    kind: &BackendKind,
    f: &dyn Classifier,
    data: &Dataset,
    base: &TrainConfig,
    budget: &LatentBudget,
    opts: &SelectOptions,
) -> Result<(Selection, SelectionTrace)> {
    if budget.l_total == 0 {
        return Err(Error::InvalidArgument(
            "latent budget must be at least 1".into(),
        ));
    }
    let d_ref = budget.reference_fidelity();
    if !d_ref.is_finite() {
        return Err(Error::InvalidArgument(
            "latent budget has no reference fidelity".into(),
        ));
    }
    let mut trace = SelectionTrace {
        l_total: budget.l_total,
        reference_fidelity: d_ref,
        options: opts.clone(),
        rows: Vec::new(),
    };
    for k in 1..=budget.l_total {
        let l = budget.l_total - k;
        let mut rows = Vec::new();
        for j in 0..=opts.max_ladder {
            let lambda = opts.lambda_base * 2f64.powi(j as i32);
            let cfg = TrainConfig {
                k,
                l,
                lambda,
                ..base.clone()
            };
            let (c, d) = train_and_measure(kind, f, data, &cfg, opts.eval_budget)?;
            let ok = opts.fidelity_ok(d, d_ref);
            rows.push(SelectionRow {
                k,
                l,
                lambda,
                ladder_step: j,
                causal: c,
                fidelity: d,
                fidelity_ok: ok,
                chosen: false,
                flagged: false,
            });
            if ok {
                break;
            }
        }
        let pick = match rows.iter().position(|r| r.fidelity_ok) {
            Some(i) => i,
            None => {
                rows.iter_mut().for_each(|r| r.flagged = true);
                (0..rows.len())
                    .max_by(|&a, &b| rows[a].fidelity.total_cmp(&rows[b].fidelity))
                    .unwrap()
            }
        };
        rows[pick].chosen = true;
        trace.rows.extend(rows);
        debug_assert!(trace.rows.iter().all(|r| r.k + r.l == budget.l_total));
        if let Some(sel) = decide(&trace) {
            return Ok((sel, trace));
        }
    }
    unreachable!("the rule always fires once K reaches the latent budget")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{ConstantClassifier, LinearSigmoidClassifier, Sigmoid};
    use crate::data::{synth_dataset, SynthKind};
    use crate::prob::CategoricalDist;

    fn lingauss() -> BackendKind {
        BackendKind::LinearGaussian { gamma: 0.05 }
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            steps: 400,
            learning_rate: 0.03,
            n_alpha: 32,
            n_beta: 8,
            seed: 2,
            ..Default::default()
        }
    }

    #[test]
    fn isotropic_data_needs_one_factor_per_dimension() {
        let data = synth_dataset(
            &SynthKind::IsotropicGaussian { dim: 3 },
            4000,
            &SeededRng::new(1),
        )
        .unwrap();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let b = select_latent_budget(&lingauss(), &f, &data, &fast_cfg(), 0.02).unwrap();
        assert_eq!(b.l_total, 3, "{:?}", b.fidelity);
        assert!(b.plateaued);
    }

    #[test]
    fn rank_two_data_needs_two_factors() {
        let data = synth_dataset(
            &SynthKind::LowRankGaussian { dim: 4, rank: 2 },
            4000,
            &SeededRng::new(1),
        )
        .unwrap();
        let f = LinearSigmoidClassifier::new(vec![1.0, 0.0, 0.0, 0.0], Sigmoid::NormalCdf).unwrap();
        let b = select_latent_budget(&lingauss(), &f, &data, &fast_cfg(), 0.02).unwrap();
        assert_eq!(b.l_total, 2, "{:?}", b.fidelity);
    }

    #[test]
    fn constant_classifier_stops_at_first_step() {
        let data = synth_dataset(
            &SynthKind::IsotropicGaussian { dim: 2 },
            2000,
            &SeededRng::new(1),
        )
        .unwrap();
        let f = ConstantClassifier::new(2, CategoricalDist::uniform(2));
        let budget = LatentBudget {
            l_total: 2,
            fidelity: vec![(1, -0.3), (2, 0.0)],
            plateaued: true,
        };
        let opts = SelectOptions {
            eval_budget: SampleBudget::new(400, 20),
            ..Default::default()
        };
        let (sel, trace) =
            select_params(&lingauss(), &f, &data, &fast_cfg(), &budget, &opts).unwrap();
        assert_eq!(sel.k, 1);
        assert!(sel.no_signal);
        assert_eq!(trace.rows.iter().filter(|r| r.chosen).count(), 1);
    }

    fn row(k: usize, c: f64) -> SelectionRow {
        SelectionRow {
            k,
            l: 4 - k,
            lambda: 0.01,
            ladder_step: 0,
            causal: c,
            fidelity: 0.0,
            fidelity_ok: true,
            chosen: true,
            flagged: false,
        }
    }

    fn trace_of(rows: Vec<SelectionRow>) -> SelectionTrace {
        SelectionTrace {
            l_total: 4,
            reference_fidelity: 0.0,
            options: SelectOptions::default(),
            rows,
        }
    }

    #[test]
    fn plateau_rule_keeps_configuration_before_plateau() {
        let t = trace_of(vec![row(1, 0.5), row(2, 0.9), row(3, 0.92)]);
        let s = decide(&t).unwrap();
        assert_eq!((s.k, s.l), (2, 2));
        assert!(decide(&trace_of(vec![row(1, 0.5), row(2, 0.9)])).is_none());
    }

    #[test]
    fn replay_of_stored_trace_is_stable() {
        let t = trace_of(vec![row(1, 0.6), row(2, 0.61)]);
        let a = decide(&t).unwrap();
        let b = decide(&t.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k, 1);
    }

    #[test]
    fn fidelity_window_uses_floor_of_one() {
        let o = SelectOptions::default();
        assert!(o.fidelity_ok(-0.04, 0.0));
        assert!(!o.fidelity_ok(-0.06, 0.0));
        assert!(o.fidelity_ok(-104.0, -100.0));
        assert!(!o.fidelity_ok(-106.0, -100.0));
    }
}

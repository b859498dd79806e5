use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gcex::analysis::{
    angle_landscape, capacity_certificate, circular_distance, decode_mean,
    intervention_accuracy_drop, latent_sweep, per_factor_information_flow, LandscapeKind,
    SweepGrid,
};
use gcex::classifiers::{train_mlp_classifier, ClassifierTrainConfig};
use gcex::influence::{decomposition_terms, map_prediction_error};
use gcex::io::checkpoint::Checkpoint;
use gcex::io::config::Config;
use gcex::io::export::{csv_string, landscape_csv, pgm_bytes, sweep_csv, sweep_image};
use gcex::objective::evaluate_explainer;
use gcex::select::{reference_budget, select_latent_budget, select_params, SelectOptions};
use gcex::{
    estimate_influence, Classifier, Explainer, GenerativeMap, SampleBudget, SeededRng, Stream,
    Tensor, TrainConfig, Variant,
};
use serde_json::{json, Value};

use crate::params::{keys, Params};
use crate::setup::{backend_kind, load_classifier, load_data, load_explainer};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const SUMMARY: &str = "summary.json";

pub fn finish(out: &Path, resolved: &Config, summary: &Value) -> Result<()> {
    resolved.save(&out.join(RESOLVED_CONFIG))?;
    fs::write(
        out.join(SUMMARY),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

fn train_config(p: &mut Params, k: usize, l: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        k,
        l,
        lambda: p.get("lambda", d.lambda)?,
        n_alpha: p.get("n_alpha", d.n_alpha)?,
        n_beta: p.get("n_beta", d.n_beta)?,
        steps: p.get("steps", d.steps)?,
        batch_size: p.get("batch_size", d.batch_size)?,
        learning_rate: p.get("learning_rate", d.learning_rate)?,
        adam_beta1: p.get("adam_beta1", d.adam_beta1)?,
        adam_beta2: p.get("adam_beta2", d.adam_beta2)?,
        adam_eps: p.get("adam_eps", d.adam_eps)?,
        seed: p.get("seed", d.seed)?,
        variant: Variant::parse(&p.get("variant", d.variant.name().to_string())?)?,
        trace_every: p.get("trace_every", d.trace_every)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn eval_budget(p: &mut Params) -> Result<SampleBudget> {
    Ok(SampleBudget::new(
        p.get("eval_n_alpha", 1000usize)?,
        p.get("eval_n_beta", 100usize)?,
    ))
}

pub fn train_classifier(p: &mut Params, out: &Path) -> Result<()> {
    let data = load_data(p)?;
    let d = ClassifierTrainConfig::default();
    let cfg = ClassifierTrainConfig {
        hidden: p.list("hidden", &d.hidden)?,
        epochs: p.get("epochs", d.epochs)?,
        batch_size: p.get("batch_size", d.batch_size)?,
        learning_rate: p.get("learning_rate", d.learning_rate)?,
        momentum: p.get("momentum", d.momentum)?,
        seed: p.get("seed", d.seed)?,
    };
    let valid = (!data.validation.is_empty()).then_some(&data.validation);
    let f = train_mlp_classifier(&data.train, valid, &cfg)?;
    Checkpoint::from(&f)
        .with_meta("seed", cfg.seed)
        .with_meta("epochs", cfg.epochs)
        .save(&out.join("classifier.ckpt"))?;
    let summary = json!({
        "command": "train-classifier",
        "n_train": data.train.len(),
        "n_validation": data.validation.len(),
        "classes": f.num_classes(),
        "train_accuracy": f.train_accuracy,
        "validation_accuracy": f.validation_accuracy,
    });
    finish(out, &p.resolved, &summary)
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Orientation of the linear-Gaussian columns relative to a classifier normal.
fn alignment(g: &Explainer, normal: Option<&[f64]>) -> Value {
    let Explainer::LinearGaussian(m) = g else {
        return Value::Null;
    };
    let k = m.k();
    let cols: Vec<Vec<f64>> = (0..m.latent_dim()).map(|j| m.column(j)).collect();
    let mut max_cos: f64 = 0.0;
    for a in &cols[..k] {
        for b in &cols[k..] {
            max_cos = max_cos.max(angle_deg(a, b).to_radians().cos().abs());
        }
    }
    let angles: Option<Vec<f64>> = normal.map(|n| {
        cols[..k]
            .iter()
            .map(|c| circular_distance(angle_deg(c, n), 0.0))
            .collect()
    });
    json!({
        "alpha_angles_to_normal_deg": angles,
        "max_abs_cos_alpha_beta": if k > 0 && k < cols.len() { Some(max_cos) } else { None },
    })
}

pub fn train_explainer(p: &mut Params, out: &Path) -> Result<()> {
    let data = load_data(p)?;
    let f = load_classifier(p, data.train.dim())?;
    let kind = backend_kind(p)?;
    let (k, l) = (p.require("k")?, p.require("l")?);
    let cfg = train_config(p, k, l)?;
    let budget = eval_budget(p)?;
    let normal: Option<Vec<f64>> = if p.has("normal") {
        Some(p.list("normal", &[])?)
    } else {
        None
    };
    let init = Explainer::init(&kind, data.train.dim(), k, l, &SeededRng::new(cfg.seed))?;
    let (g, trace) = gcex::objective::train_explainer(init, f.as_ref(), &data.train, &cfg)?;
    let ev = evaluate_explainer(
        &g,
        f.as_ref(),
        &data.train,
        cfg.variant,
        budget,
        cfg.lambda,
        &SeededRng::new(cfg.seed).substream(Stream::Trial, u64::MAX),
    )?;
    let last = trace.last().context("training produced no trace")?;
    let rows: Vec<Vec<String>> = trace
        .rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.causal.to_string(),
                r.fidelity.to_string(),
                r.total.to_string(),
                r.seconds.to_string(),
            ]
        })
        .collect();
    fs::write(
        out.join("trace.csv"),
        csv_string(&["step", "causal", "fidelity", "total", "seconds"], &rows)?,
    )?;
    Checkpoint::from(&g)
        .with_meta("steps", cfg.steps)
        .with_meta("seed", cfg.seed)
        .with_meta("lambda", cfg.lambda)
        .with_meta("final_causal", last.causal)
        .with_meta("final_fidelity", last.fidelity)
        .save(&out.join("explainer.ckpt"))?;
    let summary = json!({
        "command": "train-explainer",
        "backend": kind.name(),
        "k": k,
        "l": l,
        "lambda": cfg.lambda,
        "steps": cfg.steps,
        "final_causal": last.causal,
        "final_fidelity": last.fidelity,
        "final_total": last.total,
        "eval_causal": ev.causal,
        "eval_fidelity": ev.fidelity,
        "alignment": alignment(&g, normal.as_deref()),
    });
    finish(out, &p.resolved, &summary)
}

pub fn select(p: &mut Params, out: &Path) -> Result<()> {
    let data = load_data(p)?;
    let f = load_classifier(p, data.train.dim())?;
    let kind = backend_kind(p)?;
    let base = train_config(p, 1, 1)?;
    let d = SelectOptions::default();
    let opts = SelectOptions {
        plateau_eps_c: p.get("plateau_eps_c", d.plateau_eps_c)?,
        fidelity_slack: p.get("fidelity_slack", d.fidelity_slack)?,
        lambda_base: p.get("lambda_base", d.lambda_base)?,
        max_ladder: p.get("max_ladder", d.max_ladder)?,
        no_signal: p.get("no_signal", d.no_signal)?,
        eval_budget: SampleBudget::new(
            p.get("eval_n_alpha", 1000usize)?,
            p.get("eval_n_beta", 50usize)?,
        ),
    };
    let budget = match p.opt::<usize>("l_total")? {
        Some(l) => reference_budget(&kind, f.as_ref(), &data.train, &base, l)?,
        None => {
            let eps = p.get("plateau_eps_d", 0.02)?;
            select_latent_budget(&kind, f.as_ref(), &data.train, &base, eps)?
        }
    };
    let rows: Vec<Vec<String>> = budget
        .fidelity
        .iter()
        .map(|(l, d)| vec![l.to_string(), d.to_string()])
        .collect();
    fs::write(
        out.join("latent_budget.csv"),
        csv_string(&["l", "fidelity"], &rows)?,
    )?;
    let (sel, trace) = select_params(&kind, f.as_ref(), &data.train, &base, &budget, &opts)?;
    let rows: Vec<Vec<String>> = trace
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.l.to_string(),
                r.lambda.to_string(),
                r.ladder_step.to_string(),
                r.causal.to_string(),
                r.fidelity.to_string(),
                r.fidelity_ok.to_string(),
                r.chosen.to_string(),
                r.flagged.to_string(),
            ]
        })
        .collect();
    let header = [
        "k",
        "l",
        "lambda",
        "ladder_step",
        "causal",
        "fidelity",
        "fidelity_ok",
        "chosen",
        "flagged",
    ];
    fs::write(out.join("selection.csv"), csv_string(&header, &rows)?)?;
    let summary = json!({
        "command": "select-params",
        "l_total": budget.l_total,
        "latent_budget_plateaued": budget.plateaued,
        "reference_fidelity": trace.reference_fidelity,
        "k": sel.k,
        "l": sel.l,
        "lambda": sel.lambda,
        "no_signal": sel.no_signal,
        "exhausted": sel.exhausted,
        "runs": trace.rows.len(),
    });
    finish(out, &p.resolved, &summary)
}

fn factor_list(p: &mut Params, d: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..d).collect();
    let v = p.list("factors", &all)?;
    if let Some(bad) = v.iter().find(|&&i| i >= d) {
        bail!("factor {bad} out of range for {d} latent dimensions");
    }
    Ok(v)
}

fn write_grid(
    out: &Path,
    stem: &str,
    grid: &SweepGrid,
    image: Option<(usize, usize)>,
) -> Result<()> {
    let mut csv = sweep_csv(grid)?;
    if image.is_none() {
        let d = grid.outputs.cols();
        let (head, body) = csv.split_once('\n').unwrap_or((&csv, ""));
        let mut s = head.to_string() + &(0..d).map(|i| format!(",x{i}")).collect::<String>() + "\n";
        for (line, row) in body.lines().zip(grid.outputs.data().chunks(d)) {
            s += line;
            for v in row {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        csv = s;
    }
    fs::write(out.join(format!("{stem}.csv")), csv)?;
    if let Some((r, c)) = image {
        let (w, h, px) = sweep_image(grid, r, c)?;
        fs::write(out.join(format!("{stem}.pgm")), pgm_bytes(w, h, &px)?)?;
    }
    Ok(())
}

pub fn sweep(p: &mut Params, out: &Path) -> Result<()> {
    let data = load_data(p)?;
    let g = load_explainer(p, Some(data.train.dim()))?;
    let f = load_classifier(p, data.train.dim())?;
    let map = g.map();
    let d = map.latent_dim();
    let factors = factor_list(p, d)?;
    let range = p.get("range", 3.0)?;
    let steps = p.get("sweep_steps", 7usize)?;
    let n = p.get("n_anchors", 4usize)?;
    let seed = p.get("seed", 0u64)?;
    let anchors = match p.get("anchors", "zero".to_string())?.as_str() {
        "zero" => Tensor::zeros(&[n, d]),
        "prior" => Tensor::matrix(
            n,
            d,
            SeededRng::new(seed)
                .substream(Stream::Alpha, 0)
                .standard_normals(n * d),
        )?,
        "encode" => {
            let Explainer::Vae(v) = &g else {
                bail!("anchors = encode needs a VAE explainer");
            };
            let src = if data.validation.is_empty() {
                &data.train
            } else {
                &data.validation
            };
            let idx: Vec<usize> = (0..n.min(src.len())).collect();
            v.encode(
                &src.x.select_rows(&idx),
                &mut SeededRng::new(seed).substream(Stream::Posterior, 0),
            )?
            .mean
        }
        other => bail!("unknown anchors `{other}` (expected zero, prior or encode)"),
    };
    let recon = latent_sweep(map, f.as_ref(), &anchors, 0, 0.0, 1)?;
    debug_assert_eq!(recon.outputs, decode_mean(map, &anchors)?);
    write_grid(out, "reconstruction", &recon, data.image)?;
    let mut center = Vec::new();
    for &i in &factors {
        let grid = latent_sweep(map, f.as_ref(), &anchors, i, range, steps)?;
        write_grid(out, &format!("sweep_factor{i}"), &grid, data.image)?;
        let spread: f64 = (0..grid.n_anchors())
            .map(|a| {
                let ps: Vec<f64> = (0..grid.steps())
                    .map(|s| grid.cell_probs(a, s)[0])
                    .collect();
                ps.iter().cloned().fold(f64::MIN, f64::max)
                    - ps.iter().cloned().fold(f64::MAX, f64::min)
            })
            .fold(0.0, f64::max);
        center.push(json!({"factor": i, "max_prob_range": spread}));
    }
    let summary = json!({
        "command": "sweep",
        "factors": factors,
        "steps": steps,
        "range": range,
        "anchors": anchors.rows(),
        "per_factor": center,
    });
    finish(out, &p.resolved, &summary)
}

pub fn influence(p: &mut Params, out: &Path) -> Result<()> {
    let g = load_explainer(p, None)?;
    let f = load_classifier(p, g.map().data_dim())?;
    let budget = SampleBudget::new(p.get("n_alpha", 1000usize)?, p.get("n_beta", 100usize)?);
    let seed = p.get("seed", 0u64)?;
    let rng = SeededRng::new(seed);
    let names = p.list("variants", &["joint".to_string()])?;
    let map = g.map();
    let mut rows = Vec::new();
    let mut values = serde_json::Map::new();
    if map.k() > 0 {
        for n in &names {
            let v = Variant::parse(n)?;
            let e = estimate_influence(map, f.as_ref(), v, budget, &rng)?;
            rows.push(vec![v.name().to_string(), e.value.to_string()]);
            values.insert(v.name().into(), json!(e.value));
        }
    }
    fs::write(
        out.join("influence.csv"),
        csv_string(&["variant", "value"], &rows)?,
    )?;
    let flows = per_factor_information_flow(map, f.as_ref(), budget, &rng)?;
    let rows: Vec<Vec<String>> = flows
        .iter()
        .enumerate()
        .map(|(i, v)| {
            vec![
                i.to_string(),
                if i < map.k() { "alpha" } else { "beta" }.to_string(),
                v.to_string(),
            ]
        })
        .collect();
    fs::write(
        out.join("per_factor.csv"),
        csv_string(&["factor", "role", "flow"], &rows)?,
    )?;
    let mut extra = json!({});
    if map.k() > 0 {
        let (hy, hy_given) = decomposition_terms(map, f.as_ref(), budget, &rng)?;
        let m = f.num_classes();
        let c = hy - hy_given;
        let bound = capacity_certificate(c.clamp(0.0, (m as f64).ln()), m)?;
        extra = json!({
            "output_entropy": hy,
            "conditional_entropy": hy_given,
            "map_error": map_prediction_error(map, f.as_ref(), budget, &rng)?,
            "certificate_bound": bound,
        });
    }
    let summary = json!({
        "command": "influence",
        "k": map.k(),
        "l": map.l(),
        "n_alpha": budget.n_alpha,
        "n_beta": budget.n_beta,
        "variants": values,
        "per_factor": flows,
        "decomposition": extra,
    });
    finish(out, &p.resolved, &summary)
}

pub fn intervene(p: &mut Params, out: &Path) -> Result<()> {
    let data = load_data(p)?;
    let g = load_explainer(p, Some(data.train.dim()))?;
    let f = load_classifier(p, data.train.dim())?;
    let factors = factor_list(p, g.map().latent_dim())?;
    let seed = p.get("seed", 0u64)?;
    let eval = if data.validation.is_empty() {
        &data.train
    } else {
        &data.validation
    };
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &i in &factors {
        let r = intervention_accuracy_drop(&g, f.as_ref(), eval, i, &SeededRng::new(seed))?;
        rows.push(vec![
            i.to_string(),
            if i < g.map().k() { "alpha" } else { "beta" }.to_string(),
            r.original.to_string(),
            r.reencoded.to_string(),
            r.intervened.to_string(),
        ]);
        results.push(json!({
            "factor": i,
            "original": r.original,
            "reencoded": r.reencoded,
            "intervened": r.intervened,
        }));
    }
    let header = ["factor", "role", "original", "reencoded", "intervened"];
    fs::write(out.join("intervention.csv"), csv_string(&header, &rows)?)?;
    let summary = json!({
        "command": "intervene",
        "n_samples": eval.len(),
        "results": results,
    });
    finish(out, &p.resolved, &summary)
}

pub fn landscape(p: &mut Params, out: &Path) -> Result<()> {
    let kind = match p.get("landscape", "single".to_string())?.as_str() {
        "single" => LandscapeKind::SingleHyperplane {
            steepness: p.get("steepness", 5.0)?,
        },
        "and" => LandscapeKind::And {
            steepness: p.get("steepness", 100.0)?,
        },
        other => bail!("unknown landscape `{other}` (expected single or and)"),
    };
    let names = p.list(
        "variants",
        &Variant::ALL
            .iter()
            .map(|v| v.name().to_string())
            .collect::<Vec<_>>(),
    )?;
    let variants = names
        .iter()
        .map(|n| Variant::parse(n))
        .collect::<gcex::Result<Vec<_>>>()?;
    let res = p.get("grid_res", 15.0)?;
    let budget = SampleBudget::new(p.get("n_alpha", 2500usize)?, p.get("n_beta", 500usize)?);
    let gamma = p.get("gamma", gcex::generative::LinearGaussianMap::DEFAULT_GAMMA)?;
    let lambdas = p.list("lambdas", &[0.01, 1.0])?;
    let seed = p.get("seed", 0u64)?;
    let l = angle_landscape(kind, &variants, res, budget, gamma, &SeededRng::new(seed))?;
    fs::write(out.join("landscape.csv"), landscape_csv(&l)?)?;
    let mut best = Vec::new();
    for &v in &variants {
        let (a1, a2) = l.argmax(l.causal_of(v).unwrap_or_default());
        best.push(json!({"variant": v.name(), "lambda": 0.0, "theta1": a1, "theta2": a2}));
        for &lam in &lambdas {
            let (a1, a2) = l.argmax(&l.total(v, lam).unwrap_or_default());
            best.push(json!({"variant": v.name(), "lambda": lam, "theta1": a1, "theta2": a2, "separation": circular_distance(a1, a2)}));
        }
    }
    let summary = json!({
        "command": "landscape",
        "kind": kind.name(),
        "angles": l.angles,
        "argmax": best,
        "fidelity_argmax": l.argmax(&l.fidelity),
        "output_entropy_range": l.output_entropy.as_ref().map(|h| [
            h.iter().cloned().fold(f64::MAX, f64::min),
            h.iter().cloned().fold(f64::MIN, f64::max),
        ]),
    });
    finish(out, &p.resolved, &summary)
}

pub fn certificate(mi_nats: f64, classes: usize, out: Option<&Path>) -> Result<f64> {
    let bound = capacity_certificate(mi_nats, classes)?;
    if let Some(out) = out {
        let mut resolved = Config::new();
        resolved.set("mi_nats", mi_nats);
        resolved.set("classes", classes);
        finish(
            out,
            &resolved,
            &json!({"command": "certificate", "mi_nats": mi_nats, "classes": classes, "bound": bound}),
        )?;
    }
    Ok(bound)
}

pub fn allowed(cmd: &str) -> Vec<&'static str> {
    use keys::*;
    let mut v = match cmd {
        "train-classifier" => join(&[
            DATA,
            &[
                "hidden",
                "epochs",
                "batch_size",
                "learning_rate",
                "momentum",
            ],
        ]),
        "train-explainer" => join(&[DATA, CLASSIFIER, EXPLAINER, TRAIN]),
        "select-params" => join(&[
            DATA,
            CLASSIFIER,
            &EXPLAINER[..3],
            TRAIN,
            &[
                "l_total",
                "plateau_eps_d",
                "plateau_eps_c",
                "fidelity_slack",
                "lambda_base",
                "max_ladder",
                "no_signal",
            ],
        ]),
        "sweep" => join(&[
            DATA,
            CLASSIFIER,
            &[
                "explainer_checkpoint",
                "factors",
                "range",
                "sweep_steps",
                "anchors",
                "n_anchors",
            ],
        ]),
        "influence" => join(&[
            CLASSIFIER,
            &[
                "explainer_checkpoint",
                "n_alpha",
                "n_beta",
                "variants",
                "seed",
            ],
        ]),
        "intervene" => join(&[DATA, CLASSIFIER, &["explainer_checkpoint", "factors"]]),
        "landscape" => vec![
            "landscape",
            "variants",
            "grid_res",
            "n_alpha",
            "n_beta",
            "gamma",
            "steepness",
            "lambdas",
            "seed",
        ],
        _ => Vec::new(),
    };
    v.push("out");
    v
}

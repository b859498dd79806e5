//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Timed criteria hold a global lock so wall-clock budgets are not shared
//! with concurrently running tests.

use std::f64::consts::LN_2;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use gcex::analysis::{
    angle_landscape, capacity_certificate, circular_distance, intervention_accuracy_drop,
    per_factor_information_flow, LandscapeKind,
};
use gcex::autodiff::gradcheck::{check, relative_error};
use gcex::classifiers::{train_mlp_classifier, ClassifierTrainConfig};
use gcex::data::synth_dataset;
use gcex::influence::{decomposition_terms, estimate_influence_with_grad, linear_cdf_influence};
use gcex::io::idx::load_idx;
use gcex::nn::Mlp;
use gcex::objective::{evaluate_explainer, train_explainer};
use gcex::scm::{exact_conditional_mi, exact_mi, DiscreteSCM};
use gcex::select::{reference_budget, select_latent_budget, select_params, SelectOptions};
use gcex::{
    estimate_influence, BackendKind, Dataset, Explainer, LinearGaussianMap,
    LinearSigmoidClassifier, MlpClassifier, SampleBudget, SeededRng, Sigmoid, SynthKind, Tape,
    Tensor, TrainConfig, Var, Variant,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// Written to the process stdout directly so the line survives libtest's capture.
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn mnist_38() -> (Dataset, Dataset) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    load_idx(
        &root.join("mnist5k-images-idx3-ubyte"),
        &root.join("mnist5k-labels-idx1-ubyte"),
        &[3, 8],
    )
    .expect("MNIST subset under data/")
    .split()
}

fn vae_kind() -> BackendKind {
    BackendKind::Vae {
        hidden: vec![256, 128],
    }
}

fn vae_base(steps: usize) -> TrainConfig {
    TrainConfig {
        n_alpha: 100,
        n_beta: 25,
        steps,
        batch_size: 64,
        learning_rate: 5e-4,
        seed: 0,
        trace_every: 1000,
        ..Default::default()
    }
}

#[test]
fn criterion_01_scm_flow_matches_mutual_information() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = SeededRng::new(101);
    let (mut worst_mi, mut worst_cmi) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let k = 1 + i % 2;
        let l = 1 + (i / 2) % 2;
        let scm = DiscreteSCM::random(&vec![3; k], &vec![2; l], 4, 2, &mut rng).unwrap();
        let mi = exact_mi(&scm.alpha_y_table()).unwrap();
        let cmi = exact_conditional_mi(&scm.alpha_y_beta_table()).unwrap();
        worst_mi = worst_mi.max((scm.exact_information_flow(false) - mi).abs());
        worst_cmi = worst_cmi.max((scm.exact_information_flow(true) - cmi).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        1,
        worst_mi < 1e-9 && worst_cmi < 1e-9 && secs < 30.0,
        &format!("max |flow - MI| = {worst_mi:.2e}, max |flow(do beta) - CMI| = {worst_cmi:.2e}, {secs:.2}s"),
    );
}

#[test]
fn criterion_02_variant_identities_hold() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let scm = DiscreteSCM::random(&[3, 2], &[3], 4, 3, &mut rng).unwrap();
        worst = worst.max(scm.variant_identities().max_abs());
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        2,
        worst < 1e-9 && secs < 60.0,
        &format!("max residual = {worst:.2e}, {secs:.2}s"),
    );
}

#[test]
fn criterion_03_linear_gaussian_alignment() {
    let _g = serial();
    let t = Instant::now();
    let data = synth_dataset(
        &SynthKind::IsotropicGaussian { dim: 2 },
        5000,
        &SeededRng::new(0),
    )
    .unwrap();
    let f = LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::NormalCdf).unwrap();
    let mut worst_angle = 0.0f64;
    let mut worst_cos = 0.0f64;
    let mut ok = 0;
    for seed in 0..10u64 {
        let cfg = TrainConfig {
            k: 1,
            l: 1,
            lambda: 1.0,
            steps: 3000,
            learning_rate: 0.01,
            seed,
            trace_every: 3000,
            ..Default::default()
        };
        let init = Explainer::init(
            &BackendKind::LinearGaussian { gamma: 0.05 },
            2,
            1,
            1,
            &SeededRng::new(seed),
        )
        .unwrap();
        let (g, _) = train_explainer(init, &f, &data, &cfg).unwrap();
        let Explainer::LinearGaussian(m) = g else {
            unreachable!()
        };
        let (wa, wb) = (m.column(0), m.column(1));
        let angle = circular_distance(angle_deg(&wa, &[1.0, 0.0]), 0.0);
        let cos = angle_deg(&wa, &wb).to_radians().cos().abs();
        worst_angle = worst_angle.max(angle);
        worst_cos = worst_cos.max(cos);
        ok += usize::from(angle < 5.0 && cos < 0.05);
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        3,
        ok == 10 && secs < 120.0,
        &format!(
            "{ok}/10 seeds aligned, worst angle {worst_angle:.2} deg, worst |cos| {worst_cos:.4}, {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_04_output_entropy_is_log2() {
    let _g = serial();
    let t = Instant::now();
    let f =
        LinearSigmoidClassifier::new(vec![1.0, 0.0], Sigmoid::Logistic { steepness: 5.0 }).unwrap();
    let mut rng = SeededRng::new(404);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let g = LinearGaussianMap::random(2, 1, 1, 0.05, &mut rng).unwrap();
        let (h, _) =
            decomposition_terms(&g, &f, SampleBudget::new(1000, 100), &SeededRng::new(i)).unwrap();
        worst = worst.max((h - LN_2).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        4,
        worst < 0.02 && secs < 60.0,
        &format!("max |H(Y) - ln 2| = {worst:.4}, {secs:.1}s"),
    );
}

#[test]
fn criterion_05_landscape_optima() {
    let _g = serial();
    let t = Instant::now();
    let budget = SampleBudget::new(2500, 500);
    let single = angle_landscape(
        LandscapeKind::single_default(),
        &Variant::ALL,
        15.0,
        budget,
        0.05,
        &SeededRng::new(5),
    )
    .unwrap();
    let mut single_ok = true;
    let mut detail = String::new();
    for v in Variant::ALL {
        let (a1, a2) = single.argmax(single.causal_of(v).unwrap());
        let near = circular_distance(a1, 0.0) <= 15.0 && circular_distance(a2, 90.0) <= 15.0;
        single_ok &= near;
        detail += &format!("{}=({a1},{a2}) ", v.name());
    }
    let and = angle_landscape(
        LandscapeKind::and_default(),
        &[Variant::Joint],
        15.0,
        budget,
        0.05,
        &SeededRng::new(5),
    )
    .unwrap();
    let sep = |lam: f64| {
        let (a1, a2) = and.argmax(&and.total(Variant::Joint, lam).unwrap());
        circular_distance(a1, a2)
    };
    let (lo, hi) = (sep(0.01), sep(1.0));
    let secs = t.elapsed().as_secs_f64();
    report(
        5,
        single_ok && hi > lo && secs < 900.0,
        &format!("single argmax {detail}; and separation {lo} at 0.01, {hi} at 1; {secs:.0}s"),
    );
}

#[test]
fn criterion_06_estimator_converges_to_quadrature() {
    let _g = serial();
    let r = 0.95f64.sqrt();
    let g = LinearGaussianMap::from_matrix(
        Tensor::matrix(2, 2, vec![r, 0.0, 0.0, r]).unwrap(),
        1,
        0.05,
    )
    .unwrap();
    let a = [1.0, 0.0];
    let f = LinearSigmoidClassifier::new(a.to_vec(), Sigmoid::NormalCdf).unwrap();
    let exact = linear_cdf_influence(&g, &a).unwrap();
    let errors = |n_alpha: usize| -> Vec<f64> {
        (0..20u64)
            .map(|t| {
                let e = estimate_influence(
                    &g,
                    &f,
                    Variant::Joint,
                    SampleBudget::new(n_alpha, 100),
                    &SeededRng::new(n_alpha as u64 + t),
                )
                .unwrap();
                (e.value - exact).abs()
            })
            .collect()
    };
    let (m1, m4) = (median(errors(1000)), median(errors(4000)));
    report(
        6,
        m4 < 0.5 * m1,
        &format!(
            "exact {exact:.5}, median error {m1:.5} at 1000, {m4:.5} at 4000 (ratio {:.3})",
            m4 / m1
        ),
    );
}

fn primitive_checks() -> Vec<(&'static str, f64)> {
    let mut rng = SeededRng::new(7);
    let mut t = |r: usize, c: usize| Tensor::matrix(r, c, rng.standard_normals(r * c)).unwrap();
    let away_from_zero = |x: &Tensor| x.map(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
    let positive = |x: &Tensor| x.map(|v| v.abs() + 0.5);
    let (a, b, row, w34, w32) = (t(3, 4), t(4, 2), t(1, 4), t(3, 4), t(3, 2));
    let a2 = t(3, 4);

    // Contracts the op output against fixed weights so every entry matters.
    fn weigh(tape: &Tape, y: Var, w: &Tensor) -> gcex::Result<Var> {
        let wv = tape.constant(w.clone());
        Ok(tape.sum(tape.mul(y, wv)?))
    }
    type Unary = fn(&Tape, Var) -> gcex::Result<Var>;
    let unary: Vec<(&'static str, Unary, Tensor)> = vec![
        ("scale", |t, x| Ok(t.scale(x, -1.7)), a.clone()),
        ("add_scalar", |t, x| Ok(t.add_scalar(x, 0.3)), a.clone()),
        ("relu", |t, x| Ok(t.relu(x)), away_from_zero(&a)),
        ("sigmoid", |t, x| Ok(t.sigmoid(x)), a.clone()),
        ("normal_cdf", |t, x| Ok(t.normal_cdf(x)), a.clone()),
        ("softplus", |t, x| Ok(t.softplus(x)), a.clone()),
        ("log", |t, x| Ok(t.log(x)), positive(&a)),
        ("exp", |t, x| Ok(t.exp(x)), a.clone()),
        ("softmax", |t, x| Ok(t.softmax(x)), a.clone()),
    ];
    let mut out = Vec::new();
    for (name, op, x) in unary {
        let w = w34.clone();
        let c = check(move |t, v| weigh(t, op(t, v[0])?, &w), &[x], 1e-6).unwrap();
        out.push((name, c.rel_error));
    }
    let w = w32.clone();
    out.push((
        "matmul",
        check(
            move |t, v| weigh(t, t.matmul(v[0], v[1])?, &w),
            &[a.clone(), b.clone()],
            1e-6,
        )
        .unwrap()
        .rel_error,
    ));
    type Binary = fn(&Tape, Var, Var) -> gcex::Result<Var>;
    let binary: Vec<(&'static str, Binary, Tensor)> = vec![
        ("add", |t, x, y| t.add(x, y), a2.clone()),
        ("sub", |t, x, y| t.sub(x, y), a2.clone()),
        ("mul", |t, x, y| t.mul(x, y), a2.clone()),
        ("add_row", |t, x, y| t.add_row(x, y), row.clone()),
    ];
    for (name, op, y) in binary {
        let w = w34.clone();
        let c = check(
            move |t, v| weigh(t, op(t, v[0], v[1])?, &w),
            &[a.clone(), y],
            1e-6,
        )
        .unwrap();
        out.push((name, c.rel_error));
    }
    let w = w34.clone();
    out.push((
        "sum",
        check(
            move |t, v| Ok(t.sum(weigh(t, v[0], &w)?)),
            std::slice::from_ref(&a),
            1e-6,
        )
        .unwrap()
        .rel_error,
    ));
    let w = w34.clone();
    out.push((
        "mean",
        check(
            move |t, v| {
                let wv = t.constant(w.clone());
                Ok(t.mean(t.mul(v[0], wv)?))
            },
            std::slice::from_ref(&a),
            1e-6,
        )
        .unwrap()
        .rel_error,
    ));
    let w = t(2, 6);
    out.push((
        "reshape",
        check(
            move |t, v| weigh(t, t.reshape(v[0], &[2, 6])?, &w),
            std::slice::from_ref(&a),
            1e-6,
        )
        .unwrap()
        .rel_error,
    ));
    let w = t(4, 3);
    out.push((
        "transpose",
        check(
            move |t, v| weigh(t, t.transpose(v[0])?, &w),
            std::slice::from_ref(&a),
            1e-6,
        )
        .unwrap()
        .rel_error,
    ));
    out
}

#[test]
fn criterion_07_gradients_match_finite_differences() {
    let prims = primitive_checks();
    let worst_prim = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    let failing: Vec<&str> = prims
        .iter()
        .filter(|p| p.1.is_nan() || p.1 >= 1e-5)
        .map(|p| p.0)
        .collect();

    // End to end: W_α of a 3-D linear-Gaussian map read by a small MLP, with
    // the estimator's draws held fixed so C(W) is deterministic.
    let mut rng = SeededRng::new(77);
    let g = LinearGaussianMap::random(3, 2, 1, 0.05, &mut rng).unwrap();
    let f = MlpClassifier::new(Mlp::new(&[3, 8, 3], &mut rng).unwrap());
    let budget = SampleBudget::new(64, 16);
    let draws = SeededRng::new(78);
    let (_, grads) = estimate_influence_with_grad(&g, &f, Variant::Joint, budget, &draws).unwrap();
    let c_at = |w: &Tensor| {
        let m = LinearGaussianMap::from_matrix(w.clone(), 2, 0.05).unwrap();
        estimate_influence(&m, &f, Variant::Joint, budget, &draws)
            .unwrap()
            .value
    };
    let h = 1e-6;
    let (rows, k) = (g.w().rows(), 2);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..rows {
        for j in 0..k {
            let mut wp = g.w().clone();
            wp.set2(i, j, g.w().get2(i, j) + h);
            let mut wm = g.w().clone();
            wm.set2(i, j, g.w().get2(i, j) - h);
            numeric.push((c_at(&wp) - c_at(&wm)) / (2.0 * h));
            analytic.push(grads[0].get2(i, j));
        }
    }
    let e2e = relative_error(&[Tensor::from_vec(analytic)], &[Tensor::from_vec(numeric)]);
    report(
        7,
        failing.is_empty() && e2e < 1e-3,
        &format!(
            "{} primitives, worst rel error {worst_prim:.2e} (failing: {failing:?}); end-to-end dC/dW_alpha rel error {e2e:.2e}",
            prims.len()
        ),
    );
}

#[test]
fn criterion_08_capacity_certificate() {
    let v = capacity_certificate(1.03, 3).unwrap();
    report(
        8,
        (v - 0.05).abs() <= 0.005,
        &format!("certificate(1.03, 3) = {v:.4}"),
    );
}

#[test]
fn criterion_09_mnist_explanation() {
    let _g = serial();
    let t = Instant::now();
    let (train, val) = mnist_38();
    let f = train_mlp_classifier(&train, Some(&val), &ClassifierTrainConfig::default()).unwrap();
    let cfg = TrainConfig {
        k: 1,
        l: 7,
        lambda: 0.05,
        ..vae_base(1000)
    };
    let init = Explainer::init(&vae_kind(), train.dim(), 1, 7, &SeededRng::new(0)).unwrap();
    let (g, _) = train_explainer(init, &f, &train, &cfg).unwrap();
    let c = evaluate_explainer(
        &g,
        &f,
        &val,
        Variant::Joint,
        SampleBudget::new(1000, 50),
        0.05,
        &SeededRng::new(9),
    )
    .unwrap()
    .causal;
    let flows =
        per_factor_information_flow(g.map(), &f, SampleBudget::new(500, 50), &SeededRng::new(3))
            .unwrap();
    let flow_ok = flows[1..].iter().all(|&b| flows[0] > b);
    let iv: Vec<_> = (0..8)
        .map(|i| intervention_accuracy_drop(&g, &f, &val, i, &SeededRng::new(4)).unwrap())
        .collect();
    // The alpha drop is taken from the reconstructions, the beta drops from
    // the original data; both are the conservative reading.
    let alpha_drop = iv[0].drop();
    let beta_drop = iv[1..]
        .iter()
        .map(|r| r.original - r.intervened)
        .fold(f64::NEG_INFINITY, f64::max);
    let secs = t.elapsed().as_secs_f64();
    report(
        9,
        c >= 0.6 && flow_ok && alpha_drop > 0.2 && beta_drop < 0.05 && secs < 1800.0,
        &format!(
            "C {c:.3}, flow alpha {:.3} vs max beta {:.3}, alpha drop {:.1} pts, max beta drop {:.1} pts, {secs:.0}s",
            flows[0],
            flows[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            100.0 * alpha_drop,
            100.0 * beta_drop
        ),
    );
}

#[test]
fn criterion_10_parameter_selection() {
    let _g = serial();
    let t = Instant::now();
    let opts = SelectOptions::default();

    let (train, val) = mnist_38();
    let f = train_mlp_classifier(&train, Some(&val), &ClassifierTrainConfig::default()).unwrap();
    let base = vae_base(600);
    let budget = reference_budget(&vae_kind(), &f, &train, &base, 8).unwrap();
    let (mnist, _) = select_params(&vae_kind(), &f, &train, &base, &budget, &opts).unwrap();

    let n = 12000;
    let all = synth_dataset(
        &SynthKind::ThreeClassTwoDirections { dim: 4 },
        n,
        &SeededRng::new(0),
    )
    .unwrap();
    let (tr, va) = all.split_at((n * 5).div_ceil(6));
    let f3 = train_mlp_classifier(&tr, Some(&va), &ClassifierTrainConfig::default()).unwrap();
    let kind = BackendKind::LinearGaussian { gamma: 0.05 };
    let base = TrainConfig {
        steps: 1500,
        learning_rate: 0.01,
        trace_every: 1500,
        ..Default::default()
    };
    let budget = select_latent_budget(&kind, &f3, &tr, &base, 0.02).unwrap();
    let (synth, _) = select_params(&kind, &f3, &tr, &base, &budget, &opts).unwrap();
    let secs = t.elapsed().as_secs_f64();
    report(
        10,
        mnist.k == 1 && synth.k == 2 && secs < 2700.0,
        &format!(
            "MNIST K={} (L={}, lambda={}), synthetic K={} (L_total={}, lambda={}), {secs:.0}s",
            mnist.k, mnist.l, mnist.lambda, synth.k, budget.l_total, synth.lambda
        ),
    );
}

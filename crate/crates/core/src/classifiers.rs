//! Black-box classifiers: class probabilities plus input gradients.
//!
//! Everything downstream (training, estimation, analysis) talks to a
//! classifier only through the [`Classifier`] trait.

use std::sync::Arc;

use crate::autodiff::{logistic, Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::prob::{argmax, normal_cdf, normal_pdf, CategoricalDist, SeededRng, Stream};

/// A classifier `f: X → Δ^M` with gradient access.
pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Class probabilities for each row of an `n × input_dim` batch.
    fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor>;

    /// Row `i` of the result is `Σ_m cotangent[i, m] · ∇ₓ p_m(x_i)`.
    fn pullback_batch(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor>;

    fn predict_proba(&self, x: &[f64]) -> Result<CategoricalDist> {
        let p = self.predict_proba_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        let mut probs = p.into_data();
        // Renormalise away rounding so the simplex check never trips.
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= s);
        CategoricalDist::new(probs)
    }

    /// Gradient of the probability of `class` with respect to the input.
    fn predict_grad(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        let m = self.num_classes();
        if class >= m {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {m} classes"
            )));
        }
        let mut c = vec![0.0; m];
        c[class] = 1.0;
        let g = self.pullback_batch(
            &Tensor::matrix(1, x.len(), x.to_vec())?,
            &Tensor::matrix(1, m, c)?,
        )?;
        Ok(g.into_data())
    }
}

/// Shared handle to a classifier.
pub type ClassifierHandle = Arc<dyn Classifier>;

fn check_batch(x: &Tensor, dim: usize) -> Result<usize> {
    let (n, d) = x.as_matrix("classifier input")?;
    if d != dim {
        return Err(Error::DimensionMismatch {
            what: "classifier input dimension",
            expected: dim,
            got: d,
        });
    }
    Ok(n)
}

fn check_cotangent(c: &Tensor, n: usize, m: usize) -> Result<()> {
    if c.shape() != [n, m] {
        return Err(Error::ShapeMismatch {
            op: "classifier pullback",
            lhs: vec![n, m],
            rhs: c.shape().to_vec(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar squashing function used by the hyperplane classifiers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sigmoid {
    NormalCdf,
    Logistic { steepness: f64 },
}

impl Sigmoid {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Self::NormalCdf => normal_cdf(t),
            Self::Logistic { steepness } => logistic(steepness * t),
        }
    }

    pub fn deriv(self, t: f64) -> f64 {
        match self {
            Self::NormalCdf => normal_pdf(t),
            Self::Logistic { steepness } => {
                let s = logistic(steepness * t);
                steepness * s * (1.0 - s)
            }
        }
    }
}

/// `p(y = 1 | x) = σ(aᵀx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSigmoidClassifier {
    a: Vec<f64>,
    sigmoid: Sigmoid,
}

impl LinearSigmoidClassifier {
    pub fn new(a: Vec<f64>, sigmoid: Sigmoid) -> Result<Self> {
        if dot(&a, &a) == 0.0 {
            return Err(Error::InvalidArgument(
                "hyperplane normal must be nonzero".into(),
            ));
        }
        Ok(Self { a, sigmoid })
    }

    pub fn normal(&self) -> &[f64] {
        &self.a
    }

    pub fn sigmoid(&self) -> Sigmoid {
        self.sigmoid
    }
}

impl Classifier for LinearSigmoidClassifier {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.a.len())?;
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let p = self.sigmoid.eval(dot(&self.a, x.row(i)));
            out.extend_from_slice(&[1.0 - p, p]);
        }
        Tensor::matrix(n, 2, out)
    }

    fn pullback_batch(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.a.len())?;
        check_cotangent(c, n, 2)?;
        let d = self.a.len();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s = self.sigmoid.deriv(dot(&self.a, x.row(i))) * (c.get2(i, 1) - c.get2(i, 0));
            for (o, &a) in out[i * d..(i + 1) * d].iter_mut().zip(&self.a) {
                *o = s * a;
            }
        }
        Tensor::matrix(n, d, out)
    }
}

/// `p(y = 1 | x) = σ(a₁ᵀx) · σ(a₂ᵀx)` with a logistic σ.
#[derive(Clone, Debug, PartialEq)]
pub struct AndClassifier {
    a1: Vec<f64>,
    a2: Vec<f64>,
    sigmoid: Sigmoid,
}

impl AndClassifier {
    pub fn new(a1: Vec<f64>, a2: Vec<f64>, steepness: f64) -> Result<Self> {
        if a1.len() != a2.len() {
            return Err(Error::DimensionMismatch {
                what: "second normal length",
                expected: a1.len(),
                got: a2.len(),
            });
        }
        if dot(&a1, &a1) == 0.0 || dot(&a2, &a2) == 0.0 {
            return Err(Error::InvalidArgument(
                "hyperplane normals must be nonzero".into(),
            ));
        }
        Ok(Self {
            a1,
            a2,
            sigmoid: Sigmoid::Logistic { steepness },
        })
    }
}

impl Classifier for AndClassifier {
    fn input_dim(&self) -> usize {
        self.a1.len()
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.a1.len())?;
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let r = x.row(i);
            let p = self.sigmoid.eval(dot(&self.a1, r)) * self.sigmoid.eval(dot(&self.a2, r));
            out.extend_from_slice(&[1.0 - p, p]);
        }
        Tensor::matrix(n, 2, out)
    }

    fn pullback_batch(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.a1.len())?;
        check_cotangent(c, n, 2)?;
        let d = self.a1.len();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let r = x.row(i);
            let (t1, t2) = (dot(&self.a1, r), dot(&self.a2, r));
            let w = c.get2(i, 1) - c.get2(i, 0);
            let g1 = w * self.sigmoid.deriv(t1) * self.sigmoid.eval(t2);
            let g2 = w * self.sigmoid.eval(t1) * self.sigmoid.deriv(t2);
            for j in 0..d {
                out[i * d + j] = g1 * self.a1[j] + g2 * self.a2[j];
            }
        }
        Tensor::matrix(n, d, out)
    }
}

/// Ignores its input and always returns the same distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantClassifier {
    dim: usize,
    probs: CategoricalDist,
}

impl ConstantClassifier {
    pub fn new(dim: usize, probs: CategoricalDist) -> Self {
        Self { dim, probs }
    }
}

impl Classifier for ConstantClassifier {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.probs.num_classes()
    }

    fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.dim)?;
        let m = self.num_classes();
        Tensor::matrix(n, m, self.probs.probs().repeat(n))
    }

    fn pullback_batch(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.dim)?;
        check_cotangent(c, n, self.num_classes())?;
        Ok(Tensor::zeros(&[n, self.dim]))
    }
}

/// Dense ReLU network with a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    net: Mlp,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

impl MlpClassifier {
    pub fn new(net: Mlp) -> Self {
        Self {
            net,
            train_accuracy: None,
            validation_accuracy: None,
        }
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// Fraction of rows whose most probable class equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        accuracy(self, data)
    }
}

impl Classifier for MlpClassifier {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn predict_proba_batch(&self, x: &Tensor) -> Result<Tensor> {
        check_batch(x, self.input_dim())?;
        let tape = Tape::new();
        let bound = self.net.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.net.forward(&tape, &bound, xv)?;
        let p = tape.softmax(logits);
        Ok((*tape.value(p)).clone())
    }

    fn pullback_batch(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let n = check_batch(x, self.input_dim())?;
        check_cotangent(c, n, self.num_classes())?;
        let tape = Tape::new();
        let bound = self.net.bind(&tape, false);
        let xv = tape.leaf(x.clone());
        let logits = self.net.forward(&tape, &bound, xv)?;
        let p = tape.softmax(logits);
        let cv = tape.constant(c.clone());
        let s = tape.sum(tape.mul(p, cv)?);
        tape.backward(s)?;
        Ok(tape
            .grad(xv)
            .unwrap_or_else(|| Tensor::zeros(&[n, self.input_dim()])))
    }
}

/// Accuracy of `argmax f(x)` against the dataset labels.
pub fn accuracy(f: &dyn Classifier, data: &Dataset) -> Result<f64> {
    let labels = data.labels()?;
    let p = predict_in_chunks(f, &data.x)?;
    let hits = (0..data.len())
        .filter(|&i| argmax(p.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

pub(crate) fn predict_in_chunks(f: &dyn Classifier, x: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 4096;
    let n = x.rows();
    if n <= CHUNK {
        return f.predict_proba_batch(x);
    }
    let mut out = Vec::with_capacity(n * f.num_classes());
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        out.extend(f.predict_proba_batch(&x.select_rows(&idx))?.into_data());
    }
    Tensor::matrix(n, f.num_classes(), out)
}

/// Settings for fitting an [`MlpClassifier`] with momentum SGD on cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.5,
            seed: 0,
        }
    }
}

/// Fits an MLP classifier on `train`; accuracy on `validation` is recorded
/// when given.
pub fn train_mlp_classifier(
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &ClassifierTrainConfig,
) -> Result<MlpClassifier> {
    let labels = train.labels()?;
    let m = train.num_classes();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let mut counts = vec![0usize; m];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has no training samples"
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }

    let root = SeededRng::new(cfg.seed);
    let mut sizes = vec![train.dim()];
    sizes.extend(&cfg.hidden);
    sizes.push(m);
    let mut net = Mlp::new(&sizes, &mut root.substream(Stream::Init, 0))?;
    let mut velocity: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_rng = root.substream(Stream::Batch, 0);

    for _epoch in 0..cfg.epochs {
        batch_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train.x.select_rows(chunk);
            let mut onehot = Tensor::zeros(&[chunk.len(), m]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.set2(r, labels[i], 1.0);
            }
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let xv = tape.constant(xb);
            let logits = net.forward(&tape, &bound, xv)?;
            let p = tape.softmax(logits);
            let logp = tape.log(tape.add_scalar(p, 1e-12));
            let target = tape.constant(onehot);
            let nll = tape.scale(tape.sum(tape.mul(logp, target)?), -1.0 / chunk.len() as f64);
            tape.backward(nll)?;
            for ((param, vel), &b) in net.params_mut().iter_mut().zip(&mut velocity).zip(&bound) {
                let g = tape.grad(b).expect("tracked parameter");
                for ((p, v), &gi) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut())
                    .zip(g.data())
                {
                    *v = cfg.momentum * *v - cfg.learning_rate * gi;
                    *p += *v;
                }
            }
            if !tape.value(nll).item().is_finite() {
                return Err(Error::Diverged {
                    step: 0,
                    value: tape.value(nll).item(),
                });
            }
        }
    }

    let mut clf = MlpClassifier::new(net);
    clf.train_accuracy = Some(clf.accuracy(train)?);
    if let Some(v) = validation {
        clf.validation_accuracy = Some(clf.accuracy(v)?);
    }
    Ok(clf)
}

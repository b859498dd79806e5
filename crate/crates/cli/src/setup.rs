use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gcex::data::synth_dataset;
use gcex::io::checkpoint::Checkpoint;
use gcex::io::idx::load_idx;
use gcex::{
    AndClassifier, BackendKind, CategoricalDist, ClassifierHandle, ConstantClassifier, Dataset,
    Explainer, LinearSigmoidClassifier, SeededRng, Sigmoid, SynthKind,
};

use crate::params::Params;

/// Train/validation data plus image geometry when the data are images.
pub struct Data {
    pub train: Dataset,
    pub validation: Dataset,
    pub image: Option<(usize, usize)>,
}

pub fn load_data(p: &mut Params) -> Result<Data> {
    let seed = p.get("seed", 0u64)?;
    match p.get("data", "synth".to_string())?.as_str() {
        "idx" => {
            let images = p.path("images")?;
            let labels = p.path("labels")?;
            let classes: Vec<u8> = p.require_list("classes")?;
            let d = load_idx(&images, &labels, &classes)
                .with_context(|| format!("loading {} / {}", images.display(), labels.display()))?;
            let (train, validation) = d.split();
            Ok(Data {
                train,
                validation,
                image: Some((d.rows, d.cols)),
            })
        }
        "synth" => {
            let kind = p.get("synth_kind", "isotropic-gaussian".to_string())?;
            let dim = p.get("synth_dim", 2usize)?;
            let rank = p.get("synth_rank", dim)?;
            let sep = p.get("synth_separation", 4.0f64)?;
            let n = p.get("synth_n", 6000usize)?;
            let kind = SynthKind::parse(&kind, dim, rank, sep)?;
            let all = synth_dataset(&kind, n, &SeededRng::new(seed))?;
            let (train, validation) = all.split_at((n * 5).div_ceil(6));
            Ok(Data {
                train,
                validation,
                image: None,
            })
        }
        other => bail!("unknown data source `{other}` (expected idx or synth)"),
    }
}

pub fn load_classifier(p: &mut Params, dim: usize) -> Result<ClassifierHandle> {
    let kind = p.get("classifier", "mlp".to_string())?;
    let f: ClassifierHandle = match kind.as_str() {
        "mlp" => {
            let path = p.path("classifier_checkpoint")?;
            let ck = Checkpoint::load(&path)
                .with_context(|| format!("loading classifier {}", path.display()))?;
            Arc::new(
                ck.to_classifier()
                    .with_context(|| format!("incompatible checkpoint {}", path.display()))?,
            )
        }
        "linear-cdf" => Arc::new(LinearSigmoidClassifier::new(
            p.require_list("normal")?,
            Sigmoid::NormalCdf,
        )?),
        "linear-logistic" => {
            let steepness = p.get("steepness", 5.0)?;
            Arc::new(LinearSigmoidClassifier::new(
                p.require_list("normal")?,
                Sigmoid::Logistic { steepness },
            )?)
        }
        "and" => {
            let steepness = p.get("steepness", 100.0)?;
            Arc::new(AndClassifier::new(
                p.require_list("normal")?,
                p.require_list("normal2")?,
                steepness,
            )?)
        }
        "constant" => {
            let probs = p.list("constant_probs", &[0.5, 0.5])?;
            Arc::new(ConstantClassifier::new(dim, CategoricalDist::new(probs)?))
        }
        other => bail!("unknown classifier `{other}`"),
    };
    if f.input_dim() != dim {
        bail!(
            "dimension mismatch: classifier takes {} inputs but the data have {dim}",
            f.input_dim()
        );
    }
    Ok(f)
}

pub fn backend_kind(p: &mut Params) -> Result<BackendKind> {
    Ok(match p.get("backend", "lingauss".to_string())?.as_str() {
        "lingauss" => BackendKind::LinearGaussian {
            gamma: p.get("gamma", gcex::generative::LinearGaussianMap::DEFAULT_GAMMA)?,
        },
        "vae" => BackendKind::Vae {
            hidden: p.list("vae_hidden", &gcex::generative::VaeModel::DEFAULT_HIDDEN)?,
        },
        other => bail!("unknown backend `{other}` (expected lingauss or vae)"),
    })
}

pub fn load_explainer(p: &mut Params, dim: Option<usize>) -> Result<Explainer> {
    let path = p.path("explainer_checkpoint")?;
    let ck =
        Checkpoint::load(&path).with_context(|| format!("loading explainer {}", path.display()))?;
    let g = ck
        .to_explainer()
        .with_context(|| format!("incompatible checkpoint {}", path.display()))?;
    if let Some(dim) = dim.filter(|&d| d != g.map().data_dim()) {
        bail!(
            "dimension mismatch: explainer generates {}-dimensional data but the data have {dim}",
            g.map().data_dim()
        );
    }
    Ok(g)
}

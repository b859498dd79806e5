//! Model persistence.
//!
//! A checkpoint is a UTF-8 header followed by the raw parameters:
//!
//! ```text
//! gcex-checkpoint 1
//! kind vae
//! meta k 1
//! tensor decoder.0 8 128
//! ...
//! end
//! ```
//!
//! then the elements of every listed tensor, in order, as little-endian `f64`.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::classifiers::MlpClassifier;
use crate::error::{Error, Result};
use crate::generative::{DecodeMode, GenerativeMap, LinearGaussianMap, VaeModel};
use crate::nn::Mlp;
use crate::objective::Explainer;

pub const MAGIC: &str = "gcex-checkpoint";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Named tensors plus free-form text metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(bad(format!(
            "{what} {s:?} must be a non-empty token without whitespace"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.set_meta(key, value);
        self
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .meta(key)
            .ok_or_else(|| bad(format!("missing metadata {key}")))?;
        v.parse()
            .map_err(|_| bad(format!("metadata {key}: cannot parse {v:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        check_token(&self.kind, "kind")?;
        let mut head = format!("{MAGIC} {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_token(k, "metadata key")?;
            if v.contains('\n') {
                return Err(bad(format!("metadata {k} spans lines")));
            }
            head += &format!("meta {k} {v}\n");
        }
        for (n, t) in &self.tensors {
            check_token(n, "tensor name")?;
            head += "tensor ";
            head += n;
            for d in t.shape() {
                head += &format!(" {d}");
            }
            head += "\n";
        }
        head += "end\n";
        let mut out = head.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header is not terminated"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let kind = next_line()?
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind line"))?
            .to_string();
        let mut ck = Self::new(&kind);
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().unwrap_or("").to_string();
                let shape = parts
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|_| bad(format!("tensor {name}: bad dimension {d:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name, shape));
            } else {
                return Err(bad(format!("unrecognised header line {line:?}")));
            }
        }
        let payload = &bytes[pos..];
        let total: usize = shapes
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if payload.len() != total * 8 {
            return Err(bad(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                total * 8
            )));
        }
        let mut vals = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for (name, shape) in shapes {
            let n = shape.iter().product();
            let data: Vec<f64> = vals.by_ref().take(n).collect();
            ck.tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if kinds.contains(&self.kind.as_str()) {
            Ok(())
        } else {
            Err(bad(format!(
                "checkpoint holds a {}, expected {}",
                self.kind,
                kinds.join(" or ")
            )))
        }
    }
}

fn push_mlp(ck: &mut Checkpoint, prefix: &str, m: &Mlp) {
    let sizes: Vec<String> = m.sizes().iter().map(|s| s.to_string()).collect();
    ck.set_meta(&format!("{prefix}.sizes"), sizes.join(","));
    for (i, p) in m.params().iter().enumerate() {
        ck.tensors.push((format!("{prefix}.{i}"), p.clone()));
    }
}

fn read_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let raw = ck
        .meta(&format!("{prefix}.sizes"))
        .ok_or_else(|| bad(format!("missing {prefix}.sizes")))?;
    let sizes = raw
        .split(',')
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| bad(format!("{prefix}.sizes: bad entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = 2 * sizes.len().saturating_sub(1);
    let params = (0..n)
        .map(|i| ck.tensor(&format!("{prefix}.{i}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    Mlp::from_params(&sizes, params).map_err(|e| bad(format!("{prefix}: {e}")))
}

pub const KIND_CLASSIFIER: &str = "mlp-classifier";
pub const KIND_LINGAUSS: &str = "lingauss";
pub const KIND_VAE: &str = "vae";

impl From<&MlpClassifier> for Checkpoint {
    fn from(c: &MlpClassifier) -> Self {
        let mut ck = Checkpoint::new(KIND_CLASSIFIER);
        push_mlp(&mut ck, "net", c.network());
        for (k, v) in [
            ("train_accuracy", c.train_accuracy),
            ("validation_accuracy", c.validation_accuracy),
        ] {
            if let Some(v) = v {
                ck.set_meta(k, v);
            }
        }
        ck
    }
}

impl From<&Explainer> for Checkpoint {
    fn from(g: &Explainer) -> Self {
        match g {
            Explainer::LinearGaussian(m) => {
                let mut ck = Checkpoint::new(KIND_LINGAUSS).with_meta("k", m.k());
                ck.tensors.push(("w".into(), m.w().clone()));
                ck.tensors.push(("gamma".into(), Tensor::scalar(m.gamma())));
                ck
            }
            Explainer::Vae(m) => {
                let mode = match m.decode_mode {
                    DecodeMode::Mean => "mean",
                    DecodeMode::Bernoulli => "bernoulli",
                };
                let mut ck = Checkpoint::new(KIND_VAE)
                    .with_meta("k", m.k())
                    .with_meta("l", m.l())
                    .with_meta("decode_mode", mode);
                let [dec, trunk, mu, lv] = m.parts();
                push_mlp(&mut ck, "decoder", dec);
                push_mlp(&mut ck, "trunk", trunk);
                push_mlp(&mut ck, "mu", mu);
                push_mlp(&mut ck, "logvar", lv);
                ck
            }
        }
    }
}

impl Checkpoint {
    pub fn to_classifier(&self) -> Result<MlpClassifier> {
        self.expect_kind(&[KIND_CLASSIFIER])?;
        let mut c = MlpClassifier::new(read_mlp(self, "net")?);
        c.train_accuracy = self
            .meta("train_accuracy")
            .map(|_| self.meta_parsed("train_accuracy"))
            .transpose()?;
        c.validation_accuracy = self
            .meta("validation_accuracy")
            .map(|_| self.meta_parsed("validation_accuracy"))
            .transpose()?;
        Ok(c)
    }

    pub fn to_explainer(&self) -> Result<Explainer> {
        self.expect_kind(&[KIND_LINGAUSS, KIND_VAE])?;
        let k: usize = self.meta_parsed("k")?;
        if self.kind == KIND_LINGAUSS {
            let gamma = self.tensor("gamma")?.item();
            let m = LinearGaussianMap::from_matrix(self.tensor("w")?.clone(), k, gamma)
                .map_err(|e| bad(format!("lingauss: {e}")))?;
            return Ok(Explainer::LinearGaussian(m));
        }
        let l: usize = self.meta_parsed("l")?;
        let mut m = VaeModel::from_parts(
            k,
            l,
            read_mlp(self, "decoder")?,
            read_mlp(self, "trunk")?,
            read_mlp(self, "mu")?,
            read_mlp(self, "logvar")?,
        )
        .map_err(|e| bad(format!("vae: {e}")))?;
        m.decode_mode = match self.meta("decode_mode").unwrap_or("mean") {
            "mean" => DecodeMode::Mean,
            "bernoulli" => DecodeMode::Bernoulli,
            other => return Err(bad(format!("unknown decode mode {other:?}"))),
        };
        Ok(Explainer::Vae(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::SeededRng;
    use proptest::prelude::*;

    fn bits(ts: &[&Tensor]) -> Vec<u64> {
        ts.iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn vae_round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(4);
        let mut vae = VaeModel::new(12, 1, 3, &[9, 5], &mut rng).unwrap();
        vae.decode_mode = DecodeMode::Bernoulli;
        let g = Explainer::Vae(vae);
        let ck = Checkpoint::from(&g)
            .with_meta("steps", 300)
            .with_meta("final_c", 0.6123456789012345f64);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(
            back.meta_parsed::<f64>("final_c").unwrap(),
            0.6123456789012345
        );
        let g2 = back.to_explainer().unwrap();
        assert_eq!(bits(&g.map().params()), bits(&g2.map().params()));
        assert_eq!(g, g2);
    }

    #[test]
    fn lingauss_and_classifier_round_trip() {
        let mut rng = SeededRng::new(1);
        let g =
            Explainer::LinearGaussian(LinearGaussianMap::random(3, 1, 2, 0.05, &mut rng).unwrap());
        assert_eq!(
            Checkpoint::decode(&Checkpoint::from(&g).encode().unwrap())
                .unwrap()
                .to_explainer()
                .unwrap(),
            g
        );
        let mut c = MlpClassifier::new(Mlp::new(&[4, 6, 2], &mut rng).unwrap());
        c.validation_accuracy = Some(0.9875);
        let back = Checkpoint::decode(&Checkpoint::from(&c).encode().unwrap())
            .unwrap()
            .to_classifier()
            .unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_corruption_and_wrong_kind() {
        let mut rng = SeededRng::new(1);
        let c = MlpClassifier::new(Mlp::new(&[2, 3, 2], &mut rng).unwrap());
        let bytes = Checkpoint::from(&c).encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        assert!(Checkpoint::decode(b"hello\n").is_err());
        assert!(Checkpoint::decode(b"gcex-checkpoint 9\nkind x\nend\n").is_err());
        let ck = Checkpoint::decode(&bytes).unwrap();
        let e = ck.to_explainer().unwrap_err().to_string();
        assert!(e.contains("mlp-classifier"), "{e}");
    }

    proptest! {
        #[test]
        fn arbitrary_floats_survive(vals in proptest::collection::vec(any::<u64>(), 1..40)) {
            let data: Vec<f64> = vals.iter().map(|&b| f64::from_bits(b)).collect();
            let mut ck = Checkpoint::new("raw");
            ck.tensors.push(("t".into(), Tensor::from_vec(data.clone())));
            let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            let got: Vec<u64> = back.tensor("t").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
        }
    }
}

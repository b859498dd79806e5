//! Dense multilayer perceptrons on the tape.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::prob::SeededRng;

/// Stack of affine layers with ReLU between them and a linear output.
///
/// Parameters are stored as `[w0, b0, w1, b1, ...]` with `w` of shape
/// `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// He-initialised weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let scale = (2.0 / w[0] as f64).sqrt();
            let data = rng
                .standard_normals(w[0] * w[1])
                .into_iter()
                .map(|v| v * scale)
                .collect();
            params.push(Tensor::matrix(w[0], w[1], data)?);
            params.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<Tensor>) -> Result<Self> {
        if params.len() != 2 * (sizes.len().saturating_sub(1)) {
            return Err(Error::InvalidArgument(
                "parameter count does not match layer sizes".into(),
            ));
        }
        for (i, w) in sizes.windows(2).enumerate() {
            if params[2 * i].shape() != [w[0], w[1]] || params[2 * i + 1].shape() != [w[1]] {
                return Err(Error::ShapeMismatch {
                    op: "Mlp::from_params",
                    lhs: vec![w[0], w[1]],
                    rhs: params[2 * i].shape().to_vec(),
                });
            }
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers the parameters on `tape`, tracked or not.
    pub fn bind(&self, tape: &Tape, tracked: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if tracked {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Forward pass of an `n × fan_in` batch given bound parameters.
    pub fn forward(&self, tape: &Tape, bound: &[Var], x: Var) -> Result<Var> {
        let width = tape.shape(x);
        if width.len() != 2 || width[1] != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input width",
                expected: self.input_dim(),
                got: width.last().copied().unwrap_or(0),
            });
        }
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, bound[2 * l])?;
            h = tape.add_row(h, bound[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    #[test]
    fn two_layer_mlp_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(3);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        let x = Tensor::matrix(4, 3, rng.standard_normals(12)).unwrap();
        let target = Tensor::matrix(4, 2, rng.standard_normals(8)).unwrap();
        let sizes = mlp.sizes().to_vec();
        let check = gradcheck::check(
            |t, vars| {
                let net = Mlp::from_params(
                    &sizes,
                    vars.iter().map(|&v| (*t.value(v)).clone()).collect(),
                )?;
                let xv = t.constant(x.clone());
                let out = net.forward(t, vars, xv)?;
                let tv = t.constant(target.clone());
                let d = t.sub(out, tv)?;
                let sm = t.softmax(t.sigmoid(d));
                Ok(t.sum(t.mul(sm, d)?))
            },
            mlp.params(),
            1e-4,
        )
        .unwrap();
        assert!(check.rel_error < 1e-5, "{}", check.rel_error);
    }
}

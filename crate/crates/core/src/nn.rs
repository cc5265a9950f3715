//! Parameter-holding layer helpers over the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x W + b` over the last axis. `W` is stored `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init with bound `sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], -a, a, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore<f32>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::InvalidShape {
            op: "linear",
            detail: "input must have at least one axis".into(),
        })?;
        if last != self.fan_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.fan_in, self.fan_out],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[rows, last])?
        };
        let mut y = tape.matmul(flat, p[self.w])?;
        if let Some(b) = self.b {
            y = tape.add(y, p[b])?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.fan_out;
            tape.reshape(y, &out_shape)
        }
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// 2-D sinusoidal table `[rows * cols, dim]`: half the channels encode the
/// row, half the column.
pub fn sinusoid_2d(rows: usize, cols: usize, dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            let mut v = sinusoid_1d(r, half);
            v.extend(sinusoid_1d(c, dim - half));
            data.extend(v);
        }
    }
    Tensor::new(vec![rows * cols, dim], data).expect("sinusoid table")
}

/// 1-D sinusoidal table `[len, dim]`.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor<f32> {
    let data = (0..len).flat_map(|p| sinusoid_1d(p, dim)).collect();
    Tensor::new(vec![len, dim], data).expect("sinusoid table")
}

fn sinusoid_1d(pos: usize, dim: usize) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 100f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * freq;
            (if i % 2 == 0 { a.sin() } else { a.cos() }) as f32
        })
        .collect()
}

//! Building blocks shared by the encoder, the alignment stage and the heads.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tensor, Trace, Var, LAYER_NORM_EPS};

/// `x · W (+ b)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), init::xavier(rng, fan_in, fan_out)?)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros([1, fan_out])?)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tr: &mut Trace, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tr.param(ps, self.weight)?;
        let y = tr.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tr.param(ps, b)?;
                tr.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.insert(format!("{name}.gain"), Tensor::filled([1, dim], 1.0)?)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([1, dim])?)?,
        })
    }

    pub fn forward(&self, tr: &mut Trace, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = tr.layer_norm(x, LAYER_NORM_EPS)?;
        let g = tr.param(ps, self.gain)?;
        let b = tr.param(ps, self.bias)?;
        let y = tr.mul_row(n, g)?;
        tr.add_row(y, b)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tr: &mut Trace, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tr, ps, x)?;
        let h = tr.gelu(h)?;
        self.down.forward(tr, ps, h)
    }
}

/// Scaled dot-product attention split over `heads` column groups.
///
/// Returns the concatenated head outputs and one row-stochastic weight
/// matrix per head.
pub fn multi_head_attention(
    tr: &mut Trace,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dim = tr.value(q).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("{dim} features cannot split into {heads} heads"),
        ));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tr.slice(q, 1, lo, hi)?, tr.slice(k, 1, lo, hi)?, tr.slice(v, 1, lo, hi)?)
        };
        let kt = tr.transpose(kh)?;
        let scores = tr.matmul(qh, kt)?;
        let scores = tr.scale(scores, scale)?;
        let weights = tr.softmax(scores)?;
        outs.push(tr.matmul(weights, vh)?);
        maps.push(weights);
    }
    let out = if heads == 1 { outs[0] } else { tr.concat(&outs, 1)? };
    Ok((out, maps))
}

/// Sinusoidal position table, `frames × dim`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Result<Tensor> {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([frames, dim], data)
}

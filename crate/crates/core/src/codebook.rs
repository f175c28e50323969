//! Modality-invariant linguistic codebook and the temporal projections that
//! compress linguistic tokens into bottleneck tokens and recover them.
//!
//! Each frame feature `z_t` is scored against every basis row of `D`; the
//! softmax of those scores weights a convex combination of the bases, so
//! lip and hand frames land in one shared linguistic space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Modality};
use crate::layers::Linear;
use crate::numerics::{init, ParamId, ParamStore, Tensor, Trace, Var};

/// Learnable `n × d` basis matrix.
#[derive(Debug, Clone, Copy)]
pub struct Codebook {
    pub bases: ParamId,
    pub size: usize,
    pub dim: usize,
    /// Divides the basis scores before the softmax.
    pub temperature: f64,
}

/// Linguistic tokens of one modality, or the fused mean of both (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticSequence {
    pub source: Option<Modality>,
    pub tokens: Tensor,
}

/// Output of [`Codebook::lookup`].
#[derive(Debug, Clone, Copy)]
pub struct Lookup {
    /// `T × d` convex combinations of the bases.
    pub tokens: Var,
    /// `T × n` softmax weights.
    pub weights: Var,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook needs at least one basis and dimension".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("codebook temperature must be positive, got {temperature}")));
        }
        let bases = init::normal(rng, &[size, dim], 1.0 / (dim as f64).sqrt())?;
        Ok(Codebook {
            bases: store.insert(format!("{name}.bases"), bases)?,
            size,
            dim,
            temperature,
        })
    }

    /// Per frame: `w_t = softmax(D z_t / τ)`, `v_t = w_tᵀ D`.
    pub fn lookup(&self, tr: &mut Trace, ps: &ParamStore, z: Var) -> Result<Lookup> {
        let found = tr.value(z).cols();
        if found != self.dim {
            return Err(Error::shape(
                "linguistic_lookup",
                format!("feature dim {found} vs codebook dim {}", self.dim),
            ));
        }
        let d = tr.param(ps, self.bases)?;
        let dt = tr.transpose(d)?;
        let mut scores = tr.matmul(z, dt)?;
        if self.temperature != 1.0 {
            scores = tr.scale(scores, 1.0 / self.temperature)?;
        }
        let weights = tr.softmax(scores)?;
        let tokens = tr.matmul(weights, d)?;
        Ok(Lookup { tokens, weights })
    }

    /// Eager lookup returning the tokens and the `T × n` weights.
    pub fn lookup_sequence(
        &self,
        ps: &ParamStore,
        z: &FeatureSequence,
    ) -> Result<(LinguisticSequence, Tensor)> {
        let mut tr = Trace::new();
        let zv = tr.input(z.features.clone())?;
        let out = self.lookup(&mut tr, ps, zv)?;
        Ok((
            LinguisticSequence {
                source: Some(z.modality),
                tokens: tr.value(out.tokens).clone(),
            },
            tr.value(out.weights).clone(),
        ))
    }
}

/// Number of bottleneck tokens for `frames` frames at compression `ratio`.
pub fn compressed_len(frames: usize, ratio: usize) -> usize {
    frames.div_ceil(ratio)
}

/// `B × T` matrix averaging consecutive windows of `ratio` frames; the last
/// window may be shorter.
pub fn pooling_matrix(frames: usize, ratio: usize) -> Result<Tensor> {
    let b = compressed_len(frames, ratio);
    let mut data = vec![0.0; b * frames];
    for j in 0..b {
        let lo = j * ratio;
        let hi = ((j + 1) * ratio).min(frames);
        let w = 1.0 / (hi - lo) as f64;
        for t in lo..hi {
            data[j * frames + t] = w;
        }
    }
    Tensor::new([b, frames], data)
}

/// Learned down (`E_sub`) and up (`E_up`) maps around temporal pooling and
/// nearest-neighbor repetition.
#[derive(Debug, Clone, Copy)]
pub struct LinguisticProjection {
    pub sub: Linear,
    pub up: Linear,
    pub ratio: usize,
}

impl LinguisticProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("compression ratio must be at least 1".into()));
        }
        Ok(LinguisticProjection {
            sub: Linear::new(store, &format!("{name}.sub"), dim, dim, false, rng)?,
            up: Linear::new(store, &format!("{name}.up"), dim, dim, false, rng)?,
            ratio,
        })
    }

    /// `T × d` → `ceil(T/r) × d`: window means, then `E_sub`.
    pub fn down(&self, tr: &mut Trace, ps: &ParamStore, v: Var) -> Result<Var> {
        let pooled = if self.ratio == 1 {
            v
        } else {
            let frames = tr.value(v).rows();
            let p = tr.input(pooling_matrix(frames, self.ratio)?)?;
            tr.matmul(p, v)?
        };
        self.sub.forward(tr, ps, pooled)
    }

    /// `B × d` → `T × d`: each frame copies bottleneck row `t / r`, then `E_up`.
    pub fn up(&self, tr: &mut Trace, ps: &ParamStore, v_hat: Var, frames: usize) -> Result<Var> {
        let (b, d) = (tr.value(v_hat).rows(), tr.value(v_hat).cols());
        if frames == 0 || b != compressed_len(frames, self.ratio) {
            return Err(Error::shape(
                "up_project",
                format!("{b} bottleneck tokens cannot cover {frames} frames at ratio {}", self.ratio),
            ));
        }
        let repeated = if self.ratio == 1 {
            v_hat
        } else {
            let index = (0..frames)
                .flat_map(|t| (0..d).map(move |c| Some((t / self.ratio) * d + c)))
                .collect();
            tr.gather(v_hat, &[frames, d], index)?
        };
        self.up.forward(tr, ps, repeated)
    }
}

//! Visual-linguistic alignment.
//!
//! Each modality's visual tokens query the frame-rate fused linguistic
//! sequence through one cross-attention block whose weights are shared by
//! lip and hand. The aligned streams are then concatenated per frame.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::Modality;
use crate::layers::{multi_head_attention, FeedForward, Linear, Norm};
use crate::numerics::{ParamStore, Tensor, Trace, Var};

/// Header of exported attention CSV files.
pub const ATTENTION_COLUMNS: &str = "query_t,key_t,weight";

/// One cross-attention block applied to either modality.
#[derive(Debug, Clone, Copy)]
pub struct CrossAlign {
    pub query_norm: Norm,
    pub key_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff_norm: Norm,
    pub ff: FeedForward,
    pub heads: usize,
}

/// Output of [`CrossAlign::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Aligned {
    /// `T × d` aligned visual tokens.
    pub tokens: Var,
    /// `T × T` attention weights averaged over heads.
    pub map: Var,
}

impl CrossAlign {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(CrossAlign {
            query_norm: Norm::new(store, &format!("{name}.query_norm"), dim)?,
            key_norm: Norm::new(store, &format!("{name}.key_norm"), dim)?,
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng)?,
            ff_norm: Norm::new(store, &format!("{name}.ff_norm"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng)?,
            heads,
        })
    }

    /// Queries from `z`, keys and values from `v_fused`; both `T × d`.
    pub fn forward(&self, tr: &mut Trace, ps: &ParamStore, z: Var, v_fused: Var) -> Result<Aligned> {
        let (zs, vs) = (tr.value(z).shape().to_vec(), tr.value(v_fused).shape().to_vec());
        if zs != vs {
            return Err(Error::shape(
                "cross_align",
                format!("visual {zs:?} vs linguistic {vs:?}"),
            ));
        }
        let hq = self.query_norm.forward(tr, ps, z)?;
        let hk = self.key_norm.forward(tr, ps, v_fused)?;
        let q = self.query.forward(tr, ps, hq)?;
        let k = self.key.forward(tr, ps, hk)?;
        let v = self.value.forward(tr, ps, hk)?;
        let (a, maps) = multi_head_attention(tr, q, k, v, self.heads)?;
        let map = average(tr, &maps)?;
        let a = self.out.forward(tr, ps, a)?;
        let x = tr.add(z, a)?;
        let h = self.ff_norm.forward(tr, ps, x)?;
        let f = self.ff.forward(tr, ps, h)?;
        Ok(Aligned {
            tokens: tr.add(x, f)?,
            map,
        })
    }
}

fn average(tr: &mut Trace, maps: &[Var]) -> Result<Var> {
    let mut acc = maps[0];
    for m in &maps[1..] {
        acc = tr.add(acc, *m)?;
    }
    if maps.len() == 1 {
        Ok(acc)
    } else {
        tr.scale(acc, 1.0 / maps.len() as f64)
    }
}

/// `[z_l ‖ z_h]` per frame: `T × 2d`.
pub fn fuse_streams(tr: &mut Trace, z_lip: Var, z_hand: Var) -> Result<Var> {
    let (a, b) = (tr.value(z_lip).rows(), tr.value(z_hand).rows());
    if a != b {
        return Err(Error::shape("fuse_streams", format!("lip has {a} frames, hand {b}")));
    }
    tr.concat(&[z_lip, z_hand], 1)
}

/// Detached cross-attention weights of one modality for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub modality: Modality,
    /// `T_query × T_key`, rows sum to one.
    pub weights: Tensor,
}

impl AttentionMap {
    /// Mean over query frames of `argmax_k w[t][k] − t`.
    pub fn mean_argmax_offset(&self) -> f64 {
        let rows = self.weights.rows();
        let total: f64 = (0..rows)
            .map(|t| {
                let row = self.weights.row(t);
                let mut best = 0;
                for (k, w) in row.iter().enumerate() {
                    if *w > row[best] {
                        best = k;
                    }
                }
                best as f64 - t as f64
            })
            .sum();
        total / rows as f64
    }

    /// CSV with one `query_t,key_t,weight` row per entry. Weights carry 17
    /// significant digits, enough to parse back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let (rows, cols) = (self.weights.rows(), self.weights.cols());
        let mut out = String::with_capacity(24 * rows * cols);
        out.push_str(ATTENTION_COLUMNS);
        out.push('\n');
        for t in 0..rows {
            for k in 0..cols {
                let _ = writeln!(out, "{t},{k},{:.16e}", self.weights.at(t, k));
            }
        }
        out
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

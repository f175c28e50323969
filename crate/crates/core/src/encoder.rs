//! Multimodal encoder.
//!
//! Every layer runs one pre-norm transformer block per modality over the
//! token sequence `[z_m ‖ v̂]`, where `z_m` are the visual tokens of that
//! modality and `v̂` the linguistic bottleneck tokens. Query and key
//! projections are a single pair of parameters used by both modalities;
//! values, output projection, feed-forward and norms belong to each
//! modality. In [`EncoderMode::Fused`] the bottleneck fed to both blocks is
//! the mean of the two modalities' linguistic tokens, so lip and hand can
//! only exchange information through it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{multi_head_attention, sinusoidal_positions, FeedForward, Linear, Norm};
use crate::numerics::{ParamStore, Trace, Var};

/// How the linguistic tokens take part in self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// No linguistic tokens: plain per-modality self-attention.
    VisualOnly,
    /// Each modality attends over its own linguistic tokens.
    Independent,
    /// Both modalities attend over the shared mean of their linguistic tokens.
    Fused,
}

/// Visual tokens followed by linguistic tokens, with the split recorded.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    /// Number of visual tokens; linguistic tokens start here.
    pub split: usize,
    pub total: usize,
}

/// Concatenates `z` (`T × d`) and `v_hat` (`B × d`) along the token axis.
pub fn assemble_tokens(tr: &mut Trace, z: Var, v_hat: Option<Var>) -> Result<TokenSequence> {
    let split = tr.value(z).rows();
    let Some(v) = v_hat else {
        return Ok(TokenSequence {
            tokens: z,
            split,
            total: split,
        });
    };
    let (dz, dv) = (tr.value(z).cols(), tr.value(v).cols());
    if dz != dv {
        return Err(Error::shape(
            "assemble_tokens",
            format!("visual dim {dz} vs linguistic dim {dv}"),
        ));
    }
    let tokens = tr.concat(&[z, v], 0)?;
    let total = tr.value(tokens).rows();
    Ok(TokenSequence {
        tokens,
        split,
        total,
    })
}

/// Inverse of [`assemble_tokens`].
pub fn recover_blocks(tr: &mut Trace, seq: &TokenSequence) -> Result<(Var, Option<Var>)> {
    if seq.split == seq.total {
        return Ok((seq.tokens, None));
    }
    let z = tr.slice(seq.tokens, 0, 0, seq.split)?;
    let v = tr.slice(seq.tokens, 0, seq.split, seq.total)?;
    Ok((z, Some(v)))
}

/// Adds sinusoidal positions to a `T × d` visual block.
pub fn add_positions(tr: &mut Trace, z: Var) -> Result<Var> {
    let (frames, dim) = (tr.value(z).rows(), tr.value(z).cols());
    let pos = tr.input(sinusoidal_positions(frames, dim)?)?;
    tr.add(z, pos)
}

/// Parameters owned by one modality inside a layer.
#[derive(Debug, Clone, Copy)]
pub struct StreamWeights {
    pub attn_norm: Norm,
    pub value: Linear,
    pub out: Linear,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

impl StreamWeights {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(StreamWeights {
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), dim)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng)?,
            ff_norm: Norm::new(store, &format!("{name}.ff_norm"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng)?,
        })
    }
}

/// One multimodal block: shared query/key, per-modality everything else.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub lip: StreamWeights,
    pub hand: StreamWeights,
    pub heads: usize,
}

/// Visual and linguistic blocks of both modalities between layers.
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub z_lip: Var,
    pub z_hand: Var,
    pub v_lip: Option<Var>,
    pub v_hand: Option<Var>,
}

/// Per-layer switches.
#[derive(Debug, Clone, Copy)]
pub struct LayerOptions {
    pub mode: EncoderMode,
    /// Replace the fused bottleneck with zeros (isolates the streams).
    pub zero_bottleneck: bool,
}

impl EncoderLayer {
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
        Ok(EncoderLayer {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, false, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false, rng)?,
            lip: StreamWeights::new(store, &format!("{name}.lip"), dim, hidden, rng)?,
            hand: StreamWeights::new(store, &format!("{name}.hand"), dim, hidden, rng)?,
            heads,
        })
    }

    /// Pre-norm attention and feed-forward with residuals over `x`.
    /// Returns the block output and its per-head attention weights.
    pub fn block(
        &self,
        tr: &mut Trace,
        ps: &ParamStore,
        stream: &StreamWeights,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let h = stream.attn_norm.forward(tr, ps, x)?;
        let q = self.query.forward(tr, ps, h)?;
        let k = self.key.forward(tr, ps, h)?;
        let v = stream.value.forward(tr, ps, h)?;
        let (a, maps) = multi_head_attention(tr, q, k, v, self.heads)?;
        let a = stream.out.forward(tr, ps, a)?;
        let x = tr.add(x, a)?;
        let h = stream.ff_norm.forward(tr, ps, x)?;
        let f = stream.ff.forward(tr, ps, h)?;
        Ok((tr.add(x, f)?, maps))
    }

    /// Applies the layer to both modalities, appending attention weights to
    /// `maps`.
    pub fn forward(
        &self,
        tr: &mut Trace,
        ps: &ParamStore,
        state: LayerState,
        opts: LayerOptions,
        maps: &mut Vec<Var>,
    ) -> Result<LayerState> {
        let (bottleneck_lip, bottleneck_hand) = match opts.mode {
            EncoderMode::VisualOnly => (None, None),
            EncoderMode::Independent => (state.v_lip, state.v_hand),
            EncoderMode::Fused => {
                let (Some(vl), Some(vh)) = (state.v_lip, state.v_hand) else {
                    return Err(Error::shape("layer_forward", "fused mode needs linguistic tokens"));
                };
                let fused = fuse_linguistic(tr, vl, vh)?;
                let fused = if opts.zero_bottleneck {
                    tr.scale(fused, 0.0)?
                } else {
                    fused
                };
                (Some(fused), Some(fused))
            }
        };
        let mut run = |tr: &mut Trace, stream: &StreamWeights, z: Var, v: Option<Var>| {
            let seq = assemble_tokens(tr, z, v)?;
            let (out, m) = self.block(tr, ps, stream, seq.tokens)?;
            maps.extend(m);
            recover_blocks(
                tr,
                &TokenSequence {
                    tokens: out,
                    ..seq
                },
            )
        };
        let (z_lip, v_lip) = run(tr, &self.lip, state.z_lip, bottleneck_lip)?;
        let (z_hand, v_hand) = run(tr, &self.hand, state.z_hand, bottleneck_hand)?;
        Ok(LayerState {
            z_lip,
            z_hand,
            v_lip,
            v_hand,
        })
    }
}

/// `½ (v̂_l + v̂_h)`.
pub fn fuse_linguistic(tr: &mut Trace, v_lip: Var, v_hand: Var) -> Result<Var> {
    let s = tr.add(v_lip, v_hand)?;
    tr.scale(s, 0.5)
}

/// Result of [`Encoder::encode`].
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub z_lip: Var,
    pub z_hand: Var,
    /// Mean of the last layer's linguistic tokens (absent without them).
    pub v_fused: Option<Var>,
    /// Every attention weight matrix, layer by layer, lip heads then hand heads.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub mode: EncoderMode,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        mode: EncoderMode,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), dim, heads, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { layers, mode })
    }

    /// Adds positions to the visual blocks once, then applies every layer.
    pub fn encode(
        &self,
        tr: &mut Trace,
        ps: &ParamStore,
        z_lip: Var,
        z_hand: Var,
        v_lip: Option<Var>,
        v_hand: Option<Var>,
    ) -> Result<EncoderOutput> {
        self.encode_with(tr, ps, z_lip, z_hand, v_lip, v_hand, false)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode_with(
        &self,
        tr: &mut Trace,
        ps: &ParamStore,
        z_lip: Var,
        z_hand: Var,
        v_lip: Option<Var>,
        v_hand: Option<Var>,
        zero_bottleneck: bool,
    ) -> Result<EncoderOutput> {
        let (tl, th) = (tr.value(z_lip).rows(), tr.value(z_hand).rows());
        if tl != th {
            return Err(Error::shape("encode", format!("lip has {tl} frames, hand {th}")));
        }
        if self.mode != EncoderMode::VisualOnly && (v_lip.is_none() || v_hand.is_none()) {
            return Err(Error::shape("encode", "linguistic tokens required by encoder mode"));
        }
        let mut state = LayerState {
            z_lip: add_positions(tr, z_lip)?,
            z_hand: add_positions(tr, z_hand)?,
            v_lip: if self.mode == EncoderMode::VisualOnly { None } else { v_lip },
            v_hand: if self.mode == EncoderMode::VisualOnly { None } else { v_hand },
        };
        let opts = LayerOptions {
            mode: self.mode,
            zero_bottleneck,
        };
        let mut attention = Vec::new();
        for layer in &self.layers {
            state = layer.forward(tr, ps, state, opts, &mut attention)?;
        }
        let v_fused = match (state.v_lip, state.v_hand) {
            (Some(l), Some(h)) => Some(fuse_linguistic(tr, l, h)?),
            _ => None,
        };
        Ok(EncoderOutput {
            z_lip: state.z_lip,
            z_hand: state.z_hand,
            v_fused,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, init, Tensor};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_input(tr: &mut Trace, r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Var {
        tr.input(init::normal(r, &[rows, dim], 1.0).unwrap()).unwrap()
    }

    fn copy_stream(ps: &mut ParamStore, from: &StreamWeights, to: &StreamWeights) {
        let pairs = [
            (from.attn_norm.gain, to.attn_norm.gain),
            (from.attn_norm.bias, to.attn_norm.bias),
            (from.value.weight, to.value.weight),
            (from.out.weight, to.out.weight),
            (from.ff_norm.gain, to.ff_norm.gain),
            (from.ff_norm.bias, to.ff_norm.bias),
            (from.ff.up.weight, to.ff.up.weight),
            (from.ff.up.bias.unwrap(), to.ff.up.bias.unwrap()),
            (from.ff.down.weight, to.ff.down.weight),
            (from.ff.down.bias.unwrap(), to.ff.down.bias.unwrap()),
        ];
        for (a, b) in pairs {
            *ps.get_mut(b) = ps.get(a).clone();
        }
    }

    #[test]
    fn assemble_and_recover() {
        let mut tr = Trace::new();
        let mut r = rng(1);
        let z = rand_input(&mut tr, &mut r, 5, 4);
        let v = rand_input(&mut tr, &mut r, 2, 4);
        let zp = add_positions(&mut tr, z).unwrap();
        let seq = assemble_tokens(&mut tr, zp, Some(v)).unwrap();
        assert_eq!((seq.split, seq.total), (5, 7));
        let (z2, v2) = recover_blocks(&mut tr, &seq).unwrap();
        assert_eq!(tr.value(z2), tr.value(zp));
        assert_eq!(tr.value(v2.unwrap()), tr.value(v));

        let only = assemble_tokens(&mut tr, z, None).unwrap();
        assert_eq!((only.split, only.total), (5, 5));
        let bad = rand_input(&mut tr, &mut r, 2, 3);
        assert!(assemble_tokens(&mut tr, z, Some(bad)).is_err());
    }

    #[test]
    fn fused_mean_identities() {
        let mut tr = Trace::new();
        let mut r = rng(2);
        let v = rand_input(&mut tr, &mut r, 3, 4);
        let f = fuse_linguistic(&mut tr, v, v).unwrap();
        assert_eq!(tr.value(f), tr.value(v));
        let neg = tr.scale(v, -1.0).unwrap();
        let z = fuse_linguistic(&mut tr, v, neg).unwrap();
        assert!(tr.value(z).data().iter().all(|x| *x == 0.0));
    }

    /// Single head, d = 2, one visual and one linguistic token, every weight
    /// set by hand and the block evaluated step by step with scalars.
    #[test]
    fn hand_evaluated_single_head_block() {
        let mut ps = ParamStore::new();
        let layer = EncoderLayer::new(&mut ps, "l", 2, 1, 2, &mut rng(3)).unwrap();
        let set = |ps: &mut ParamStore, id, rows: &[[f64; 2]]| {
            *ps.get_mut(id) = Tensor::from_rows(rows).unwrap();
        };
        set(&mut ps, layer.query.weight, &[[1.0, 0.0], [0.0, 1.0]]);
        set(&mut ps, layer.key.weight, &[[0.5, 0.0], [0.0, 2.0]]);
        set(&mut ps, layer.lip.value.weight, &[[1.0, 1.0], [0.0, 1.0]]);
        set(&mut ps, layer.lip.out.weight, &[[1.0, 0.0], [0.0, 1.0]]);
        set(&mut ps, layer.lip.ff.up.weight, &[[1.0, 0.0], [0.0, -1.0]]);
        set(&mut ps, layer.lip.ff.down.weight, &[[0.5, 0.0], [0.0, 0.5]]);

        let mut tr = Trace::new();
        let z = tr.input(Tensor::from_rows(&[[3.0, 1.0]]).unwrap()).unwrap();
        let v = tr.input(Tensor::from_rows(&[[0.0, 2.0]]).unwrap()).unwrap();
        let seq = assemble_tokens(&mut tr, z, Some(v)).unwrap();
        let (out, _) = layer.block(&mut tr, &ps, &layer.lip, seq.tokens).unwrap();

        // layer norm over 2 features maps (a, b) to ±s with s = |a-b|/2/sqrt(((a-b)/2)^2+eps)
        let eps = 1e-5;
        let ln = |a: f64, b: f64| {
            let m = (a + b) / 2.0;
            let var = ((a - m).powi(2) + (b - m).powi(2)) / 2.0;
            let inv = 1.0 / (var + eps).sqrt();
            [(a - m) * inv, (b - m) * inv]
        };
        let x = [[3.0, 1.0], [0.0, 2.0]];
        let h = [ln(x[0][0], x[0][1]), ln(x[1][0], x[1][1])];
        let q = h;
        let k = [[0.5 * h[0][0], 2.0 * h[0][1]], [0.5 * h[1][0], 2.0 * h[1][1]]];
        let val = [[h[0][0], h[0][0] + h[0][1]], [h[1][0], h[1][0] + h[1][1]]];
        let scale = 1.0 / 2f64.sqrt();
        let gelu = |u: f64| 0.5 * u * (1.0 + (0.797_884_560_802_865_4 * (u + 0.044_715 * u * u * u)).tanh());
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale).collect();
            let m = s[0].max(s[1]);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let w = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let a = [w[0] * val[0][0] + w[1] * val[1][0], w[0] * val[0][1] + w[1] * val[1][1]];
            let x1 = [x[i][0] + a[0], x[i][1] + a[1]];
            let h2 = ln(x1[0], x1[1]);
            let up = [gelu(h2[0]), gelu(-h2[1])];
            let y = [x1[0] + 0.5 * up[0], x1[1] + 0.5 * up[1]];
            for c in 0..2 {
                let got = tr.value(out).at(i, c);
                assert!((got - y[c]).abs() < 1e-12, "token {i} col {c}: {got} vs {}", y[c]);
            }
        }
    }

    #[test]
    fn shared_query_key_symmetry() {
        let mut r = rng(4);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "enc", 2, 8, 2, 16, EncoderMode::Fused, &mut r).unwrap();
        for layer in &enc.layers {
            copy_stream(&mut ps, &layer.lip, &layer.hand);
        }
        let mut tr = Trace::new();
        let z = rand_input(&mut tr, &mut r, 5, 8);
        let v = rand_input(&mut tr, &mut r, 2, 8);
        let out = enc.encode(&mut tr, &ps, z, z, Some(v), Some(v)).unwrap();
        assert_eq!(tr.value(out.z_lip).data(), tr.value(out.z_hand).data());
    }

    #[test]
    fn query_key_are_one_parameter_pair() {
        let mut ps = ParamStore::new();
        let layer = EncoderLayer::new(&mut ps, "l", 4, 2, 8, &mut rng(5)).unwrap();
        let mut tr = Trace::new();
        let mut r = rng(6);
        let z = rand_input(&mut tr, &mut r, 3, 4);
        let state = LayerState {
            z_lip: z,
            z_hand: z,
            v_lip: None,
            v_hand: None,
        };
        let before = tr.len();
        let opts = LayerOptions {
            mode: EncoderMode::VisualOnly,
            zero_bottleneck: false,
        };
        layer.forward(&mut tr, &ps, state, opts, &mut Vec::new()).unwrap();
        // both streams reuse the same query node
        let q1 = tr.param(&ps, layer.query.weight).unwrap();
        assert!(q1.index() >= before);
        assert_eq!(tr.param(&ps, layer.query.weight).unwrap(), q1);
        assert_eq!(ps.id("l.query.weight"), Some(layer.query.weight));
        assert!(ps.id("l.lip.query.weight").is_none());
    }

    #[test]
    fn bottleneck_is_the_only_cross_modal_path() {
        let mut r = rng(7);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "enc", 3, 8, 2, 16, EncoderMode::Fused, &mut r).unwrap();
        let zl = init::normal(&mut r, &[6, 8], 1.0).unwrap();
        let zh = init::normal(&mut r, &[6, 8], 1.0).unwrap();
        let zh2 = init::normal(&mut r, &[6, 8], 1.0).unwrap();
        let vl = init::normal(&mut r, &[2, 8], 1.0).unwrap();
        let vh = init::normal(&mut r, &[2, 8], 1.0).unwrap();
        let run = |hand: &Tensor, zero: bool| {
            let mut tr = Trace::new();
            let a = tr.input(zl.clone()).unwrap();
            let b = tr.input(hand.clone()).unwrap();
            let c = tr.input(vl.clone()).unwrap();
            let d = tr.input(vh.clone()).unwrap();
            let out = enc.encode_with(&mut tr, &ps, a, b, Some(c), Some(d), zero).unwrap();
            tr.value(out.z_lip).clone()
        };
        assert_eq!(run(&zh, true), run(&zh2, true));
        assert_ne!(run(&zh, false), run(&zh2, false));
    }

    #[test]
    fn attention_rows_are_stochastic_and_token_counts_preserved() {
        let mut r = rng(8);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "enc", 3, 8, 4, 32, EncoderMode::Fused, &mut r).unwrap();
        let mut tr = Trace::new();
        let z = rand_input(&mut tr, &mut r, 7, 8);
        let zh = rand_input(&mut tr, &mut r, 7, 8);
        let v = rand_input(&mut tr, &mut r, 2, 8);
        let vh = rand_input(&mut tr, &mut r, 2, 8);
        let out = enc.encode(&mut tr, &ps, z, zh, Some(v), Some(vh)).unwrap();
        assert_eq!(out.attention.len(), 3 * 2 * 4);
        for m in &out.attention {
            let t = tr.value(*m);
            assert_eq!(t.shape(), &[9, 9]);
            for row in 0..9 {
                let s: f64 = t.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(t.row(row).iter().all(|w| *w >= 0.0));
            }
        }
        assert_eq!(tr.value(out.z_lip).shape(), &[7, 8]);
        assert_eq!(tr.value(out.v_fused.unwrap()).shape(), &[2, 8]);
    }

    #[test]
    fn visual_only_mode_is_plain_self_attention() {
        let mut r = rng(9);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "enc", 1, 4, 1, 8, EncoderMode::VisualOnly, &mut r).unwrap();
        let mut tr = Trace::new();
        let z = rand_input(&mut tr, &mut r, 5, 4);
        let out = enc.encode(&mut tr, &ps, z, z, None, None).unwrap();
        assert!(out.v_fused.is_none());
        assert_eq!(tr.value(out.z_lip).shape(), &[5, 4]);
        assert_eq!(tr.value(out.attention[0]).shape(), &[5, 5]);
    }

    #[test]
    fn encoder_gradients_pass_grad_check() {
        let mut r = rng(10);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "enc", 1, 4, 2, 8, EncoderMode::Fused, &mut r).unwrap();
        let inputs: Vec<_> = ["zl", "zh", "vl", "vh"]
            .iter()
            .zip([3, 3, 2, 2])
            .map(|(n, rows)| ps.insert(*n, init::normal(&mut r, &[rows, 4], 1.0).unwrap()).unwrap())
            .collect();
        let ids: Vec<_> = ps.ids().collect();
        let err = grad_check(&mut ps, &ids, 1e-5, |tr, ps| {
            let v: Vec<Var> = inputs.iter().map(|id| tr.param(ps, *id)).collect::<Result<_>>()?;
            let out = enc.encode(tr, ps, v[0], v[1], Some(v[2]), Some(v[3]))?;
            let a = tr.sum(out.z_lip)?;
            let b = tr.sum(out.z_hand)?;
            let f = out.v_fused.expect("fused");
            let sq = tr.mul(f, f)?;
            let c = tr.sum(sq)?;
            let ab = tr.add(a, b)?;
            tr.add(ab, c)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

//! Model assembly for every ablation variant.
//!
//! The full model looks up both streams in the codebook, compresses the
//! linguistic tokens, runs the fused-bottleneck encoder, recovers the fused
//! linguistic sequence at frame rate, aligns each visual stream against it
//! and classifies the concatenated aligned streams. The linguistic sequence
//! gets its own classifier so the two CTC losses can be summed.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, LinguisticProjection};
use crate::ctc::{ctc_nll, greedy_decode, hybrid_loss, CtcTarget};
use crate::encoder::{fuse_linguistic, Encoder, EncoderMode};
use crate::error::{Error, Result};
use crate::frontend::Modality;
use crate::layers::Linear;
use crate::numerics::{ParamStore, Tensor, Trace, Var};
use crate::vla::{fuse_streams, AttentionMap, CrossAlign};

/// RNG stream for parameter initialization.
const INIT_STREAM: u64 = 1;

/// Rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Frame-concatenated features straight into the classifier.
    Concat,
    /// Per-modality self-attention, no linguistic tokens.
    SelfAttn,
    /// Codebook tokens inside the encoder as fused bottleneck tokens.
    CodebookEncoder,
    /// Codebook tokens used only as alignment keys.
    CodebookAlign,
    /// Per-modality linguistic tokens in the encoder, then alignment.
    SelfAttnAlign,
    /// Fused bottleneck encoder and alignment.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Concat,
        Ablation::SelfAttn,
        Ablation::CodebookEncoder,
        Ablation::CodebookAlign,
        Ablation::SelfAttnAlign,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Concat => "concat",
            Ablation::SelfAttn => "self-attn",
            Ablation::CodebookEncoder => "self-attn+CB-eq23",
            Ablation::CodebookAlign => "self-attn+CB-eq4",
            Ablation::SelfAttnAlign => "self-attn+VLA",
            Ablation::Full => "full",
        }
    }

    pub fn uses_codebook(self) -> bool {
        !matches!(self, Ablation::Concat | Ablation::SelfAttn)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Ablation::CodebookAlign | Ablation::SelfAttnAlign | Ablation::Full)
    }

    pub fn encoder_mode(self) -> Option<EncoderMode> {
        match self {
            Ablation::Concat => None,
            Ablation::SelfAttn | Ablation::CodebookAlign => Some(EncoderMode::VisualOnly),
            Ablation::SelfAttnAlign => Some(EncoderMode::Independent),
            Ablation::CodebookEncoder | Ablation::Full => Some(EncoderMode::Fused),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Model and feature dimension.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    /// Temporal compression of linguistic tokens.
    pub ratio: usize,
    pub bases: usize,
    pub temperature: f64,
    /// Phonemes, excluding the blank.
    pub vocab: usize,
    pub align_heads: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            layers: 3,
            ff_mult: 4,
            ratio: 4,
            bases: 64,
            temperature: 1.0,
            vocab: 40,
            align_heads: 1,
            ablation: Ablation::Full,
        }
    }
}

/// Parameter handles of every module the ablation enables.
#[derive(Debug, Clone)]
struct Modules {
    codebook: Option<(Codebook, LinguisticProjection)>,
    encoder: Option<Encoder>,
    align: Option<CrossAlign>,
    visual_head: Linear,
    linguistic_head: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    modules: Modules,
    pub params: ParamStore,
}

/// Traced outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `T × (V+1)` log-probabilities from the fused visual stream.
    pub visual: Var,
    /// `T × (V+1)` log-probabilities from the fused linguistic stream.
    pub linguistic: Option<Var>,
    /// Cross-attention maps of lip and hand.
    pub maps: Option<(Var, Var)>,
}

/// Scalar loss node plus its branch values.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub total: Var,
    pub visual: f64,
    pub linguistic: Option<f64>,
}

/// Eager decoding result for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub maps: Option<[AttentionMap; 2]>,
}

impl Model {
    /// Builds and initializes the variant `cfg.ablation`; initialization
    /// depends only on `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || cfg.vocab == 0 || cfg.ff_mult == 0 {
            return Err(Error::Config("dim, vocab and ff_mult must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut ps = ParamStore::new();
        let (d, classes, hidden) = (cfg.dim, cfg.vocab + 1, cfg.ff_mult * cfg.dim);
        let a = cfg.ablation;
        let codebook = if a.uses_codebook() {
            let cb = Codebook::new(&mut ps, "codebook", cfg.bases, d, cfg.temperature, &mut rng)?;
            let proj = LinguisticProjection::new(&mut ps, "projection", d, cfg.ratio, &mut rng)?;
            Some((cb, proj))
        } else {
            None
        };
        let encoder = match a.encoder_mode() {
            Some(mode) => Some(Encoder::new(&mut ps, "encoder", cfg.layers, d, cfg.heads, hidden, mode, &mut rng)?),
            None => None,
        };
        let align = if a.uses_alignment() {
            Some(CrossAlign::new(&mut ps, "align", d, cfg.align_heads, hidden, &mut rng)?)
        } else {
            None
        };
        let visual_head = Linear::new(&mut ps, "head.visual", 2 * d, classes, true, &mut rng)?;
        let linguistic_head = if a.uses_codebook() {
            Some(Linear::new(&mut ps, "head.linguistic", d, classes, true, &mut rng)?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            modules: Modules {
                codebook,
                encoder,
                align,
                visual_head,
                linguistic_head,
            },
            params: ps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, tr: &mut Trace, lip: &Tensor, hand: &Tensor) -> Result<Forward> {
        self.forward_with(tr, &self.params, lip, hand)
    }

    /// Forward pass reading parameters from `ps`, which must have been
    /// created by this model (for finite differences over a detached store).
    pub fn forward_with(&self, tr: &mut Trace, ps: &ParamStore, lip: &Tensor, hand: &Tensor) -> Result<Forward> {
        let m = &self.modules;
        for (name, t) in [("lip", lip), ("hand", hand)] {
            if t.rank() != 2 || t.cols() != self.cfg.dim {
                return Err(Error::shape(
                    "model_forward",
                    format!("{name} features {:?} do not have {} columns", t.shape(), self.cfg.dim),
                ));
            }
        }
        let frames = lip.rows();
        let z_lip = tr.input(lip.clone())?;
        let z_hand = tr.input(hand.clone())?;

        // per-modality compressed linguistic tokens
        let compressed = match &m.codebook {
            Some((cb, proj)) => {
                let vl = cb.lookup(tr, ps, z_lip)?.tokens;
                let vh = cb.lookup(tr, ps, z_hand)?.tokens;
                Some((proj.down(tr, ps, vl)?, proj.down(tr, ps, vh)?))
            }
            None => None,
        };

        let (z_lip, z_hand, v_fused) = match &m.encoder {
            None => (z_lip, z_hand, None),
            Some(enc) => {
                let (vl, vh) = match (enc.mode, compressed) {
                    (EncoderMode::VisualOnly, _) | (_, None) => (None, None),
                    (_, Some((vl, vh))) => (Some(vl), Some(vh)),
                };
                let out = enc.encode(tr, ps, z_lip, z_hand, vl, vh)?;
                let fused = match (out.v_fused, compressed) {
                    (Some(v), _) => Some(v),
                    (None, Some((vl, vh))) => Some(fuse_linguistic(tr, vl, vh)?),
                    (None, None) => None,
                };
                (out.z_lip, out.z_hand, fused)
            }
        };

        let v_full = match (v_fused, &m.codebook) {
            (Some(v), Some((_, proj))) => Some(proj.up(tr, ps, v, frames)?),
            _ => None,
        };

        let (z_lip, z_hand, maps) = match (&m.align, v_full) {
            (Some(ca), Some(v)) => {
                let l = ca.forward(tr, ps, z_lip, v)?;
                let h = ca.forward(tr, ps, z_hand, v)?;
                (l.tokens, h.tokens, Some((l.map, h.map)))
            }
            _ => (z_lip, z_hand, None),
        };

        let fused = fuse_streams(tr, z_lip, z_hand)?;
        let logits = m.visual_head.forward(tr, ps, fused)?;
        let visual = tr.log_softmax(logits)?;
        let linguistic = match (&m.linguistic_head, v_full) {
            (Some(head), Some(v)) => {
                let logits = head.forward(tr, ps, v)?;
                Some(tr.log_softmax(logits)?)
            }
            _ => None,
        };
        Ok(Forward {
            visual,
            linguistic,
            maps,
        })
    }

    /// Visual CTC, plus linguistic CTC when that branch exists.
    pub fn loss(&self, tr: &mut Trace, fwd: &Forward, target: &CtcTarget) -> Result<Loss> {
        match fwd.linguistic {
            Some(ling) => {
                let h = hybrid_loss(tr, fwd.visual, ling, target)?;
                Ok(Loss {
                    total: h.total,
                    visual: h.visual,
                    linguistic: Some(h.linguistic),
                })
            }
            None => {
                let total = ctc_nll(tr, fwd.visual, target)?;
                Ok(Loss {
                    total,
                    visual: tr.value(total).item(),
                    linguistic: None,
                })
            }
        }
    }

    /// Greedy decoding of the visual branch.
    pub fn predict(&self, lip: &Tensor, hand: &Tensor) -> Result<Prediction> {
        let mut tr = Trace::new();
        let fwd = self.forward(&mut tr, lip, hand)?;
        let labels = greedy_decode(tr.value(fwd.visual));
        let maps = fwd.maps.map(|(l, h)| {
            [
                AttentionMap {
                    modality: Modality::Lip,
                    weights: tr.value(l).clone(),
                },
                AttentionMap {
                    modality: Modality::Hand,
                    weights: tr.value(h).clone(),
                },
            ]
        });
        Ok(Prediction { labels, maps })
    }
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Modality};
use crate::layers::Linear;
use crate::numerics::{init, ParamId, ParamStore, Tensor, Trace, Var};

/// Spatio-temporal kernel of the first layer: frames × height × width.
pub const STEM_KERNEL: [usize; 3] = [5, 3, 3];
const BLOCK_KERNEL: [usize; 3] = [1, 3, 3];

/// `T × H × W` single-channel frames of one modality, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub modality: Modality,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl RawClip {
    pub fn new(
        modality: Modality,
        frames: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::shape("raw_clip", "clip has no frames"));
        }
        if height < STEM_KERNEL[1] || width < STEM_KERNEL[2] {
            return Err(Error::shape(
                "raw_clip",
                format!("{height}×{width} frames are smaller than the 3×3 kernel"),
            ));
        }
        if pixels.len() != frames * height * width {
            return Err(Error::shape(
                "raw_clip",
                format!("{} pixels for {frames}×{height}×{width}", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::shape("raw_clip", "pixel values must lie in [0, 1]"));
        }
        Ok(RawClip {
            modality,
            frames,
            height,
            width,
            pixels,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv3d {
    weight: ParamId,
    bias: ParamId,
    kernel: [usize; 3],
    in_channels: usize,
}

impl Conv3d {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel.iter().product::<usize>() * in_channels;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Conv3d {
            weight: store.insert(
                format!("{name}.weight"),
                init::normal(rng, &[fan_in, out_channels], std)?,
            )?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([1, out_channels])?)?,
            kernel,
            in_channels,
        })
    }

    /// Input and output are `(T·H·W) × C` with zero "same" padding on every
    /// axis, so the frame count is preserved.
    fn forward(
        &self,
        tr: &mut Trace,
        ps: &ParamStore,
        x: Var,
        dims: [usize; 3],
    ) -> Result<Var> {
        let [kt, kh, kw] = self.kernel;
        let [t_len, h_len, w_len] = dims;
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        let c = self.in_channels;
        let cols = kt * kh * kw * c;
        let rows = t_len * h_len * w_len;
        let mut index = Vec::with_capacity(rows * cols);
        for t in 0..t_len {
            for y in 0..h_len {
                for xx in 0..w_len {
                    for dt in 0..kt {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let st = (t + dt) as isize - pt as isize;
                                let sy = (y + dy) as isize - ph as isize;
                                let sx = (xx + dx) as isize - pw as isize;
                                let inside = st >= 0
                                    && sy >= 0
                                    && sx >= 0
                                    && (st as usize) < t_len
                                    && (sy as usize) < h_len
                                    && (sx as usize) < w_len;
                                for ch in 0..c {
                                    index.push(inside.then(|| {
                                        ((st as usize * h_len + sy as usize) * w_len
                                            + sx as usize)
                                            * c
                                            + ch
                                    }));
                                }
                            }
                        }
                    }
                }
            }
        }
        let patches = tr.gather(x, &[rows, cols], index)?;
        let w = tr.param(ps, self.weight)?;
        let y = tr.matmul(patches, w)?;
        let b = tr.param(ps, self.bias)?;
        tr.add_row(y, b)
    }
}

/// 5×3×3 stem, two 1×3×3 blocks, global spatial average pooling and a
/// linear map to the feature dimension.
#[derive(Debug, Clone, Copy)]
pub struct ConvFrontend {
    stem: Conv3d,
    blocks: [Conv3d; 2],
    proj: Linear,
    pub channels: usize,
    pub dim: usize,
}

impl ConvFrontend {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvFrontend {
            stem: Conv3d::new(store, &format!("{name}.stem"), STEM_KERNEL, 1, channels, rng)?,
            blocks: [
                Conv3d::new(store, &format!("{name}.block0"), BLOCK_KERNEL, channels, channels, rng)?,
                Conv3d::new(store, &format!("{name}.block1"), BLOCK_KERNEL, channels, channels, rng)?,
            ],
            proj: Linear::new(store, &format!("{name}.proj"), channels, dim, true, rng)?,
            channels,
            dim,
        })
    }

    /// `T × d` features, one row per input frame.
    pub fn extract_features(&self, tr: &mut Trace, ps: &ParamStore, clip: &RawClip) -> Result<Var> {
        let dims = [clip.frames, clip.height, clip.width];
        let x = tr.input(Tensor::new(
            [clip.frames * clip.height * clip.width, 1],
            clip.pixels.clone(),
        )?)?;
        let mut h = self.stem.forward(tr, ps, x, dims)?;
        h = tr.gelu(h)?;
        for block in &self.blocks {
            h = block.forward(tr, ps, h, dims)?;
            h = tr.gelu(h)?;
        }
        let spatial = clip.height * clip.width;
        let h = tr.reshape(h, &[clip.frames, spatial, self.channels])?;
        let pooled = tr.mean_axis(h, 1)?;
        self.proj.forward(tr, ps, pooled)
    }

    pub fn extract(&self, ps: &ParamStore, clip: &RawClip) -> Result<FeatureSequence> {
        let mut tr = Trace::new();
        let out = self.extract_features(&mut tr, ps, clip)?;
        FeatureSequence::new(clip.modality, tr.value(out).clone())
    }
}

/// One convolution stack shared by every modality, or one per modality.
#[derive(Debug, Clone)]
pub struct Frontend {
    nets: Vec<(Option<Modality>, ConvFrontend)>,
}

impl Frontend {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        channels: usize,
        dim: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let nets = if shared {
            vec![(None, ConvFrontend::new(store, "frontend", channels, dim, rng)?)]
        } else {
            [Modality::Lip, Modality::HandShape, Modality::HandPosition]
                .into_iter()
                .map(|m| {
                    let net = ConvFrontend::new(store, &format!("frontend.{}", m.name()), channels, dim, rng)?;
                    Ok((Some(m), net))
                })
                .collect::<Result<_>>()?
        };
        Ok(Frontend { nets })
    }

    pub fn for_modality(&self, m: Modality) -> &ConvFrontend {
        self.nets
            .iter()
            .find(|(owner, _)| owner.is_none() || *owner == Some(m))
            .map(|(_, net)| net)
            .unwrap_or(&self.nets[0].1)
    }
}

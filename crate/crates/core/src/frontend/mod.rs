//! Per-frame visual features for the lip and hand streams.
//!
//! Features either come from precomputed files ([`load_features`]) or from a
//! small spatio-temporal convolution stack over single-channel frame grids
//! ([`ConvFrontend`]). Hand-shape and hand-position features are fused by
//! element-wise addition.

mod conv;
mod format;

pub use conv::{ConvFrontend, Frontend, RawClip};
pub use format::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Visual stream identifier; the discriminant is the on-disk modality byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Modality {
    Lip = 0,
    HandShape = 1,
    HandPosition = 2,
    /// Hand shape and position already fused.
    Hand = 3,
}

impl Modality {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Modality::Lip),
            1 => Ok(Modality::HandShape),
            2 => Ok(Modality::HandPosition),
            3 => Ok(Modality::Hand),
            other => Err(Error::FeatureModality(other)),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lip => "lip",
            Modality::HandShape => "hand_shape",
            Modality::HandPosition => "hand_position",
            Modality::Hand => "hand",
        }
    }
}

/// `T × d` frame-wise features of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::shape(
                "feature_sequence",
                format!("expected T × d, got {:?}", features.shape()),
            ));
        }
        Ok(FeatureSequence { modality, features })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// How the hand stream is formed from its shape and position parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HandFusion {
    /// `z_h = z_g ⊕ z_p`.
    #[default]
    Add,
    /// The hand region already carries position: `z_h = z_g`.
    RoiOnly,
}

/// Element-wise sum of hand-shape and hand-position features.
pub fn fuse_hand(shape: &FeatureSequence, position: &FeatureSequence) -> Result<FeatureSequence> {
    fuse_hand_with(shape, position, HandFusion::Add)
}

pub fn fuse_hand_with(
    shape: &FeatureSequence,
    position: &FeatureSequence,
    mode: HandFusion,
) -> Result<FeatureSequence> {
    if shape.features.shape() != position.features.shape() {
        return Err(Error::shape(
            "fuse_hand",
            format!("{:?} vs {:?}", shape.features.shape(), position.features.shape()),
        ));
    }
    let features = match mode {
        HandFusion::Add => {
            let data = shape
                .features
                .data()
                .iter()
                .zip(position.features.data())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(shape.features.shape().to_vec(), data)?
        }
        HandFusion::RoiOnly => shape.features.clone(),
    };
    FeatureSequence::new(Modality::Hand, features)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn seq(m: Modality, rows: &[[f64; 2]]) -> FeatureSequence {
        FeatureSequence::new(m, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn forced_arithmetic() {
        let g = seq(Modality::HandShape, &[[1.0, 2.0], [3.0, 4.0]]);
        let p = seq(Modality::HandPosition, &[[10.0, 20.0], [30.0, 40.0]]);
        let h = fuse_hand(&g, &p).unwrap();
        assert_eq!(h.modality, Modality::Hand);
        assert_eq!(h.features.data(), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn zero_position_and_negation() {
        let g = seq(Modality::HandShape, &[[1.5, -2.0]]);
        let zero = seq(Modality::HandPosition, &[[0.0, 0.0]]);
        assert_eq!(fuse_hand(&g, &zero).unwrap().features, g.features);
        let neg = seq(Modality::HandPosition, &[[-1.5, 2.0]]);
        assert!(fuse_hand(&g, &neg).unwrap().features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roi_only_keeps_shape_stream() {
        let g = seq(Modality::HandShape, &[[1.0, 2.0]]);
        let p = seq(Modality::HandPosition, &[[5.0, 5.0]]);
        let h = fuse_hand_with(&g, &p, HandFusion::RoiOnly).unwrap();
        assert_eq!(h.features, g.features);
    }

    #[test]
    fn shape_mismatch() {
        let g = seq(Modality::HandShape, &[[1.0, 2.0]]);
        let p = seq(Modality::HandPosition, &[[1.0, 2.0], [3.0, 4.0]]);
        assert!(fuse_hand(&g, &p).is_err());
    }

    proptest! {
        #[test]
        fn commutative(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 6)) {
            let g = FeatureSequence::new(Modality::HandShape, Tensor::new([3, 2], a).unwrap()).unwrap();
            let p = FeatureSequence::new(Modality::HandPosition, Tensor::new([3, 2], b).unwrap()).unwrap();
            prop_assert_eq!(fuse_hand(&g, &p).unwrap().features, fuse_hand(&p, &g).unwrap().features);
        }
    }
}

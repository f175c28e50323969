//! Fixtures shared by the kernel benchmarks.

use xcs::ctc::{CtcTarget, LogProbLattice};
use xcs::numerics::Tensor;
use xcs::synthgen::{generate_sample, GeneratorConfig, SyntheticSample};

/// Deterministic pseudo-random values in `[-1, 1)` without pulling a RNG
/// into the library.
fn wave(i: usize) -> f64 {
    let x = (i as f64 * 12.9898).sin() * 43_758.545_3;
    2.0 * (x - x.floor()) - 1.0
}

/// A normalized `frames × (vocab + 1)` lattice.
pub fn lattice(frames: usize, vocab: usize) -> LogProbLattice {
    let data = (0..frames * (vocab + 1)).map(|i| 3.0 * wave(i)).collect();
    let logits = Tensor::new([frames, vocab + 1], data).expect("consistent shape");
    LogProbLattice::from_logits(&logits).expect("finite logits")
}

/// Labels `1..=vocab` cycling with stride 7, `len` long.
pub fn target(len: usize, vocab: usize) -> CtcTarget {
    CtcTarget::new((0..len).map(|i| 1 + (i * 7) % vocab).collect()).expect("non-empty labels")
}

/// One sentence from the standard benchmark generator.
pub fn sentence(dim: usize, index: u64) -> SyntheticSample {
    let cfg = GeneratorConfig { dim, seed: 11, ..GeneratorConfig::default() };
    generate_sample(&cfg, index).expect("valid generator config")
}

/// Two label strings of length `len` that differ at roughly a third of
/// their positions.
pub fn label_pair(len: usize) -> (Vec<u32>, Vec<u32>) {
    let a: Vec<u32> = (0..len).map(|i| (i % 40) as u32).collect();
    let b = a.iter().enumerate().map(|(i, &x)| if wave(i) > 0.33 { x + 1 } else { x }).collect();
    (a, b)
}

//! Synthetic asynchronous lip/hand streams.
//!
//! Phoneme `p` is cued by the pair `(p mod n_lip, p / n_lip)`: the lip class
//! alone or the hand class alone is ambiguous, the pair is not. Each phoneme
//! occupies a run of frames on the lip timeline, and the hand switches to the
//! phoneme's class a few frames earlier, as hands do when they prepare the
//! next cue. Classes are embedded into `d` dimensions by fixed seed-derived
//! vectors and perturbed by Gaussian noise.

mod dataset;

pub use dataset::{generate_split, Dataset, Example, Manifest, ManifestEntry, SplitSummary};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Modality};
use crate::numerics::Tensor;

/// RNG stream reserved for the class embeddings; samples use their index.
const EMBEDDING_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Number of phonemes; CTC labels are `1..=vocab`.
    pub vocab: usize,
    pub n_lip: usize,
    /// Feature dimension of both streams.
    pub dim: usize,
    /// Inclusive range of frames per phoneme.
    pub duration: (usize, usize),
    /// Inclusive range of the hand lead in frames.
    pub lag: (usize, usize),
    pub sigma: f64,
    /// Inclusive range of phonemes per sentence.
    pub length: (usize, usize),
    /// Inclusive range of phonemes per word.
    pub word_length: (usize, usize),
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab: 40,
            n_lip: 8,
            dim: 64,
            duration: (2, 5),
            lag: (1, 3),
            sigma: 0.1,
            length: (4, 8),
            word_length: (1, 3),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_hand(&self) -> usize {
        self.vocab.div_ceil(self.n_lip.max(1))
    }

    /// A lead longer than one more than the shortest phoneme would let the
    /// hand skip a whole phoneme.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.n_lip == 0 || self.dim == 0 {
            return bad("vocab, n_lip and dim must be positive".into());
        }
        if self.n_lip * self.n_hand() < self.vocab {
            return bad(format!("{} lip x {} hand classes cannot cover {} phonemes", self.n_lip, self.n_hand(), self.vocab));
        }
        let ranges = [("duration", self.duration), ("lag", self.lag), ("length", self.length), ("word_length", self.word_length)];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if self.duration.0 == 0 || self.length.0 == 0 || self.word_length.0 == 0 {
            return bad("durations, sentence and word lengths must be at least 1".into());
        }
        if self.lag.1 > self.duration.0 + 1 {
            return bad(format!(
                "maximum lag {} exceeds shortest phoneme duration {} plus one",
                self.lag.1, self.duration.0
            ));
        }
        if self.vocab < 2 && self.length.1 > 1 {
            return bad("sentences without repeated neighbours need at least two phonemes".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn lip_class(&self, phoneme: usize) -> usize {
        phoneme % self.n_lip
    }

    pub fn hand_class(&self, phoneme: usize) -> usize {
        phoneme / self.n_lip
    }

    /// Inverse of the class factorization, when the pair names a phoneme.
    pub fn phoneme_of(&self, lip: usize, hand: usize) -> Option<usize> {
        let p = hand * self.n_lip + lip;
        (lip < self.n_lip && p < self.vocab).then_some(p)
    }
}

/// Noiseless frame-level class schedule of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub lip_classes: Vec<usize>,
    pub hand_classes: Vec<usize>,
    /// Phoneme shown by the lips at each frame.
    pub frame_phonemes: Vec<usize>,
    /// Realized hand lead per phoneme after clamping.
    pub lags: Vec<usize>,
}

/// Lays out phonemes on the lip timeline and starts each hand segment
/// `lags[i]` frames earlier. Starts are clamped so that the first segment
/// begins at frame 0 and every hand segment keeps at least one frame.
pub fn schedule(cfg: &GeneratorConfig, phonemes: &[usize], durations: &[usize], lags: &[usize]) -> Result<Schedule> {
    if phonemes.is_empty() || phonemes.len() != durations.len() || phonemes.len() != lags.len() {
        return Err(Error::Config("schedule needs one duration and lag per phoneme".into()));
    }
    if durations.contains(&0) {
        return Err(Error::Config("phoneme durations must be positive".into()));
    }
    let frames: usize = durations.iter().sum();
    let mut frame_phonemes = Vec::with_capacity(frames);
    let mut lip_starts = Vec::with_capacity(phonemes.len());
    for (&p, &d) in phonemes.iter().zip(durations) {
        lip_starts.push(frame_phonemes.len());
        frame_phonemes.extend(std::iter::repeat(p).take(d));
    }
    let mut hand_starts: Vec<usize> = Vec::with_capacity(phonemes.len());
    for (i, (&s, &l)) in lip_starts.iter().zip(lags).enumerate() {
        let start = match hand_starts.last() {
            None => 0,
            Some(&prev) => s.saturating_sub(l).max(prev + 1),
        };
        debug_assert!(i == 0 || start <= s);
        hand_starts.push(start);
    }
    let mut hand_classes = vec![0; frames];
    for (i, &start) in hand_starts.iter().enumerate() {
        let end = hand_starts.get(i + 1).copied().unwrap_or(frames);
        hand_classes[start..end].fill(cfg.hand_class(phonemes[i]));
    }
    Ok(Schedule {
        lip_classes: frame_phonemes.iter().map(|&p| cfg.lip_class(p)).collect(),
        hand_classes,
        frame_phonemes,
        lags: lip_starts.iter().zip(&hand_starts).map(|(s, h)| s - h).collect(),
    })
}

impl Schedule {
    pub fn frames(&self) -> usize {
        self.lip_classes.len()
    }

    /// Frames whose observed `(lip, hand)` pair differs from the pair of the
    /// phoneme the lips are showing.
    pub fn mismatch_fraction(&self, cfg: &GeneratorConfig) -> f64 {
        let bad = (0..self.frames())
            .filter(|&t| {
                let p = self.frame_phonemes[t];
                (self.lip_classes[t], self.hand_classes[t]) != (cfg.lip_class(p), cfg.hand_class(p))
            })
            .count();
        bad as f64 / self.frames() as f64
    }
}

/// Fixed class embeddings shared by every sample of a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub lip: Tensor,
    pub hand: Tensor,
}

impl Embeddings {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(EMBEDDING_STREAM);
        Ok(Embeddings {
            lip: class_vectors(&mut rng, cfg.n_lip, cfg.dim)?,
            hand: class_vectors(&mut rng, cfg.n_hand(), cfg.dim)?,
        })
    }
}

/// Unit-norm rows, mutually orthogonal whenever `count <= dim`.
fn class_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if rows.len() < dim {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&rows)
}

/// One generated sentence with both streams on a common frame axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub index: u64,
    /// Zero-based phoneme ids.
    pub phonemes: Vec<usize>,
    pub durations: Vec<usize>,
    pub schedule: Schedule,
    /// Exclusive end positions of each word in `phonemes`.
    pub word_ends: Vec<usize>,
    pub lip: FeatureSequence,
    pub hand: FeatureSequence,
}

impl SyntheticSample {
    /// CTC labels: phonemes shifted past the blank.
    pub fn labels(&self) -> Vec<usize> {
        self.phonemes.iter().map(|p| p + 1).collect()
    }

    pub fn frames(&self) -> usize {
        self.schedule.frames()
    }

    pub fn lags(&self) -> &[usize] {
        &self.schedule.lags
    }
}

/// Generator bound to one configuration and its embeddings.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    embeddings: Embeddings,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let embeddings = Embeddings::new(&cfg)?;
        Ok(Generator { cfg, embeddings })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    /// Sample `index`; its randomness depends only on the seed and the index.
    /// Neighbouring phonemes always differ.
    pub fn sample(&self, index: u64) -> Result<SyntheticSample> {
        let cfg = &self.cfg;
        let mut rng = sample_rng(cfg.seed, index);
        let len = rng.gen_range(cfg.length.0..=cfg.length.1);
        let mut phonemes: Vec<usize> = Vec::with_capacity(len);
        while phonemes.len() < len {
            let p = rng.gen_range(0..cfg.vocab);
            if phonemes.last() != Some(&p) {
                phonemes.push(p);
            }
        }
        let durations: Vec<usize> = (0..len).map(|_| rng.gen_range(cfg.duration.0..=cfg.duration.1)).collect();
        let lags: Vec<usize> = (0..len).map(|_| rng.gen_range(cfg.lag.0..=cfg.lag.1)).collect();
        let mut word_ends = Vec::new();
        let mut end = 0;
        while end < len {
            end = (end + rng.gen_range(cfg.word_length.0..=cfg.word_length.1)).min(len);
            word_ends.push(end);
        }
        let schedule = schedule(cfg, &phonemes, &durations, &lags)?;
        let lip = self.render(&mut rng, &self.embeddings.lip, &schedule.lip_classes, Modality::Lip)?;
        let hand = self.render(&mut rng, &self.embeddings.hand, &schedule.hand_classes, Modality::Hand)?;
        Ok(SyntheticSample {
            index,
            phonemes,
            durations,
            schedule,
            word_ends,
            lip,
            hand,
        })
    }

    /// Embeds a class per frame, adds noise, and narrows to `f32` precision so
    /// that feature files reproduce the sample exactly.
    fn render(&self, rng: &mut ChaCha8Rng, table: &Tensor, classes: &[usize], modality: Modality) -> Result<FeatureSequence> {
        let dim = self.cfg.dim;
        let mut data = Vec::with_capacity(classes.len() * dim);
        for &c in classes {
            for &e in table.row(c) {
                let noise: f64 = StandardNormal.sample(rng);
                data.push((e + self.cfg.sigma * noise) as f32 as f64);
            }
        }
        FeatureSequence::new(modality, Tensor::new([classes.len(), dim], data)?)
    }

    /// Splits a sample's hand stream into shape and position sub-streams whose
    /// element-wise sum is the hand stream up to `f32` rounding.
    pub fn hand_substreams(&self, sample: &SyntheticSample) -> Result<(FeatureSequence, FeatureSequence)> {
        let mut rng = sample_rng(self.cfg.seed, sample.index);
        rng.set_word_pos(1 << 40);
        let hand = &sample.hand.features;
        let mut shape = Vec::with_capacity(hand.numel());
        let mut position = Vec::with_capacity(hand.numel());
        for &h in hand.data() {
            let split: f64 = StandardNormal.sample(&mut rng);
            let s = (0.5 * h + 0.5 * split) as f32 as f64;
            shape.push(s);
            position.push((h - s) as f32 as f64);
        }
        let dims = hand.shape().to_vec();
        Ok((
            FeatureSequence::new(Modality::HandShape, Tensor::new(dims.clone(), shape)?)?,
            FeatureSequence::new(Modality::HandPosition, Tensor::new(dims, position)?)?,
        ))
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Convenience wrapper: builds a generator and draws one sample.
pub fn generate_sample(cfg: &GeneratorConfig, index: u64) -> Result<SyntheticSample> {
    Generator::new(cfg.clone())?.sample(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{collapse, CtcTarget};
    use crate::frontend::fuse_hand;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            dim: 16,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn defaults_mirror_the_cue_alphabet() {
        let c = GeneratorConfig::default();
        assert_eq!((c.vocab, c.n_lip, c.n_hand()), (40, 8, 5));
        assert_eq!((c.duration, c.lag), ((2, 5), (1, 3)));
        c.validate().unwrap();
    }

    #[test]
    fn class_mapping_forces_shared_hand_class() {
        let c = cfg();
        let s = schedule(&c, &[0, 1], &[2, 2], &[0, 0]).unwrap();
        assert_eq!(s.lip_classes, vec![0, 0, 1, 1]);
        assert_eq!(s.hand_classes, vec![0, 0, 0, 0]);
        assert_eq!(s.mismatch_fraction(&c), 0.0);
    }

    #[test]
    fn hand_transitions_lead_the_lips() {
        let c = cfg();
        // phoneme 9 has hand class 1, so the hand transition is visible
        let s = schedule(&c, &[0, 9], &[2, 2], &[1, 1]).unwrap();
        assert_eq!(s.lip_classes, vec![0, 0, 1, 1]);
        assert_eq!(s.hand_classes, vec![0, 1, 1, 1]);
        assert_eq!(s.lags, vec![0, 1]);
        assert_eq!(s.mismatch_fraction(&c), 0.25);
    }

    #[test]
    fn hand_segments_never_vanish() {
        let c = cfg();
        // lags 1 then 3 over 2-frame phonemes would start both segments at frame 1
        let s = schedule(&c, &[0, 8, 16], &[2, 2, 2], &[1, 1, 3]).unwrap();
        assert_eq!(s.hand_classes, vec![0, 1, 2, 2, 2, 2]);
        assert_eq!(s.lags, vec![0, 1, 2]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            GeneratorConfig { lag: (1, 4), ..cfg() },
            GeneratorConfig { duration: (3, 2), ..cfg() },
            GeneratorConfig { vocab: 0, ..cfg() },
            GeneratorConfig { sigma: -1.0, ..cfg() },
            GeneratorConfig { length: (0, 3), ..cfg() },
        ] {
            assert!(matches!(Generator::new(bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn samples_are_deterministic_and_independent_of_order() {
        let g = Generator::new(GeneratorConfig { seed: 42, ..cfg() }).unwrap();
        let a = g.sample(3).unwrap();
        let _ = g.sample(7).unwrap();
        let b = Generator::new(GeneratorConfig { seed: 42, ..cfg() }).unwrap().sample(3).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.lip.features.data().iter().zip(b.lip.features.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_ne!(g.sample(4).unwrap().phonemes, a.phonemes);
        let other = Generator::new(GeneratorConfig { seed: 43, ..cfg() }).unwrap().sample(3).unwrap();
        assert_ne!(other, a);
    }

    #[test]
    fn sample_structure() {
        let c = cfg();
        let g = Generator::new(c.clone()).unwrap();
        for i in 0..50 {
            let s = g.sample(i).unwrap();
            assert_eq!(s.lip.frames(), s.hand.frames());
            assert_eq!(s.lip.frames(), s.durations.iter().sum::<usize>());
            assert!(s.phonemes.windows(2).all(|w| w[0] != w[1]));
            assert_eq!(*s.word_ends.last().unwrap(), s.phonemes.len());
            assert!(s.word_ends.windows(2).all(|w| w[0] < w[1]));
            assert!(s.lags().iter().all(|&l| l <= c.lag.1));
            let target = CtcTarget::new(s.labels()).unwrap();
            assert!(s.frames() >= target.min_frames());
            // noiseless class pairs recover every label
            for (t, &p) in s.schedule.frame_phonemes.iter().enumerate() {
                assert_eq!(c.phoneme_of(s.schedule.lip_classes[t], c.hand_class(p)), Some(p));
            }
        }
    }

    #[test]
    fn embeddings_are_orthonormal_when_possible() {
        let e = Embeddings::new(&cfg()).unwrap();
        for table in [&e.lip, &e.hand] {
            for i in 0..table.rows() {
                for j in 0..table.rows() {
                    let dot: f64 = table.row(i).iter().zip(table.row(j)).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noiseless_synchronous_streams_are_trivially_decodable() {
        let c = GeneratorConfig { sigma: 0.0, lag: (0, 0), ..cfg() };
        let g = Generator::new(c.clone()).unwrap();
        let e = g.embeddings();
        let nearest = |table: &Tensor, x: &[f64]| {
            (0..table.rows())
                .max_by(|&a, &b| {
                    let da: f64 = table.row(a).iter().zip(x).map(|(p, q)| p * q).sum();
                    let db: f64 = table.row(b).iter().zip(x).map(|(p, q)| p * q).sum();
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        for i in 0..20 {
            let s = g.sample(i).unwrap();
            let path: Vec<usize> = (0..s.frames())
                .map(|t| {
                    let l = nearest(&e.lip, s.lip.features.row(t));
                    let h = nearest(&e.hand, s.hand.features.row(t));
                    c.phoneme_of(l, h).unwrap() + 1
                })
                .collect();
            assert_eq!(collapse(&path), s.labels());
        }
    }

    #[test]
    fn lagged_streams_mismatch_near_boundaries() {
        let g = Generator::new(cfg()).unwrap();
        let total: f64 = (0..20).map(|i| g.sample(i).unwrap().schedule.mismatch_fraction(g.config())).sum();
        assert!(total > 0.0);
        let sync = Generator::new(GeneratorConfig { lag: (0, 0), ..cfg() }).unwrap();
        assert_eq!(sync.sample(0).unwrap().schedule.mismatch_fraction(sync.config()), 0.0);
    }

    #[test]
    fn either_class_alone_is_ambiguous() {
        let c = GeneratorConfig::default();
        assert!(c.vocab > c.n_lip && c.vocab > c.n_hand());
        assert_eq!(c.lip_class(3), c.lip_class(11));
        assert_eq!(c.hand_class(3), c.hand_class(4));
        let pairs: std::collections::HashSet<_> = (0..c.vocab).map(|p| (c.lip_class(p), c.hand_class(p))).collect();
        assert_eq!(pairs.len(), c.vocab);
    }

    #[test]
    fn substreams_fuse_back_to_the_hand_stream() {
        let g = Generator::new(cfg()).unwrap();
        let s = g.sample(5).unwrap();
        let (shape, position) = g.hand_substreams(&s).unwrap();
        assert_eq!(shape.modality, Modality::HandShape);
        let fused = fuse_hand(&shape, &position).unwrap();
        assert!(fused.features.max_abs_diff(&s.hand.features) < 1e-6);
    }
}

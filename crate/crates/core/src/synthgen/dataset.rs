//! On-disk datasets: feature files plus tab-separated manifests.
//!
//! Manifest lines read
//! `id<TAB>lip_path<TAB>hand_path<TAB>labels<TAB>word_ends<TAB>lags`, where the
//! last three fields are space-separated integers. Labels are CTC ids
//! (phoneme + 1), word ends are exclusive label positions, and paths are
//! relative to the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Generator, GeneratorConfig, SyntheticSample};
use crate::ctc::CtcTarget;
use crate::error::{Error, Result};
use crate::frontend::{load_features, save_features, Modality};
use crate::numerics::Tensor;

/// RNG stream used to shuffle sample ids before splitting.
const SPLIT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub lip_path: PathBuf,
    pub hand_path: PathBuf,
    pub labels: Vec<usize>,
    pub word_ends: Vec<usize>,
    pub lags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.id,
                e.lip_path.display(),
                e.hand_path.display(),
                join(&e.labels),
                join(&e.word_ends),
                join(&e.lags)
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(n, format!("expected 6 tab-separated fields, found {}", fields.len())));
            }
            let ints = |s: &str, what: &str| -> Result<Vec<usize>> {
                s.split_whitespace()
                    .map(|v| v.parse().map_err(|_| err(n, format!("bad {what} value `{v}`"))))
                    .collect()
            };
            let labels = ints(fields[3], "label")?;
            let word_ends = ints(fields[4], "word boundary")?;
            let lags = ints(fields[5], "lag")?;
            if labels.is_empty() || labels.contains(&0) {
                return Err(err(n, "labels must be non-empty and exclude the blank id 0".into()));
            }
            if word_ends.last() != Some(&labels.len()) || word_ends.windows(2).any(|w| w[0] >= w[1]) || word_ends[0] == 0 {
                return Err(err(n, "word boundaries must increase and end at the label count".into()));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                lip_path: PathBuf::from(fields[1]),
                hand_path: PathBuf::from(fields[2]),
                labels,
                word_ends,
                lags,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// One sentence ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub lip: Tensor,
    pub hand: Tensor,
    pub target: CtcTarget,
    pub word_ends: Vec<usize>,
    pub lags: Vec<usize>,
}

impl Example {
    pub fn from_sample(id: String, s: &SyntheticSample) -> Result<Self> {
        Ok(Example {
            id,
            lip: s.lip.features.clone(),
            hand: s.hand.features.clone(),
            target: CtcTarget::new(s.labels())?,
            word_ends: s.word_ends.clone(),
            lags: s.lags().to_vec(),
        })
    }

    pub fn frames(&self) -> usize {
        self.lip.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Reads a manifest and every feature file it names. Feature dimensions
    /// must equal `dim` when given.
    pub fn load(manifest_path: &Path, dim: Option<usize>) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let examples = manifest
            .entries
            .into_iter()
            .map(|e| {
                let lip = load_features(&base.join(&e.lip_path), dim)?;
                let hand = load_features(&base.join(&e.hand_path), dim)?;
                let line_err = |detail: String| Error::Manifest {
                    path: manifest_path.to_path_buf(),
                    line: 0,
                    detail: format!("sample {}: {detail}", e.id),
                };
                if lip.modality != Modality::Lip || hand.modality != Modality::Hand {
                    return Err(line_err("expected lip and fused hand feature files".into()));
                }
                if lip.frames() != hand.frames() || lip.dim() != hand.dim() {
                    return Err(line_err(format!(
                        "lip is {}x{}, hand {}x{}",
                        lip.frames(),
                        lip.dim(),
                        hand.frames(),
                        hand.dim()
                    )));
                }
                Ok(Example {
                    id: e.id,
                    lip: lip.features,
                    hand: hand.features,
                    target: CtcTarget::new(e.labels)?,
                    word_ends: e.word_ends,
                    lags: e.lags,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.lip.cols())
    }

    /// Mean realized hand lead over every phoneme in the set.
    pub fn mean_lag(&self) -> f64 {
        let (sum, n) = self
            .examples
            .iter()
            .flat_map(|e| &e.lags)
            .fold((0usize, 0usize), |(s, n), &l| (s + l, n + 1));
        sum as f64 / n.max(1) as f64
    }
}

/// What [`generate_split`] wrote.
#[derive(Debug, Clone)]
pub struct SplitSummary {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates `count` samples in parallel, shuffles their ids under the seed
/// and splits them 4:1. Features go to `dir/features`, manifests to
/// `dir/train.tsv` and `dir/test.tsv`.
pub fn generate_split(cfg: &GeneratorConfig, count: usize, dir: &Path) -> Result<SplitSummary> {
    if count < 5 {
        return Err(Error::Config(format!("a 4:1 split needs at least 5 samples, got {count}")));
    }
    let generator = Generator::new(cfg.clone())?;
    let samples = generate_all(&generator, count)?;

    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let n_train = count * 4 / 5;
    let (train_ids, test_ids) = order.split_at(n_train);

    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let write = |ids: &[usize], name: &str| -> Result<(PathBuf, Dataset)> {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        let mut manifest = Manifest::default();
        let mut data = Dataset::default();
        for i in sorted {
            let s = &samples[i];
            let id = format!("s{i:05}");
            let lip_rel = PathBuf::from("features").join(format!("{id}.lip.xcsf"));
            let hand_rel = PathBuf::from("features").join(format!("{id}.hand.xcsf"));
            save_features(&s.lip, &dir.join(&lip_rel))?;
            save_features(&s.hand, &dir.join(&hand_rel))?;
            manifest.entries.push(ManifestEntry {
                id: id.clone(),
                lip_path: lip_rel,
                hand_path: hand_rel,
                labels: s.labels(),
                word_ends: s.word_ends.clone(),
                lags: s.lags().to_vec(),
            });
            data.examples.push(Example::from_sample(id, s)?);
        }
        let path = dir.join(name);
        manifest.save(&path)?;
        Ok((path, data))
    };
    let (train_manifest, train) = write(train_ids, "train.tsv")?;
    let (test_manifest, test) = write(test_ids, "test.tsv")?;
    Ok(SplitSummary {
        train_manifest,
        test_manifest,
        train,
        test,
    })
}

/// Draws samples `0..count`, spreading contiguous index ranges over threads.
fn generate_all(generator: &Generator, count: usize) -> Result<Vec<SyntheticSample>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count);
    let chunk = count.div_ceil(threads);
    let parts: Vec<Result<Vec<SyntheticSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..count)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(count);
                scope.spawn(move || (lo..hi).map(|i| generator.sample(i as u64)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

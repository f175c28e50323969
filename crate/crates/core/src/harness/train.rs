//! Single-threaded training loop with one update per sentence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, RngState};
use crate::harness::config::{Configurable, TrainConfig};
use crate::harness::evaluate::evaluate_model;
use crate::harness::optim::{clip_grad_norm, lr_at, Adam};
use crate::model::Model;
use crate::numerics::Trace;
use crate::synthgen::{Dataset, Example};

pub const METRICS_COLUMNS: &str = "epoch,step,train_loss,visual_ctc,linguistic_ctc,test_cer,test_wer,lr";

/// RNG stream for the per-epoch sample order.
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub visual_ctc: f64,
    pub linguistic_ctc: Option<f64>,
    pub test_cer: f64,
    pub test_wer: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_COLUMNS}\n");
    for r in rows {
        let ling = r.linguistic_ctc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{ling},{},{},{}",
            r.epoch, r.step, r.train_loss, r.visual_ctc, r.test_cer, r.test_wer, r.lr
        );
    }
    out
}

/// A sentence the loss could not be computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub id: String,
    pub epoch: usize,
    pub reason: String,
}

/// Model, optimizer and sample-order state between updates.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

/// Mean losses of one pass over the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLosses {
    pub total: f64,
    pub visual: f64,
    pub linguistic: Option<f64>,
    pub skipped: Vec<Skipped>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(&cfg.optim, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Trainer {
            cfg,
            model,
            adam,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        lr_at(self.step.max(1), self.cfg.optim.peak_lr, self.cfg.optim.warmup)
    }

    /// One update on one sentence. Returns `(total, visual, linguistic)` loss.
    pub fn step_on(&mut self, e: &Example) -> Result<(f64, f64, Option<f64>)> {
        let mut tr = Trace::new();
        let fwd = self.model.forward(&mut tr, &e.lip, &e.hand)?;
        let loss = self.model.loss(&mut tr, &fwd, &e.target)?;
        let total = tr.value(loss.total).item();
        self.model.params.zero_grads();
        tr.backward(loss.total, &mut self.model.params)?;
        clip_grad_norm(&mut self.model.params, self.cfg.optim.clip);
        self.step += 1;
        let lr = self.learning_rate();
        self.adam.update(&mut self.model.params, lr);
        Ok((total, loss.visual, loss.linguistic))
    }

    /// One shuffled pass over `data`. Sentences whose target cannot fit
    /// their frame count are skipped and reported.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochLosses> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut visual, mut ling, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut has_ling = false;
        let mut skipped = Vec::new();
        for i in order {
            let e = &data.examples[i];
            match self.step_on(e) {
                Ok((t, v, l)) => {
                    total += t;
                    visual += v;
                    if let Some(l) = l {
                        ling += l;
                        has_ling = true;
                    }
                    n += 1;
                }
                Err(err @ Error::InfeasibleTarget { .. }) => skipped.push(Skipped {
                    id: e.id.clone(),
                    epoch: self.epoch,
                    reason: err.to_string(),
                }),
                Err(err) => return Err(err),
            }
        }
        let d = n.max(1) as f64;
        Ok(EpochLosses {
            total: total / d,
            visual: visual / d,
            linguistic: has_ling.then_some(ling / d),
            skipped,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let rng = RngState {
            seed: self.cfg.seed,
            stream: SHUFFLE_STREAM,
            word_pos: self.rng.get_word_pos(),
        };
        Checkpoint::capture(
            self.cfg.to_text(),
            self.epoch as u64,
            self.step,
            rng,
            &self.model.params,
            &self.adam,
        )
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        ck.restore_params(&mut t.model.params)?;
        ck.restore_optimizer(&t.model.params, &mut t.adam)?;
        t.rng = ChaCha8Rng::seed_from_u64(ck.rng.seed);
        t.rng.set_stream(ck.rng.stream);
        t.rng.set_word_pos(ck.rng.word_pos);
        t.step = ck.step;
        t.epoch = ck.epoch as usize;
        Ok(t)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub skipped: Vec<Skipped>,
    pub best_epoch: usize,
    pub best_cer: f64,
    pub trainer: Trainer,
}

/// Trains for `cfg.epochs` epochs, scoring `test` after each one. With an
/// output directory, writes `metrics.csv` after every epoch, `best.ckpt`
/// whenever test CER improves and `final.ckpt` at the end.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    for (name, d) in [("training", train_set), ("test", test_set)] {
        if d.is_empty() {
            return Err(Error::Config(format!("{name} set is empty")));
        }
        for e in &d.examples {
            for found in [e.lip.cols(), e.hand.cols()] {
                if found != cfg.model.dim {
                    return Err(Error::FeatureDim {
                        expected: cfg.model.dim,
                        found,
                    });
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut skipped = Vec::new();
    let (mut best_epoch, mut best_cer) = (0, f64::INFINITY);
    for _ in 0..cfg.epochs {
        let losses = trainer.train_epoch(train_set)?;
        skipped.extend(losses.skipped);
        let eval = evaluate_model(&trainer.model, test_set, false)?;
        let row = EpochMetrics {
            epoch: trainer.epoch,
            step: trainer.step,
            train_loss: losses.total,
            visual_ctc: losses.visual,
            linguistic_ctc: losses.linguistic,
            test_cer: eval.cer.error_rate,
            test_wer: eval.wer.error_rate,
            lr: trainer.learning_rate(),
        };
        on_epoch(&row);
        let improved = row.test_cer < best_cer;
        if improved {
            best_cer = row.test_cer;
            best_epoch = row.epoch;
        }
        metrics.push(row);
        if let Some(dir) = out_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, metrics_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
            if improved {
                trainer.checkpoint().save(&dir.join("best.ckpt"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        metrics,
        skipped,
        best_epoch,
        best_cer,
        trainer,
    })
}

/// Loads the manifests named in `cfg` and trains into `cfg.out_dir`.
pub fn train_from_config(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    let train_set = Dataset::load(&cfg.train_manifest, Some(cfg.model.dim))?;
    let test_set = Dataset::load(&cfg.test_manifest, Some(cfg.model.dim))?;
    train(cfg, &train_set, &test_set, Some(&cfg.out_dir), on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::CtcTarget;
    use crate::model::Ablation;
    use crate::numerics::Tensor;
    use crate::synthgen::{Generator, GeneratorConfig};

    fn data(count: u64, offset: u64) -> Dataset {
        let g = Generator::new(GeneratorConfig {
            vocab: 6,
            n_lip: 3,
            dim: 8,
            length: (2, 4),
            seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap();
        Dataset {
            examples: (offset..offset + count)
                .map(|i| Example::from_sample(format!("s{i}"), &g.sample(i).unwrap()).unwrap())
                .collect(),
        }
    }

    fn cfg(ablation: Ablation) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model.dim = 8;
        c.model.heads = 2;
        c.model.layers = 1;
        c.model.ff_mult = 2;
        c.model.ratio = 2;
        c.model.bases = 8;
        c.model.vocab = 6;
        c.model.ablation = ablation;
        c.optim.eps = 1e-8;
        c.optim.peak_lr = 3e-3;
        c.optim.warmup = 20;
        c.epochs = 3;
        c
    }

    #[test]
    fn runs_are_reproducible() {
        let (tr, te) = (data(12, 0), data(4, 100));
        let a = train(&cfg(Ablation::Full), &tr, &te, None, |_| {}).unwrap();
        let b = train(&cfg(Ablation::Full), &tr, &te, None, |_| {}).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.trainer.checkpoint().to_bytes(), b.trainer.checkpoint().to_bytes());
        assert!(a.skipped.is_empty());
        assert!(a.metrics.iter().all(|m| m.linguistic_ctc.is_some()));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let tr = data(10, 0);
        let c = cfg(Ablation::SelfAttn);
        let mut straight = Trainer::new(c.clone()).unwrap();
        for _ in 0..3 {
            straight.train_epoch(&tr).unwrap();
        }
        let mut first = Trainer::new(c.clone()).unwrap();
        first.train_epoch(&tr).unwrap();
        let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::resume(c, &ck).unwrap();
        resumed.train_epoch(&tr).unwrap();
        resumed.train_epoch(&tr).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
    }

    #[test]
    fn infeasible_targets_are_counted_not_fatal() {
        let mut tr = data(4, 0);
        tr.examples[1].target = CtcTarget::new(vec![1; 40]).unwrap();
        let mut t = Trainer::new(cfg(Ablation::Concat)).unwrap();
        let losses = t.train_epoch(&tr).unwrap();
        assert_eq!(losses.skipped.len(), 1);
        assert_eq!(losses.skipped[0].id, tr.examples[1].id);
        assert_eq!(t.step, 3);
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, te) = (data(6, 0), data(3, 100));
        let out = train(&cfg(Ablation::CodebookEncoder), &tr, &te, Some(dir.path()), |_| {}).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(METRICS_COLUMNS));
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("best.ckpt").exists());
        let fin = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(fin.step, out.trainer.step);
    }

    #[test]
    fn mismatched_feature_dim_fails_before_training() {
        let mut tr = data(3, 0);
        tr.examples[2].lip = Tensor::zeros([4, 5]).unwrap();
        let c = cfg(Ablation::Full);
        assert!(matches!(
            train(&c, &tr, &tr, None, |_| {}),
            Err(Error::FeatureDim { expected: 8, found: 5 })
        ));
    }
}

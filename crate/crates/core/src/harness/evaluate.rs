//! Decoding and scoring.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::model_config_from_text;
use crate::metrics::{project_words, score_corpus, split_words, EvalReport, Unit};
use crate::model::Model;
use crate::synthgen::{Dataset, Example};
use crate::vla::AttentionMap;

/// Reference, hypothesis and optional attention maps of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub word_ends: Vec<usize>,
    pub lags: Vec<usize>,
    pub maps: Option<[AttentionMap; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cer: EvalReport,
    pub wer: EvalReport,
    pub decoded: Vec<Decoded>,
}

/// Greedy decoding of every example. Samples are spread over threads; the
/// model is only read, and results keep dataset order.
pub fn decode_dataset(model: &Model, data: &Dataset, keep_maps: bool) -> Result<Vec<Decoded>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n);
    let chunk = n.div_ceil(threads);
    let decode = |e: &Example| -> Result<Decoded> {
        let p = model.predict(&e.lip, &e.hand)?;
        Ok(Decoded {
            id: e.id.clone(),
            reference: e.target.labels().to_vec(),
            hypothesis: p.labels,
            word_ends: e.word_ends.clone(),
            lags: e.lags.clone(),
            maps: if keep_maps { p.maps } else { None },
        })
    };
    if threads == 1 {
        return data.examples.iter().map(decode).collect();
    }
    let parts: Vec<Result<Vec<Decoded>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = data
            .examples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(decode).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decoder thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Corpus CER over labels and WER over words. Hypothesis words come from
/// aligning the hypothesis to the reference and cutting it at the
/// reference's word boundaries.
pub fn score(decoded: &[Decoded]) -> Result<(EvalReport, EvalReport)> {
    let chars: Vec<_> = decoded
        .iter()
        .map(|d| (d.id.clone(), d.reference.clone(), d.hypothesis.clone()))
        .collect();
    let words: Vec<_> = decoded
        .iter()
        .map(|d| {
            let r = split_words(&d.reference, &d.word_ends);
            let h: Vec<Vec<usize>> = project_words(&d.reference, &d.word_ends, &d.hypothesis)
                .into_iter()
                .filter(|w| !w.is_empty())
                .collect();
            (d.id.clone(), r, h)
        })
        .collect();
    Ok((score_corpus(&chars, Unit::Char)?, score_corpus(&words, Unit::Word)?))
}

pub fn evaluate_model(model: &Model, data: &Dataset, keep_maps: bool) -> Result<Evaluation> {
    let decoded = decode_dataset(model, data, keep_maps)?;
    let (cer, wer) = score(&decoded)?;
    Ok(Evaluation { cer, wer, decoded })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let cfg = model_config_from_text(&ck.config)?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    ck.restore_params(&mut model.params)?;
    Ok(model)
}

/// Loads a checkpoint and the dataset named by `manifest`, checking feature
/// dimensions before any inference.
pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, keep_maps: bool) -> Result<Evaluation> {
    let ck = Checkpoint::load(ckpt)?;
    let model = model_from_checkpoint(&ck)?;
    let data = Dataset::load(manifest, Some(model.config().dim))?;
    evaluate_model(&model, &data, keep_maps)
}

/// Mean argmax offset of the lip and hand cross-attention maps over every
/// decoded sentence that kept its maps.
pub fn alignment_offsets(decoded: &[Decoded]) -> Option<(f64, f64)> {
    let maps: Vec<&[AttentionMap; 2]> = decoded.iter().filter_map(|d| d.maps.as_ref()).collect();
    if maps.is_empty() {
        return None;
    }
    let n = maps.len() as f64;
    let lip = maps.iter().map(|m| m[0].mean_argmax_offset()).sum::<f64>() / n;
    let hand = maps.iter().map(|m| m[1].mean_argmax_offset()).sum::<f64>() / n;
    Some((lip, hand))
}

/// Writes `<id>.lip.csv` and `<id>.hand.csv` per sentence into `dir`.
pub fn export_attention(decoded: &[Decoded], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for d in decoded {
        let Some(maps) = &d.maps else { continue };
        for (map, tag) in maps.iter().zip(["lip", "hand"]) {
            let path = dir.join(format!("{}.{tag}.csv", d.id));
            map.export_csv(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

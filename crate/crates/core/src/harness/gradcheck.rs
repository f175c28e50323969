//! Finite-difference checks over every differentiable stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, LinguisticProjection};
use crate::ctc::{ctc_nll, CtcTarget};
use crate::encoder::{Encoder, EncoderMode};
use crate::error::Result;
use crate::frontend::{ConvFrontend, Modality, RawClip};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::{grad_check, init, ParamId, ParamStore, Trace, Var};
use crate::vla::CrossAlign;

/// Central-difference step used by the suite.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Largest relative gradient error seen for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub module: &'static str,
    pub max_rel_error: f64,
}

/// Random weighting of an output so every entry reaches the loss with a
/// distinct coefficient.
fn weighted_sum(tr: &mut Trace, ps: &ParamStore, w: ParamId, x: Var) -> Result<Var> {
    let w = tr.param(ps, w)?;
    let p = tr.mul(x, w)?;
    tr.sum(p)
}

fn run(
    module: &'static str,
    ps: &mut ParamStore,
    f: impl Fn(&mut Trace, &ParamStore) -> Result<Var>,
) -> Result<GradReport> {
    let ids: Vec<ParamId> = ps.ids().collect();
    let max_rel_error = grad_check(ps, &ids, GRADCHECK_STEP, f)?;
    Ok(GradReport { module, max_rel_error })
}

/// Runs every check with `d ≤ 8` and `T ≤ 6`, deterministic in `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // front-end convolutions over a tiny clip
    {
        let mut ps = ParamStore::new();
        let net = ConvFrontend::new(&mut ps, "frontend", 2, 4, &mut rng)?;
        let w = ps.insert("w", init::normal(&mut rng, &[6, 4], 1.0)?)?;
        let pixels = (0..6 * 4 * 4).map(|_| rng.gen::<f64>()).collect();
        let clip = RawClip::new(Modality::Lip, 6, 4, 4, pixels)?;
        reports.push(run("frontend", &mut ps, |tr, ps| {
            let z = net.extract_features(tr, ps, &clip)?;
            weighted_sum(tr, ps, w, z)
        })?);
    }

    // codebook lookup with the features as parameters
    {
        let mut ps = ParamStore::new();
        let cb = Codebook::new(&mut ps, "codebook", 6, 4, 1.0, &mut rng)?;
        let z = ps.insert("z", init::normal(&mut rng, &[5, 4], 1.0)?)?;
        let w = ps.insert("w", init::normal(&mut rng, &[5, 4], 1.0)?)?;
        reports.push(run("codebook", &mut ps, |tr, ps| {
            let zv = tr.param(ps, z)?;
            let v = cb.lookup(tr, ps, zv)?.tokens;
            weighted_sum(tr, ps, w, v)
        })?);
    }

    // down then up projection
    {
        let mut ps = ParamStore::new();
        let proj = LinguisticProjection::new(&mut ps, "projection", 4, 2, &mut rng)?;
        let v = ps.insert("v", init::normal(&mut rng, &[5, 4], 1.0)?)?;
        let w = ps.insert("w", init::normal(&mut rng, &[5, 4], 1.0)?)?;
        reports.push(run("projection", &mut ps, |tr, ps| {
            let vv = tr.param(ps, v)?;
            let down = proj.down(tr, ps, vv)?;
            let up = proj.up(tr, ps, down, 5)?;
            weighted_sum(tr, ps, w, up)
        })?);
    }

    // one fused encoder layer
    {
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "encoder", 1, 8, 2, 16, EncoderMode::Fused, &mut rng)?;
        let inputs: Vec<ParamId> = [("zl", 4), ("zh", 4), ("vl", 2), ("vh", 2)]
            .into_iter()
            .map(|(n, rows)| ps.insert(n, init::normal(&mut rng, &[rows, 8], 1.0)?))
            .collect::<Result<_>>()?;
        let wz = ps.insert("wz", init::normal(&mut rng, &[4, 8], 1.0)?)?;
        let wv = ps.insert("wv", init::normal(&mut rng, &[2, 8], 1.0)?)?;
        reports.push(run("encoder", &mut ps, |tr, ps| {
            let x: Vec<Var> = inputs.iter().map(|id| tr.param(ps, *id)).collect::<Result<_>>()?;
            let out = enc.encode(tr, ps, x[0], x[1], Some(x[2]), Some(x[3]))?;
            let a = weighted_sum(tr, ps, wz, out.z_lip)?;
            let b = weighted_sum(tr, ps, wz, out.z_hand)?;
            let c = weighted_sum(tr, ps, wv, out.v_fused.expect("fused mode"))?;
            let ab = tr.add(a, b)?;
            tr.add(ab, c)
        })?);
    }

    // cross-attention alignment
    {
        let mut ps = ParamStore::new();
        let ca = CrossAlign::new(&mut ps, "align", 8, 1, 16, &mut rng)?;
        let z = ps.insert("z", init::normal(&mut rng, &[5, 8], 1.0)?)?;
        let v = ps.insert("v", init::normal(&mut rng, &[5, 8], 1.0)?)?;
        let w = ps.insert("w", init::normal(&mut rng, &[5, 8], 1.0)?)?;
        let wm = ps.insert("wm", init::normal(&mut rng, &[5, 5], 1.0)?)?;
        reports.push(run("alignment", &mut ps, |tr, ps| {
            let (zv, vv) = (tr.param(ps, z)?, tr.param(ps, v)?);
            let out = ca.forward(tr, ps, zv, vv)?;
            let a = weighted_sum(tr, ps, w, out.tokens)?;
            let b = weighted_sum(tr, ps, wm, out.map)?;
            tr.add(a, b)
        })?);
    }

    // CTC through a log-softmax
    {
        let mut ps = ParamStore::new();
        let logits = ps.insert("logits", init::normal(&mut rng, &[6, 4], 1.0)?)?;
        let target = CtcTarget::new(vec![1, 3, 3])?;
        reports.push(run("ctc", &mut ps, |tr, ps| {
            let x = tr.param(ps, logits)?;
            let lp = tr.log_softmax(x)?;
            ctc_nll(tr, lp, &target)
        })?);
    }

    // complete model under the hybrid objective
    {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            layers: 2,
            ff_mult: 2,
            ratio: 2,
            bases: 6,
            vocab: 4,
            ablation: Ablation::Full,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, rng.gen())?;
        let lip = init::normal(&mut rng, &[6, 8], 1.0)?;
        let hand = init::normal(&mut rng, &[6, 8], 1.0)?;
        let target = CtcTarget::new(vec![2, 4])?;
        let mut ps = model.params.clone();
        reports.push(run("hybrid", &mut ps, |tr, ps| {
            let fwd = model.forward_with(tr, ps, &lip, &hand)?;
            Ok(model.loss(tr, &fwd, &target)?.total)
        })?);
    }

    Ok(reports)
}

//! Connectionist temporal classification.
//!
//! Lattices are `T × (|V|+1)` matrices of per-frame log-probabilities with
//! the blank symbol at column [`BLANK`]; labels occupy columns `1..=|V|`.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Trace, Var};

/// Reserved blank column.
pub const BLANK: usize = 0;

const ORACLE_PATH_LIMIT: f64 = 1e7;

/// Per-frame log-probabilities whose rows each log-sum-exp to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice(Tensor);

impl LogProbLattice {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 || t.cols() < 2 {
            return Err(Error::shape(
                "lattice",
                format!("expected T × (|V|+1) with |V| ≥ 1, got {:?}", t.shape()),
            ));
        }
        for r in 0..t.rows() {
            let z = log_sum_exp(t.row(r));
            if (z).abs() > 1e-9 {
                return Err(Error::shape(
                    "lattice",
                    format!("row {r} log-sums to {z}, expected 0"),
                ));
            }
        }
        Ok(LogProbLattice(t))
    }

    /// Normalizes raw scores with a row-wise log-softmax.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let mut tr = Trace::new();
        let x = tr.input(logits.clone())?;
        let lp = tr.log_softmax(x)?;
        LogProbLattice::new(tr.value(lp).clone())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Non-empty label sequence over `1..=|V|`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CtcTarget(Vec<usize>);

impl CtcTarget {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidTarget("empty label sequence".into()));
        }
        if labels.contains(&BLANK) {
            return Err(Error::InvalidTarget("label sequence contains blank".into()));
        }
        Ok(CtcTarget(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimum frame count admitting a valid alignment: one per label plus
    /// one separating blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Terms of the two-branch objective.
#[derive(Debug, Clone, Copy)]
pub struct HybridLoss {
    /// Differentiable `visual + linguistic`.
    pub total: Var,
    pub visual: f64,
    pub linguistic: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_lattice(lattice: &Tensor, y: &CtcTarget) -> Result<()> {
    if lattice.rank() != 2 || lattice.cols() < 2 {
        return Err(Error::shape(
            "ctc_nll",
            format!("lattice must be T × (|V|+1), got {:?}", lattice.shape()),
        ));
    }
    if let Some(bad) = y.labels().iter().find(|&&l| l >= lattice.cols()) {
        return Err(Error::InvalidTarget(format!(
            "label {bad} outside lattice vocabulary of {}",
            lattice.cols() - 1
        )));
    }
    let (frames, required) = (lattice.rows(), y.min_frames());
    if frames < required {
        return Err(Error::InfeasibleTarget {
            branch: String::new(),
            frames,
            required,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `y` under `lattice` together with its
/// gradient with respect to every lattice entry.
///
/// Uses the blank-augmented forward and backward recursions in log space.
pub fn ctc_nll_with_grad(lattice: &Tensor, y: &CtcTarget) -> Result<(f64, Vec<f64>)> {
    check_lattice(lattice, y)?;
    let (frames, classes) = (lattice.rows(), lattice.cols());
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(y.labels().iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let states = ext.len();
    let x = |t: usize, s: usize| lattice.data()[t * classes + ext[s]];
    let skip_allowed = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = x(0, 0);
    alpha[1] = x(0, 1);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_allowed(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + x(t, s) };
        }
    }
    let last = (frames - 1) * states;
    let log_p = log_add(alpha[last + states - 1], alpha[last + states - 2]);

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * states];
    beta[last + states - 1] = 0.0;
    beta[last + states - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let next = |s2: usize| beta[(t + 1) * states + s2] + x(t + 1, s2);
            let mut b = next(s);
            if s + 1 < states {
                b = log_add(b, next(s + 1));
            }
            if s + 2 < states && skip_allowed(s + 2) {
                b = log_add(b, next(s + 2));
            }
            beta[t * states + s] = b;
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s] - log_p;
            if occ > ninf {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable CTC negative log-likelihood recorded on `tr`.
pub fn ctc_nll(tr: &mut Trace, lattice: Var, y: &CtcTarget) -> Result<Var> {
    let (loss, grad) = ctc_nll_with_grad(tr.value(lattice), y)?;
    tr.scalar_fn(lattice, loss, grad)
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive reference: sums the probability of every frame-level path
/// that collapses to `y`. Refuses lattices with more than 10^7 paths.
pub fn ctc_oracle(lattice: &Tensor, y: &CtcTarget) -> Result<f64> {
    let (frames, classes) = (lattice.rows(), lattice.cols());
    let paths = (classes as f64).powi(frames as i32);
    if paths > ORACLE_PATH_LIMIT {
        return Err(Error::OracleGuard {
            paths,
            limit: ORACLE_PATH_LIMIT,
        });
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == y.labels() {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| lattice.data()[t * classes + c])
                .sum();
            total += lp.exp();
        }
        // odometer increment
        let mut i = frames;
        loop {
            if i == 0 {
                return Ok(-total.ln());
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Per-frame argmax (ties to the lowest id), collapsed.
pub fn greedy_decode(lattice: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.rows())
        .map(|r| {
            let row = lattice.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

fn name_branch(err: Error, branch: &str) -> Error {
    match err {
        Error::InfeasibleTarget {
            frames, required, ..
        } => Error::InfeasibleTarget {
            branch: format!(" on {branch} branch"),
            frames,
            required,
        },
        e => e,
    }
}

/// Unweighted sum of the visual and linguistic CTC losses.
pub fn hybrid_loss(
    tr: &mut Trace,
    visual: Var,
    linguistic: Var,
    y: &CtcTarget,
) -> Result<HybridLoss> {
    let (tv, tl) = (tr.value(visual), tr.value(linguistic));
    if tv.shape() != tl.shape() {
        return Err(Error::shape(
            "hybrid_loss",
            format!("visual {:?} vs linguistic {:?}", tv.shape(), tl.shape()),
        ));
    }
    let v = ctc_nll(tr, visual, y).map_err(|e| name_branch(e, "visual"))?;
    let l = ctc_nll(tr, linguistic, y).map_err(|e| name_branch(e, "linguistic"))?;
    let total = tr.add(v, l)?;
    Ok(HybridLoss {
        total,
        visual: tr.value(v).item(),
        linguistic: tr.value(l).item(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, init, ParamStore};

    fn uniform(frames: usize, classes: usize) -> Tensor {
        Tensor::filled([frames, classes], -(classes as f64).ln()).unwrap()
    }

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Tensor {
        let logits = init::normal(rng, &[frames, classes], 1.5).unwrap();
        LogProbLattice::from_logits(&logits).unwrap().into_tensor()
    }

    fn target(l: &[usize]) -> CtcTarget {
        CtcTarget::new(l.to_vec()).unwrap()
    }

    #[test]
    fn single_frame_single_path() {
        let (nll, _) = ctc_nll_with_grad(&uniform(1, 2), &target(&[1])).unwrap();
        assert!((nll - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((nll - 0.693147).abs() < 1e-6);
        assert!((ctc_oracle(&uniform(1, 2), &target(&[1])).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let (nll, _) = ctc_nll_with_grad(&uniform(2, 2), &target(&[1])).unwrap();
        assert!((nll + 0.75f64.ln()).abs() < 1e-12);
        assert!((nll - 0.287682).abs() < 1e-6);
        assert!((ctc_oracle(&uniform(2, 2), &target(&[1])).unwrap() - nll).abs() < 1e-12);
    }

    #[test]
    fn collapse_merges_only_adjacent_repeats() {
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[0, 1, 1, 0, 2]), vec![1, 2]);
        assert!(collapse(&[0, 0, 0]).is_empty());
    }

    #[test]
    fn matches_oracle_on_random_lattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let frames = rng.gen_range(3..=6);
            let vocab = rng.gen_range(1..=3);
            let len = rng.gen_range(1..=3);
            let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=vocab)).collect();
            let y = target(&labels);
            let lat = random_lattice(&mut rng, frames, vocab + 1);
            match ctc_nll_with_grad(&lat, &y) {
                Ok((nll, _)) => {
                    let oracle = ctc_oracle(&lat, &y).unwrap();
                    assert!((nll - oracle).abs() < 1e-9, "{nll} vs {oracle}");
                    let p = (-nll).exp();
                    assert!(p > 0.0 && p <= 1.0);
                }
                Err(Error::InfeasibleTarget { .. }) => assert!(frames < y.min_frames()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn infeasible_target_is_an_error_not_infinity() {
        let err = ctc_nll_with_grad(&uniform(2, 3), &target(&[1, 1])).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleTarget {
                frames: 2,
                required: 3,
                ..
            }
        ));
    }

    #[test]
    fn relabeling_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(&mut rng, 6, 4);
        let y = target(&[1, 3, 3]);
        let perm = [0usize, 2, 3, 1]; // new column of old column c
        let mut permuted = lat.clone();
        for t in 0..6 {
            for c in 0..4 {
                permuted.data_mut()[t * 4 + perm[c]] = lat.at(t, c);
            }
        }
        let y2 = target(&y.labels().iter().map(|&l| perm[l]).collect::<Vec<_>>());
        let a = ctc_nll_with_grad(&lat, &y).unwrap().0;
        let b = ctc_nll_with_grad(&permuted, &y2).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamStore::new();
        let id = ps.insert("lattice", random_lattice(&mut rng, 6, 4)).unwrap();
        let y = target(&[2, 1, 2]);
        let err = grad_check(&mut ps, &[id], 1e-5, |tr, ps| {
            let x = tr.param(ps, id)?;
            ctc_nll(tr, x, &y)
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn greedy_decoding() {
        let path_lattice = |path: &[usize]| {
            let mut t = Tensor::filled([path.len(), 3], -5.0).unwrap();
            for (i, &p) in path.iter().enumerate() {
                t.data_mut()[i * 3 + p] = -0.1;
            }
            t
        };
        assert_eq!(greedy_decode(&path_lattice(&[0, 1, 1, 0, 2])), vec![1, 2]);
        assert!(greedy_decode(&path_lattice(&[0, 0, 0])).is_empty());
        // ties resolve to the lowest id
        let tie = Tensor::filled([2, 3], -1.0).unwrap();
        assert!(greedy_decode(&tie).is_empty());
    }

    #[test]
    fn greedy_matches_direct_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let lat = random_lattice(&mut rng, 8, 5);
            let mut argmax = Vec::new();
            for t in 0..8 {
                let row = lat.row(t);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                argmax.push(row.iter().position(|v| *v == m).unwrap());
            }
            let mut expect: Vec<usize> = argmax.clone();
            expect.dedup();
            expect.retain(|&c| c != BLANK);
            assert_eq!(greedy_decode(&lat), expect);
        }
    }

    #[test]
    fn hybrid_of_identical_lattices_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_lattice(&mut rng, 6, 4);
        let y = target(&[1, 2]);
        let mut tr = Trace::new();
        let a = tr.input(lat.clone()).unwrap();
        let b = tr.input(lat.clone()).unwrap();
        let h = hybrid_loss(&mut tr, a, b, &y).unwrap();
        let single = ctc_oracle(&lat, &y).unwrap();
        assert!((tr.value(h.total).item() - 2.0 * single).abs() < 1e-9);
        assert_eq!(h.visual, h.linguistic);
        let g = tr.backward(h.total, &mut ParamStore::new()).unwrap();
        let (_, single_grad) = ctc_nll_with_grad(&lat, &y).unwrap();
        assert_eq!(g.get(a).unwrap(), single_grad.as_slice());
        assert_eq!(g.get(b).unwrap(), single_grad.as_slice());
    }

    #[test]
    fn hybrid_names_the_failing_branch() {
        let mut tr = Trace::new();
        let a = tr.input(uniform(2, 3)).unwrap();
        let b = tr.input(uniform(2, 3)).unwrap();
        let err = hybrid_loss(&mut tr, a, b, &target(&[1, 1])).unwrap_err();
        assert!(err.to_string().contains("visual branch"), "{err}");
    }

    #[test]
    fn oracle_guard() {
        let lat = uniform(12, 5);
        assert!(matches!(
            ctc_oracle(&lat, &target(&[1])),
            Err(Error::OracleGuard { .. })
        ));
    }
}

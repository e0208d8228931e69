//! Connectionist temporal classification over a [`PosteriorGram`].
//!
//! A path assigns one unit (blank included) to every frame; collapsing it
//! removes adjacent repeats and then blanks. The likelihood of a label
//! sequence is the total probability of the paths that collapse to it,
//! computed here with a log-space forward recursion over the blank-interleaved
//! sequence. [`brute_force_score`] enumerates paths directly and exists only to
//! check the recursion on tiny inputs.

use std::fmt::Write;

use crate::error::{KwsError, Result};
use crate::network::{PosteriorGram, BLANK};

/// `ln(e^a + e^b)` without overflow; `-inf` inputs are handled exactly.
#[inline]
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Non-empty label sequence; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhonemeSequence(Vec<usize>);

impl PhonemeSequence {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(KwsError::InvalidParams("phoneme sequence is empty".into()));
        }
        if labels.contains(&BLANK) {
            return Err(KwsError::InvalidParams("phoneme sequence contains the blank".into()));
        }
        Ok(PhonemeSequence(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Fewest frames any path needs: one per label plus a blank between each
    /// pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// The shortest path that collapses to this sequence: the labels with a
    /// blank between equal neighbours.
    pub fn as_path(&self) -> CtcPath {
        let mut p = Vec::with_capacity(self.min_frames());
        for (i, &u) in self.0.iter().enumerate() {
            if i > 0 && self.0[i - 1] == u {
                p.push(BLANK);
            }
            p.push(u);
        }
        CtcPath(p)
    }
}

/// `(-, l1, -, l2, ..., -)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedSequence(Vec<usize>);

impl ExtendedSequence {
    pub fn units(&self) -> &[usize] {
        &self.0
    }

    /// Whether position `s` may be entered from `s - 2` (skipping a blank).
    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && self.0[s] != BLANK && self.0[s] != self.0[s - 2]
    }
}

impl From<&PhonemeSequence> for ExtendedSequence {
    fn from(l: &PhonemeSequence) -> Self {
        let mut units = Vec::with_capacity(2 * l.len() + 1);
        units.push(BLANK);
        for &u in l.labels() {
            units.push(u);
            units.push(BLANK);
        }
        ExtendedSequence(units)
    }
}

/// Frame-level token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtcPath(pub Vec<usize>);

/// Removes adjacent repeats, then blanks. `None` when nothing is left.
pub fn collapse(path: &CtcPath) -> Option<PhonemeSequence> {
    let mut out = Vec::new();
    let mut prev = None;
    for &u in &path.0 {
        if prev != Some(u) && u != BLANK {
            out.push(u);
        }
        prev = Some(u);
    }
    (!out.is_empty()).then_some(PhonemeSequence(out))
}

/// Log-probability of a single path under conditionally independent frames.
pub fn path_probability(path: &CtcPath, y: &PosteriorGram) -> Result<f64> {
    if path.0.len() != y.frames() {
        return Err(KwsError::Contract(format!(
            "path has {} frames, posteriorgram has {}",
            path.0.len(),
            y.frames()
        )));
    }
    Ok(path.0.iter().enumerate().map(|(t, &u)| y.log_row(t)[u]).sum())
}

/// Result of [`forward_score`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Likelihood {
    pub log_prob: f64,
    /// False when there are too few frames for the sequence; `log_prob` is then `-inf`.
    pub feasible: bool,
}

/// Forward variables `alpha[t][s]` in log space, row-major `frames x S`.
fn forward_table(ext: &ExtendedSequence, y: &PosteriorGram) -> Vec<f64> {
    let s_len = ext.0.len();
    let t_len = y.frames();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    let lp0 = y.log_row(0);
    alpha[0] = lp0[ext.0[0]];
    if s_len > 1 {
        alpha[1] = lp0[ext.0[1]];
    }
    for t in 1..t_len {
        let lp = y.log_row(t);
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if ext.can_skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            cur[s] = a + lp[ext.0[s]];
        }
    }
    alpha
}

/// `log p(l | x)` by the forward recursion.
pub fn forward_score(l: &PhonemeSequence, y: &PosteriorGram) -> Likelihood {
    if y.frames() < l.min_frames() {
        return Likelihood {
            log_prob: f64::NEG_INFINITY,
            feasible: false,
        };
    }
    let ext = ExtendedSequence::from(l);
    let alpha = forward_table(&ext, y);
    let s_len = ext.0.len();
    let last = &alpha[(y.frames() - 1) * s_len..];
    Likelihood {
        log_prob: log_sum_exp(last[s_len - 1], last[s_len - 2]),
        feasible: true,
    }
}

/// Largest number of paths [`brute_force_score`] will enumerate.
pub const BRUTE_FORCE_BOUND: f64 = 1e7;

/// `log p(l | x)` by summing the probability of every path that collapses to
/// `l`. Exponential in the number of frames; refuses more than 1e7 paths.
pub fn brute_force_score(l: &PhonemeSequence, y: &PosteriorGram) -> Result<f64> {
    let (k, t_len) = (y.units(), y.frames());
    let total = (k as f64).powi(t_len as i32);
    if total > BRUTE_FORCE_BOUND {
        return Err(KwsError::EnumerationBound(total));
    }
    let mut digits = vec![0usize; t_len];
    let mut sum = 0.0f64;
    for _ in 0..total as u64 {
        let path = CtcPath(digits.clone());
        if collapse(&path).as_ref() == Some(l) {
            sum += digits.iter().enumerate().map(|(t, &u)| y.row(t)[u]).product::<f64>();
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < k {
                break;
            }
            *d = 0;
        }
    }
    Ok(sum.ln())
}

/// CTC loss and its gradient with respect to the softmax logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcGradOut {
    /// `-log p(l | x)`
    pub loss: f64,
    /// `frames x units`, row-major: `y_t - gamma_t`.
    pub grad_logits: Vec<f64>,
}

pub fn loss_and_grad(l: &PhonemeSequence, y: &PosteriorGram) -> Result<CtcGradOut> {
    let t_len = y.frames();
    if t_len < l.min_frames() {
        return Err(KwsError::Infeasible {
            labels: l.len(),
            frames: t_len,
        });
    }
    let ext = ExtendedSequence::from(l);
    let s_len = ext.0.len();
    let alpha = forward_table(&ext, y);
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = log_sum_exp(last[s_len - 1], last[s_len - 2]);
    if !log_p.is_finite() {
        return Err(KwsError::NonFinite {
            epoch: 0,
            batch: 0,
            detail: format!("log p(l|x) = {log_p}"),
        });
    }

    // beta[t][s]: log-probability of emitting frames t+1.. given state s at t.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    for t in (0..t_len - 1).rev() {
        let lp = y.log_row(t + 1);
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s] + lp[ext.0[s]];
            if s + 1 < s_len {
                b = log_sum_exp(b, next[s + 1] + lp[ext.0[s + 1]]);
            }
            if s + 2 < s_len && ext.can_skip(s + 2) {
                b = log_sum_exp(b, next[s + 2] + lp[ext.0[s + 2]]);
            }
            cur[s] = b;
        }
    }

    let units = y.units();
    let mut grad = y.probs().to_vec();
    let mut log_gamma = vec![f64::NEG_INFINITY; units];
    for t in 0..t_len {
        log_gamma.fill(f64::NEG_INFINITY);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            log_gamma[ext.0[s]] = log_sum_exp(log_gamma[ext.0[s]], v);
        }
        for (g, &lg) in grad[t * units..(t + 1) * units].iter_mut().zip(&log_gamma) {
            if lg > f64::NEG_INFINITY {
                *g -= (lg - log_p).exp();
            }
        }
    }
    Ok(CtcGradOut {
        loss: -log_p,
        grad_logits: grad,
    })
}

/// The `top_k` most probable units of every frame, most probable first; ties
/// go to the lower unit index.
pub fn alignment_dump(y: &PosteriorGram, top_k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = top_k.max(1).min(y.units());
    (0..y.frames())
        .map(|t| {
            let row = y.row(t);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.into_iter().take(k).map(|u| (u, row[u])).collect()
        })
        .collect()
}

/// Tab-separated `frame_index, unit_name, probability` lines.
pub fn format_alignment(dump: &[Vec<(usize, f64)>], inventory: &[String]) -> String {
    let mut out = String::from("frame\tunit\tprob\n");
    for (t, frame) in dump.iter().enumerate() {
        for &(u, p) in frame {
            let name = inventory.get(u).map_or("?", String::as_str);
            writeln!(out, "{t}\t{name}\t{p:.6}").unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // a=1, b=2, c=3, blank=0
    fn path(s: &str) -> CtcPath {
        CtcPath(
            s.chars()
                .map(|c| match c {
                    '-' => 0,
                    c => (c as u8 - b'a' + 1) as usize,
                })
                .collect(),
        )
    }

    fn seq(v: &[usize]) -> PhonemeSequence {
        PhonemeSequence::new(v.to_vec()).unwrap()
    }

    fn random_y(rng: &mut ChaCha8Rng, t: usize, k: usize) -> PosteriorGram {
        let logits: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        PosteriorGram::from_logits(k, &logits)
    }

    #[test]
    fn collapse_examples() {
        let abc = seq(&[1, 2, 3]);
        assert_eq!(collapse(&path("aa-b-c")), Some(abc.clone()));
        assert_eq!(collapse(&path("abb-cc-")), Some(abc));
        assert_eq!(collapse(&path("----")), None);
        assert_eq!(collapse(&path("a-a")), Some(seq(&[1, 1])));
        assert_eq!(collapse(&path("aaa")), Some(seq(&[1])));
    }

    #[test]
    fn phoneme_sequence_rejects_blank_and_empty() {
        assert!(PhonemeSequence::new(vec![]).is_err());
        assert!(PhonemeSequence::new(vec![1, 0]).is_err());
        assert_eq!(seq(&[1, 1, 2, 2, 2]).min_frames(), 8);
    }

    #[test]
    fn extended_sequence_interleaves_blanks() {
        let e = ExtendedSequence::from(&seq(&[3, 1]));
        assert_eq!(e.units(), &[0, 3, 0, 1, 0]);
    }

    #[test]
    fn path_probability_examples() {
        let y = PosteriorGram::from_probs(&[vec![0.1, 0.6, 0.3]]);
        assert!((path_probability(&CtcPath(vec![1]), &y).unwrap() - 0.6f64.ln()).abs() < 1e-15);
        let uniform = PosteriorGram::from_probs(&vec![vec![0.25; 4]; 7]);
        let lp = path_probability(&CtcPath(vec![0, 1, 2, 3, 3, 2, 1]), &uniform).unwrap();
        assert!((lp + 7.0 * 4f64.ln()).abs() < 1e-12);
        assert!(path_probability(&CtcPath(vec![1]), &uniform).is_err());
        let zero = PosteriorGram::from_probs(&[vec![1.0, 0.0]]);
        assert_eq!(path_probability(&CtcPath(vec![1]), &zero).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn path_probability_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = rng.gen_range(1..7);
            let y = random_y(&mut rng, t, 4);
            let p = CtcPath((0..t).map(|_| rng.gen_range(0..4)).collect());
            let direct: f64 = p.0.iter().enumerate().map(|(i, &u)| y.row(i)[u]).product();
            assert!((path_probability(&p, &y).unwrap() - direct.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_score() {
        let y = PosteriorGram::from_probs(&[vec![0.3, 0.7]]);
        let s = forward_score(&seq(&[1]), &y);
        assert!(s.feasible);
        assert!((s.log_prob - 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frame_score_by_hand() {
        let y = PosteriorGram::from_probs(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]);
        let (b0, a0, b1, a1): (f64, f64, f64, f64) = (0.2, 0.5, 0.6, 0.1);
        let expected = (a0 * a1 + b0 * a1 + a0 * b1).ln();
        assert!((forward_score(&seq(&[1]), &y).log_prob - expected).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_frames_is_one_third() {
        let y = PosteriorGram::from_probs(&vec![vec![1.0 / 3.0; 3]; 2]);
        let b = brute_force_score(&seq(&[1]), &y).unwrap();
        assert!((b - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((forward_score(&seq(&[1]), &y).log_prob - b).abs() < 1e-15);
    }

    #[test]
    fn infeasible_inputs() {
        let y = PosteriorGram::from_probs(&vec![vec![0.5; 2]; 2]);
        let l = seq(&[1, 1]);
        let s = forward_score(&l, &y);
        assert!(!s.feasible && s.log_prob == f64::NEG_INFINITY);
        assert_eq!(brute_force_score(&l, &y).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(loss_and_grad(&l, &y), Err(KwsError::Infeasible { .. })));
    }

    #[test]
    fn brute_force_refuses_large_problems() {
        let y = PosteriorGram::from_probs(&vec![vec![0.1; 10]; 8]);
        assert!(matches!(
            brute_force_score(&seq(&[1]), &y),
            Err(KwsError::EnumerationBound(_))
        ));
    }

    #[test]
    fn forward_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let labels = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=7);
            let y = random_y(&mut rng, t, labels + 1);
            let l = seq(&(0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=labels)).collect::<Vec<_>>());
            let f = forward_score(&l, &y).log_prob;
            let b = brute_force_score(&l, &y).unwrap();
            if b == f64::NEG_INFINITY {
                assert_eq!(f, b);
            } else {
                assert!((f - b).abs() <= 1e-9 * b.abs(), "{f} vs {b}");
            }
        }
    }

    #[test]
    fn label_probabilities_sum_to_at_most_one() {
        // all label sequences over 2 labels that fit in T frames
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for t in 1..=5 {
            let y = random_y(&mut rng, t, 3);
            let mut total = 0.0;
            let mut stack: Vec<Vec<usize>> = vec![vec![1], vec![2]];
            while let Some(l) = stack.pop() {
                let l = seq(&l);
                let s = forward_score(&l, &y);
                assert!(s.log_prob <= 0.0);
                if s.feasible {
                    total += s.log_prob.exp();
                    for next in [1, 2] {
                        let mut longer = l.labels().to_vec();
                        longer.push(next);
                        stack.push(longer);
                    }
                }
            }
            // the only missing mass is the all-blank path
            let blank: f64 = (0..t).map(|i| y.row(i)[0]).product();
            assert!(total <= 1.0 + 1e-12);
            assert!((total + blank - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_gradient_is_softmax_cross_entropy() {
        let y = PosteriorGram::from_probs(&[vec![0.2, 0.5, 0.3]]);
        let g = loss_and_grad(&seq(&[2]), &y).unwrap();
        assert!((g.loss + 0.3f64.ln()).abs() < 1e-15);
        let expected = [0.2, 0.5, 0.3 - 1.0];
        for (a, b) in g.grad_logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = rng.gen_range(1..=3);
            let k = labels + 1;
            let l = seq(&(0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=labels)).collect::<Vec<_>>());
            let t = rng.gen_range(l.min_frames()..=6.max(l.min_frames()));
            let logits: Vec<f64> = (0..t * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = loss_and_grad(&l, &PosteriorGram::from_logits(k, &logits)).unwrap();
            let loss = |z: &[f64]| -forward_score(&l, &PosteriorGram::from_logits(k, z)).log_prob;
            let eps = 1e-4;
            for i in 0..logits.len() {
                let mut p = logits.clone();
                p[i] += eps;
                let mut m = logits.clone();
                m[i] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                let an = g.grad_logits[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "seed {seed} i {i}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(log_sum_exp(ninf, ninf), ninf);
        assert_eq!(log_sum_exp(ninf, 2.0), 2.0);
        assert_eq!(log_sum_exp(1.5, ninf), 1.5);
        assert!((log_sum_exp(1234.0, 1232.0) - 1234.126928011042972496444).abs() < 1e-9);
        assert!(!log_sum_exp(-1e308, ninf).is_nan());
    }

    #[test]
    fn alignment_dump_ties_and_one_hot() {
        let uniform = PosteriorGram::from_probs(&vec![vec![0.25; 4]; 2]);
        let d = alignment_dump(&uniform, 2);
        assert_eq!(d[0], vec![(0, 0.25), (1, 0.25)]);
        let one_hot = PosteriorGram::from_probs(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        let d = alignment_dump(&one_hot, 1);
        assert_eq!(d, vec![vec![(2, 1.0)], vec![(0, 1.0)]]);
        let inv: Vec<String> = ["<b>", "a", "b"].iter().map(|s| s.to_string()).collect();
        let text = format_alignment(&d, &inv);
        assert_eq!(text, "frame\tunit\tprob\n0\tb\t1.000000\n1\t<b>\t1.000000\n");
    }

    proptest! {
        #[test]
        fn collapse_is_idempotent(tokens in proptest::collection::vec(0usize..4, 0..30)) {
            let once = collapse(&CtcPath(tokens));
            let twice = once.as_ref().and_then(|l| collapse(&l.as_path()));
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn log_sum_exp_never_nan(a in prop_oneof![Just(f64::NEG_INFINITY), -1e300f64..1e300],
                                 b in prop_oneof![Just(f64::NEG_INFINITY), -1e300f64..1e300]) {
            let r = log_sum_exp(a, b);
            prop_assert!(!r.is_nan());
            prop_assert!(r >= a.max(b));
        }
    }
}

//! Connectionist temporal classification: the negative log-likelihood over
//! blank-augmented alignments, and the label-synchronous prefix scorer used by
//! joint decoding. Blank is index 0.

use thiserror::Error;

use crate::data::{BLANK, EOS};
use crate::tensor::{log_add_exp, log_sum_exp_slice, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("CTC alignment infeasible: {frames} frames but the target needs at least {required}")]
    Infeasible { frames: usize, required: usize },
    #[error("CTC target id {id} outside [1, {vocab})")]
    TargetRange { id: usize, vocab: usize },
    #[error("prefix extended after end-of-sequence")]
    ExtendAfterEnd,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Minimum number of frames that can emit `target`: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(frames: usize, vocab: usize, target: &[usize]) -> Result<(), CtcError> {
    if let Some(&id) = target.iter().find(|&&id| id == BLANK || id >= vocab) {
        return Err(CtcError::TargetRange { id, vocab });
    }
    let required = min_frames(target);
    if frames < required {
        return Err(CtcError::Infeasible { frames, required });
    }
    Ok(())
}

/// Blank-interleaved label sequence `[-, y1, -, y2, ..., -]` and, per
/// position, whether the two-step skip transition is allowed.
fn extended_labels(target: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    let skip = (0..ext.len())
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();
    (ext, skip)
}

/// Records `-log p(target | x)` on the tape for `[T, V]` log-probabilities.
pub fn ctc_loss_var(tape: &mut Tape, log_probs: Var, target: &[usize]) -> Result<Var, CtcError> {
    let shape = tape.shape(log_probs).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape {
            op: "ctc_loss",
            lhs: shape,
            rhs: vec![0, 0],
        }
        .into());
    }
    let (frames, vocab) = (shape[0], shape[1]);
    check_target(frames, vocab, target)?;
    let (ext, skip) = extended_labels(target);
    let s_len = ext.len();
    let emit = |tape: &mut Tape, t: usize| -> Result<Var, TensorError> {
        let idx: Vec<_> = ext.iter().map(|&l| Some(t * vocab + l)).collect();
        tape.gather(log_probs, &idx, vec![s_len])
    };
    let start_mask: Vec<f64> = (0..s_len)
        .map(|s| if s < 2 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let mask = tape.constant(Tensor::vector(start_mask));
    let e0 = emit(tape, 0)?;
    let mut alpha = tape.add(e0, mask)?;
    for t in 1..frames {
        let moved = tape.log_add_transitions(alpha, &skip)?;
        let e = emit(tape, t)?;
        alpha = tape.add(moved, e)?;
    }
    let finals: Vec<_> = (s_len.saturating_sub(2)..s_len).map(Some).collect();
    let n = finals.len();
    let ends = tape.gather(alpha, &finals, vec![n])?;
    let total = tape.log_sum_exp(ends, 0)?;
    Ok(tape.scale(total, -1.0)?)
}

/// `-log p(target | x)` without gradient bookkeeping.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<f64, CtcError> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    let loss = ctc_loss_var(&mut tape, lp, target)?;
    Ok(tape.value(loss).item())
}

/// Forward (α) and backward (β) lattices in log space, each `T × (2L+1)`.
/// Both include the emission at their own frame.
pub fn forward_backward_tables(
    log_probs: &Tensor,
    target: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), CtcError> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    check_target(frames, vocab, target)?;
    let (ext, skip) = extended_labels(target);
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.at2(t, ext[s]);
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    for s in 0..s_len.min(2) {
        alpha[0][s] = lp(0, s);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add_exp(a, alpha[t - 1][s - 1]);
            }
            if skip[s] {
                a = log_add_exp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp(t, s);
        }
    }
    for s in s_len.saturating_sub(2)..s_len {
        beta[frames - 1][s] = lp(frames - 1, s);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip[s + 2] {
                b = log_add_exp(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + lp(t, s);
        }
    }
    Ok((alpha, beta))
}

/// Lattice state of one hypothesis prefix.
///
/// `r_nonblank[t]` / `r_blank[t]` are the log-probabilities that frames
/// `0..=t` emit exactly the prefix, ending in its last label or in blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    r_nonblank: Vec<f64>,
    r_blank: Vec<f64>,
    last: Option<usize>,
    score: f64,
    ended: bool,
}

impl PrefixState {
    /// State of the empty prefix; its score is `log 1 = 0`.
    pub fn init(log_probs: &Tensor) -> Self {
        let frames = log_probs.rows();
        let mut r_blank = Vec::with_capacity(frames);
        let mut acc = 0.0;
        for t in 0..frames {
            acc += log_probs.at2(t, BLANK);
            r_blank.push(acc);
        }
        Self {
            r_nonblank: vec![f64::NEG_INFINITY; frames],
            r_blank,
            last: None,
            score: 0.0,
            ended: false,
        }
    }

    /// Cumulative prefix log-probability (or, once ended, the log-probability
    /// that the whole output equals the prefix).
    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    /// Log-probability that the collapsed output is exactly this prefix.
    pub fn complete_score(&self) -> f64 {
        let last = self.r_blank.len() - 1;
        log_add_exp(self.r_nonblank[last], self.r_blank[last])
    }

    /// Extends by `token` (or [`EOS`]); returns the new state and the change
    /// in cumulative score.
    pub fn extend(&self, log_probs: &Tensor, token: usize) -> Result<(PrefixState, f64), CtcError> {
        if self.ended {
            return Err(CtcError::ExtendAfterEnd);
        }
        let vocab = log_probs.cols();
        if token == BLANK || token >= vocab {
            return Err(CtcError::TargetRange { id: token, vocab });
        }
        if token == EOS {
            let s = self.complete_score();
            let next = PrefixState {
                ended: true,
                score: s,
                ..self.clone()
            };
            return Ok((next, increment(s, self.score)));
        }
        let frames = self.r_blank.len();
        let mut r_n = vec![f64::NEG_INFINITY; frames];
        let mut r_b = vec![f64::NEG_INFINITY; frames];
        if self.last.is_none() {
            r_n[0] = log_probs.at2(0, token);
        }
        let mut psi = r_n[0];
        for t in 1..frames {
            let phi = if self.last == Some(token) {
                self.r_blank[t - 1]
            } else {
                log_add_exp(self.r_blank[t - 1], self.r_nonblank[t - 1])
            };
            let x_c = log_probs.at2(t, token);
            r_n[t] = log_add_exp(r_n[t - 1], phi) + x_c;
            r_b[t] = log_add_exp(r_n[t - 1], r_b[t - 1]) + log_probs.at2(t, BLANK);
            psi = log_add_exp(psi, phi + x_c);
        }
        let next = PrefixState {
            r_nonblank: r_n,
            r_blank: r_b,
            last: Some(token),
            score: psi,
            ended: false,
        };
        Ok((next, increment(psi, self.score)))
    }
}

/// Score change that stays `-inf` once a prefix becomes impossible.
fn increment(new: f64, old: f64) -> f64 {
    if new == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        new - old
    }
}

/// Cumulative prefix score of `prefix`, built token by token from the empty state.
pub fn prefix_score(log_probs: &Tensor, prefix: &[usize]) -> Result<PrefixState, CtcError> {
    let mut state = PrefixState::init(log_probs);
    for &tok in prefix {
        state = state.extend(log_probs, tok)?.0;
    }
    Ok(state)
}

/// Best-path decoding: per-frame argmax (lowest id on ties), repeats
/// collapsed, blanks removed.
pub fn greedy_collapse(log_probs: &Tensor) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Log-probabilities that frame rows sum to one, for assertions.
pub fn rows_normalized(log_probs: &Tensor, tol: f64) -> bool {
    (0..log_probs.rows()).all(|t| log_sum_exp_slice(log_probs.row(t)).abs() <= tol)
}

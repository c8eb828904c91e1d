//! CTC negative log-likelihood with analytic gradient, greedy decoding, and
//! a brute-force alignment-enumeration oracle for small instances.
//!
//! The loss consumes a T x |V| lattice of log-probabilities and differentiates
//! with respect to those log-probs; composing with the log-softmax backward is
//! the caller's job. All DP runs in log-space f64.

use crate::tensor::Tensor;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtcError>;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("target needs at least {needed} frames (length + repeats) but lattice has {have}")]
    InfeasibleTarget { needed: usize, have: usize },
    #[error("target contains the blank token")]
    BlankInTarget,
    #[error("token id {0} out of range for lattice with {1} tokens")]
    TokenOutOfRange(u32, usize),
    #[error("instance too large for brute force: T={t}, |V|={v} (limits T<=8, |V|<=5)")]
    TooLarge { t: usize, v: usize },
}

/// Character token inventory: letters, digits, apostrophe, a word-boundary
/// token, and the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSet {
    tokens: Vec<char>,
    blank: u32,
    boundary: u32,
}

pub const BOUNDARY_CHAR: char = '|';
pub const BLANK_CHAR: char = '_';

impl Default for TokenSet {
    fn default() -> Self {
        let mut tokens: Vec<char> = ('a'..='z').collect();
        tokens.extend('0'..='9');
        tokens.push('\'');
        tokens.push(BOUNDARY_CHAR);
        tokens.push(BLANK_CHAR);
        let blank = (tokens.len() - 1) as u32;
        let boundary = (tokens.len() - 2) as u32;
        TokenSet { tokens, blank, boundary }
    }
}

impl TokenSet {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> u32 {
        self.blank
    }

    pub fn boundary(&self) -> u32 {
        self.boundary
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.tokens.iter().position(|&t| t == c).map(|i| i as u32)
    }

    pub fn char_of(&self, id: u32) -> char {
        self.tokens[id as usize]
    }

    /// Words joined by the boundary token, e.g. "cat dog" -> c a t | d o g.
    pub fn encode_text(&self, text: &str) -> Option<Vec<u32>> {
        let mut ids = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                ids.push(self.boundary);
            }
            for c in word.chars() {
                ids.push(self.id_of(c.to_ascii_lowercase())?);
            }
        }
        Some(ids)
    }

    pub fn decode_to_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| {
                let c = self.char_of(id);
                if c == BOUNDARY_CHAR {
                    ' '
                } else {
                    c
                }
            })
            .collect::<String>()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Target token ids with no blanks.
pub type LabelSequence = Vec<u32>;

#[derive(Debug)]
pub struct CtcLoss {
    pub nll: f64,
    /// d(nll) / d(log-probs), same shape as the lattice.
    pub grad: Tensor,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn validate_target(target: &[u32], vocab: usize, blank: u32, frames: usize) -> Result<usize> {
    let mut repeats = 0;
    for (i, &y) in target.iter().enumerate() {
        if y == blank {
            return Err(CtcError::BlankInTarget);
        }
        if y as usize >= vocab {
            return Err(CtcError::TokenOutOfRange(y, vocab));
        }
        if i > 0 && target[i - 1] == y {
            repeats += 1;
        }
    }
    let needed = target.len() + repeats;
    if needed > frames {
        return Err(CtcError::InfeasibleTarget { needed, have: frames });
    }
    Ok(needed)
}

/// Exact CTC negative log-likelihood via log-space forward-backward, plus the
/// gradient with respect to the input log-probabilities.
pub fn ctc_loss(lattice: &Tensor, target: &[u32], blank: u32) -> Result<CtcLoss> {
    let (frames, vocab) = (lattice.rows(), lattice.cols());
    validate_target(target, vocab, blank, frames)?;
    let lp = lattice.data();
    let at = |t: usize, k: u32| lp[t * vocab + k as usize];

    // Extended label sequence: blanks interleaved around every target token.
    let s_len = 2 * target.len() + 1;
    let ext = |s: usize| -> u32 {
        if s % 2 == 0 {
            blank
        } else {
            target[s / 2]
        }
    };

    let mut alpha = vec![f64::NEG_INFINITY; frames * s_len];
    alpha[0] = at(0, blank);
    if s_len > 1 {
        alpha[1] = at(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + at(t, ext(s));
        }
    }
    let mut log_p = alpha[(frames - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[(frames - 1) * s_len + s_len - 2]);
    }

    let mut beta = vec![f64::NEG_INFINITY; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = at(frames - 1, blank);
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = at(frames - 1, ext(s_len - 2));
    }
    for t in (0..frames.saturating_sub(1)).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext(s) != blank && ext(s) != ext(s + 2) {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + at(t, ext(s));
        }
    }

    // d(nll)/d(logp[t][k]) = -exp(logsum_{s: l's=k}(alpha+beta) - logp[t][k] - logP)
    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        let mut per_token = vec![f64::NEG_INFINITY; vocab];
        for s in 0..s_len {
            let k = ext(s) as usize;
            per_token[k] = log_add(per_token[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for (k, &lse) in per_token.iter().enumerate() {
            if lse != f64::NEG_INFINITY {
                grad[t * vocab + k] = -(lse - at(t, k as u32) - log_p).exp();
            }
        }
    }

    Ok(CtcLoss {
        nll: -log_p,
        grad: Tensor::new(vec![frames, vocab], grad),
    })
}

/// Collapse a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse_path(path: &[u32], blank: u32) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Enumerates all |V|^T frame paths and sums the probability of those that
/// collapse to the target. Exponential; the independent oracle for `ctc_loss`.
pub fn ctc_brute_force(lattice: &Tensor, target: &[u32], blank: u32) -> Result<f64> {
    let (frames, vocab) = (lattice.rows(), lattice.cols());
    if frames > 8 || vocab > 5 {
        return Err(CtcError::TooLarge { t: frames, v: vocab });
    }
    let lp = lattice.data();
    let mut total = 0.0f64;
    let n_paths = (vocab as u64).pow(frames as u32);
    let mut path = vec![0u32; frames];
    for mut idx in 0..n_paths {
        for slot in path.iter_mut() {
            *slot = (idx % vocab as u64) as u32;
            idx /= vocab as u64;
        }
        if collapse_path(&path, blank) == target {
            let lp_sum: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| lp[t * vocab + k as usize])
                .sum();
            total += lp_sum.exp();
        }
    }
    Ok(-total.ln())
}

/// Per-frame argmax (ties to the lowest token id), collapsed.
pub fn ctc_greedy_decode(lattice: &Tensor, blank: u32) -> LabelSequence {
    let (frames, vocab) = (lattice.rows(), lattice.cols());
    let lp = lattice.data();
    let mut path = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = &lp[t * vocab..(t + 1) * vocab];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        path.push(best as u32);
    }
    collapse_path(&path, blank)
}

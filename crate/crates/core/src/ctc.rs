//! CTC objective: alignment feasibility, forward-backward dynamic
//! programming for loss and logit gradients, and a brute-force path
//! enumeration oracle for small instances.
//!
//! The dynamic program runs entirely in log domain over the blank-augmented
//! label of length 2L+1; infeasible transitions carry -inf. Gradients are
//! taken w.r.t. pre-softmax logits, with the softmax fused into the
//! backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{log_add, log_softmax_row, log_sum_exp, Tensor};

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label needs at least {need} frames, got {got}")]
    InfeasibleAlignment { need: usize, got: usize },
    #[error("brute force instance too large: |S|^N = {0} exceeds the 1e7 guard")]
    TooLarge(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid alphabet: {0}")]
    BadAlphabet(String),
    #[error("symbol {0:?} not in alphabet")]
    UnknownSymbol(char),
    #[error("blank symbol not allowed in a label sequence")]
    BlankInLabel,
}

/// The output symbol set: language characters plus blank, space, and noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
    blank_index: usize,
    space_index: usize,
    noise_index: usize,
}

impl Alphabet {
    pub fn new(
        symbols: Vec<char>,
        blank_index: usize,
        space_index: usize,
        noise_index: usize,
    ) -> Result<Alphabet, CtcError> {
        let n = symbols.len();
        if blank_index >= n || space_index >= n || noise_index >= n {
            return Err(CtcError::BadAlphabet("special index out of range".into()));
        }
        if blank_index == space_index || blank_index == noise_index || space_index == noise_index {
            return Err(CtcError::BadAlphabet(
                "special indices must be distinct".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(CtcError::BadAlphabet(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Alphabet {
            symbols,
            blank_index,
            space_index,
            noise_index,
        })
    }

    /// Blank first (so argmax ties resolve to blank), then eight letters,
    /// space, and noise.
    pub fn default_synthetic() -> Alphabet {
        Alphabet::new(
            vec!['-', 'a', 'd', 'e', 'h', 'n', 'o', 's', 't', ' ', '~'],
            0,
            9,
            10,
        )
        .expect("static alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.blank_index
    }

    pub fn space(&self) -> usize {
        self.space_index
    }

    pub fn noise(&self) -> usize {
        self.noise_index
    }

    pub fn symbol(&self, index: usize) -> char {
        self.symbols[index]
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Result<usize, CtcError> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .ok_or(CtcError::UnknownSymbol(c))
    }

    /// Symbol indices other than blank, in index order.
    pub fn non_blank(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| i != self.blank_index).collect()
    }
}

/// A target transcription: alphabet indices with no blanks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSequence {
    indices: Vec<usize>,
}

impl LabelSequence {
    pub fn new(indices: Vec<usize>, alphabet: &Alphabet) -> Result<LabelSequence, CtcError> {
        for &i in &indices {
            if i >= alphabet.len() {
                return Err(CtcError::Shape(format!("label index {i} out of range")));
            }
            if i == alphabet.blank() {
                return Err(CtcError::BlankInLabel);
            }
        }
        Ok(LabelSequence { indices })
    }

    pub fn from_text(text: &str, alphabet: &Alphabet) -> Result<LabelSequence, CtcError> {
        let indices = text
            .chars()
            .map(|c| alphabet.index_of(c))
            .collect::<Result<Vec<_>, _>>()?;
        LabelSequence::new(indices, alphabet)
    }

    /// Construct from raw indices without an alphabet check (decoder output
    /// is blank-free by construction).
    pub fn from_indices_unchecked(indices: Vec<usize>) -> LabelSequence {
        LabelSequence { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn render(&self, alphabet: &Alphabet) -> String {
        self.indices.iter().map(|&i| alphabet.symbol(i)).collect()
    }
}

/// Column-stochastic matrix of per-frame symbol probabilities, |S| x N.
#[derive(Debug, Clone)]
pub struct PosteriorMatrix {
    probs: Tensor,
}

impl PosteriorMatrix {
    pub fn new(probs: Tensor) -> Result<PosteriorMatrix, CtcError> {
        if probs.dims().len() != 2 {
            return Err(CtcError::Shape(format!(
                "posterior matrix must be rank 2, got {:?}",
                probs.dims()
            )));
        }
        let (s, n) = (probs.rows(), probs.cols());
        for t in 0..n {
            let mut sum = 0.0;
            for k in 0..s {
                let v = probs.at(k, t);
                if !(0.0..=1.0 + 1e-12).contains(&v) {
                    return Err(CtcError::Shape(format!(
                        "entry ({k},{t}) = {v} not in [0,1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtcError::Shape(format!("column {t} sums to {sum}")));
            }
        }
        Ok(PosteriorMatrix { probs })
    }

    /// Softmax of N x |S| logits, transposed into |S| x N.
    pub fn from_logits(logits: &Tensor) -> Result<PosteriorMatrix, CtcError> {
        let sm =
            crate::numcore::softmax_rows(logits).map_err(|e| CtcError::Shape(e.to_string()))?;
        let (n, s) = (sm.rows(), sm.cols());
        let mut probs = Tensor::zeros(&[s, n]);
        for t in 0..n {
            for k in 0..s {
                probs.set(k, t, sm.at(t, k));
            }
        }
        PosteriorMatrix::new(probs)
    }

    pub fn n_symbols(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.probs.cols()
    }

    pub fn prob(&self, symbol: usize, frame: usize) -> f64 {
        self.probs.at(symbol, frame)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

/// Minimum frame count for which the alignment set is non-empty:
/// |label| plus one for each adjacent repeated character.
pub fn min_frames(label: &LabelSequence) -> usize {
    let idx = label.indices();
    let repeats = idx.windows(2).filter(|w| w[0] == w[1]).count();
    idx.len() + repeats
}

/// CTC loss and its exact gradient w.r.t. the pre-softmax logits.
///
/// `logits` is N x |S|; the loss is the negative log of the total
/// probability over all alignments that collapse to `label`.
pub fn ctc_loss_grad(
    logits: &Tensor,
    label: &LabelSequence,
    alphabet: &Alphabet,
) -> Result<(f64, Tensor), CtcError> {
    if logits.dims().len() != 2 || logits.cols() != alphabet.len() {
        return Err(CtcError::Shape(format!(
            "logits {:?} do not match alphabet size {}",
            logits.dims(),
            alphabet.len()
        )));
    }
    let n = logits.rows();
    let need = min_frames(label);
    if n < need {
        return Err(CtcError::InfeasibleAlignment { need, got: n });
    }

    let log_probs: Vec<Vec<f64>> = (0..n).map(|t| log_softmax_row(logits.row(t))).collect();

    // Blank-augmented label: [b, y1, b, y2, ..., yL, b].
    let blank = alphabet.blank();
    let mut aug = Vec::with_capacity(2 * label.len() + 1);
    aug.push(blank);
    for &y in label.indices() {
        aug.push(y);
        aug.push(blank);
    }
    let m = aug.len();
    let ninf = f64::NEG_INFINITY;

    // Skipping s-2 -> s is allowed when s is a non-blank that differs from
    // the non-blank two positions back.
    let can_skip = |s: usize| s >= 2 && aug[s] != blank && aug[s] != aug[s - 2];

    // alpha[t][s]: log prob of all path prefixes in state s at frame t,
    // including the emission at t.
    let mut alpha = vec![vec![ninf; m]; n];
    alpha[0][0] = log_probs[0][aug[0]];
    if m > 1 {
        alpha[0][1] = log_probs[0][aug[1]];
    }
    for t in 1..n {
        for s in 0..m {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = acc + log_probs[t][aug[s]];
        }
    }
    let log_total = if m > 1 {
        log_add(alpha[n - 1][m - 1], alpha[n - 1][m - 2])
    } else {
        alpha[n - 1][m - 1]
    };
    let loss = -log_total;

    // beta[t][s]: log prob of all path suffixes from state s at frame t,
    // including the emission at t.
    let mut beta = vec![vec![ninf; m]; n];
    beta[n - 1][m - 1] = log_probs[n - 1][aug[m - 1]];
    if m > 1 {
        beta[n - 1][m - 2] = log_probs[n - 1][aug[m - 2]];
    }
    for t in (0..n.saturating_sub(1)).rev() {
        for s in 0..m {
            let mut acc = beta[t + 1][s];
            if s + 1 < m {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < m && can_skip(s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = acc + log_probs[t][aug[s]];
        }
    }

    // State occupancy and the fused-softmax gradient:
    // dL/dlogit(t,k) = softmax(t,k) - sum_{s: aug[s]=k} occupancy_t(s).
    let mut grad = Tensor::zeros(&[n, alphabet.len()]);
    for t in 0..n {
        let mut occupancy = vec![ninf; alphabet.len()];
        for s in 0..m {
            // alpha and beta both include the emission at t; remove one copy.
            let g = alpha[t][s] + beta[t][s] - log_probs[t][aug[s]] - log_total;
            occupancy[aug[s]] = log_add(occupancy[aug[s]], g);
        }
        debug_assert!(
            log_sum_exp(&occupancy).abs() < 1e-6,
            "state occupancies at frame {t} do not sum to 1"
        );
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            *g = log_probs[t][k].exp() - occupancy[k].exp();
        }
    }

    Ok((loss, grad))
}

/// Collapse a frame-level path: merge adjacent duplicates, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &s in path {
        if prev != Some(s) && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Definition-level CTC loss: enumerate every length-N path, collapse it,
/// and sum the probabilities of paths collapsing to `label`.
/// Guarded to |S|^N <= 1e7. An unreachable label yields +inf.
pub fn brute_force_ctc(
    o: &PosteriorMatrix,
    label: &LabelSequence,
    blank: usize,
) -> Result<f64, CtcError> {
    let s = o.n_symbols();
    let n = o.n_frames();
    let total_paths = (s as f64).powi(n as i32);
    if total_paths > 1e7 {
        return Err(CtcError::TooLarge(total_paths));
    }
    let target = label.indices();
    let mut sum = 0.0f64;
    let mut path = vec![0usize; n];
    loop {
        if collapse_path(&path, blank) == target {
            let mut p = 1.0;
            for (t, &sym) in path.iter().enumerate() {
                p *= o.prob(sym, t);
            }
            sum += p;
        }
        // Advance the odometer; done once it wraps.
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(-sum.ln());
            }
            path[pos] += 1;
            if path[pos] < s {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

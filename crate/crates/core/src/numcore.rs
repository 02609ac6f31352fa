//! Dense tensor arithmetic, numerically stable softmax / log-sum-exp,
//! counter-based seeded randomness, and a finite-difference gradient
//! checker used by every other module's tests.
//!
//! All math is 64-bit. CTC and anything else that multiplies long chains of
//! probabilities works in log domain, where `-inf` is a legal value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
}

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor filled with zeros. All extents must be positive.
    pub fn zeros(dims: &[usize]) -> Tensor {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {dims:?}"
        );
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor, NumError> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(NumError::Shape(format!("extents must be positive: {dims:?}")));
        }
        if expect != data.len() {
            return Err(NumError::Shape(format!(
                "dims {dims:?} need {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() needs a rank-2 tensor");
        self.dims[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() needs a rank-2 tensor");
        self.dims[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    if a.dims().len() != 2 || b.dims().len() != 2 {
        return Err(NumError::Shape(format!(
            "matmul needs rank-2 operands, got {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumError::Shape(format!(
            "inner dims disagree: {m}x{k} vs {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = b.row(kk);
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, NumError> {
    if logits.dims().len() != 2 {
        return Err(NumError::Shape(format!(
            "softmax_rows needs a rank-2 tensor, got {:?}",
            logits.dims()
        )));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(NumError::NonFinite("NaN in softmax input".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax, stable.
pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `log(sum(exp(v)))` computed stably; values may be `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Two-value log-sum-exp, the common case in CTC recursions.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Counter-based deterministic RNG.
///
/// The draw sequence depends only on `(seed, counter)`, so identical seeds
/// reproduce identical streams across runs, and derived streams make
/// per-utterance generation order-independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> SeededRng {
        SeededRng { seed, counter: 0 }
    }

    /// A statistically independent stream derived from this generator's seed.
    /// Does not consume state, so derivation order is irrelevant.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng {
            seed: mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Derive a stream from a string tag (e.g. an utterance id).
    pub fn derive_str(&self, tag: &str) -> SeededRng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Compare an analytic gradient against central finite differences of
/// `loss_fn` around `params`.
///
/// Returns the maximum over parameters of `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &Tensor,
    analytic_grad: &Tensor,
    step: f64,
) -> Result<f64, NumError>
where
    F: Fn(&Tensor) -> f64,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(NumError::BadStep(step));
    }
    if params.dims() != analytic_grad.dims() {
        return Err(NumError::Shape(format!(
            "params {:?} vs gradient {:?}",
            params.dims(),
            analytic_grad.dims()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = orig - step;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumError::NonFinite(format!(
                "loss not finite near parameter {i}: f(+)={up}, f(-)={down}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let a = analytic_grad.data()[i];
        let denom = a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

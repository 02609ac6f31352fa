//! The acoustic network: feed-forward layers, bidirectional LSTM layers,
//! and a linear output projection to |S| logits, with an exact hand-derived
//! backward pass through time.
//!
//! Parameters are plain 64-bit tensors. A forward pass caches activations
//! and gate values in a [`ForwardTrace`]; the backward pass consumes the
//! trace and returns gradients shaped like the parameters. Traces are tied
//! to a parameter revision so a stale trace is rejected instead of silently
//! producing wrong gradients.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::ctc::Alphabet;
use crate::frontend::FeatureSequence;
use crate::numcore::{SeededRng, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale forward trace: params revision {params} vs trace revision {trace}")]
    StaleTrace { params: u64, trace: u64 },
    #[error("checkpoint error: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint sidecar error: {0}")]
    Sidecar(String),
}

/// Network shape: dense widths before and after a stack of bidirectional
/// LSTM layers (widths are per direction), and the output symbol count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub ff_pre: Vec<usize>,
    pub blstm: Vec<usize>,
    pub ff_post: Vec<usize>,
    pub out_dim: usize,
}

impl ArchSpec {
    /// Small widths that train in seconds on a laptop core.
    pub fn desk(input_dim: usize, out_dim: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            ff_pre: vec![64, 64],
            blstm: vec![48, 48],
            ff_post: vec![64, 64],
            out_dim,
        }
    }

    /// Full-size preset: 500-wide dense layers around 300-per-direction
    /// BLSTM layers.
    pub fn paper(input_dim: usize, out_dim: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            ff_pre: vec![500, 500],
            blstm: vec![300, 300],
            ff_post: vec![500, 500],
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.out_dim == 0 {
            return Err(ModelError::BadArch("input/output dims must be >= 1".into()));
        }
        for &w in self.ff_pre.iter().chain(&self.ff_post).chain(&self.blstm) {
            if w == 0 {
                return Err(ModelError::BadArch("zero-width layer".into()));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut d = self.input_dim;
        for &w in &self.ff_pre {
            total += w * d + w;
            d = w;
        }
        for &h in &self.blstm {
            total += 2 * (4 * h * d + 4 * h * h + 4 * h);
            d = 2 * h;
        }
        for &w in &self.ff_post {
            total += w * d + w;
            d = w;
        }
        total + self.out_dim * d + self.out_dim
    }
}

/// One LSTM direction: input weights (4H x D), recurrent weights (4H x H),
/// and bias (4H). Gate blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmDirParams {
    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Dense layer; `relu` is false only for the output projection.
    Dense { w: Tensor, b: Tensor, relu: bool },
    Blstm { fwd: LstmDirParams, bwd: LstmDirParams },
}

static REVISION: AtomicU64 = AtomicU64::new(1);

fn next_revision() -> u64 {
    REVISION.fetch_add(1, Ordering::Relaxed)
}

/// All weights and biases of the network.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchSpec,
    layers: Vec<Layer>,
    revision: u64,
}

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams;

/// Uniform Glorot init: +-sqrt(6 / (fan_in + fan_out)) per weight tensor,
/// zero biases, except the LSTM forget-gate bias which starts at 1.
pub fn init_params(arch: &ArchSpec, rng: &mut SeededRng) -> Result<ModelParams, ModelError> {
    arch.validate()?;
    let glorot = |rows: usize, cols: usize, rng: &mut SeededRng| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::from_vec(&[rows, cols], data).expect("positive dims")
    };
    let lstm_dir = |d: usize, h: usize, rng: &mut SeededRng| {
        let mut b = Tensor::zeros(&[4 * h]);
        for i in h..2 * h {
            b.data_mut()[i] = 1.0; // forget gate block
        }
        LstmDirParams {
            w_x: glorot(4 * h, d, rng),
            w_h: glorot(4 * h, h, rng),
            b,
        }
    };

    let mut layers = Vec::new();
    let mut d = arch.input_dim;
    for &w in &arch.ff_pre {
        layers.push(Layer::Dense {
            w: glorot(w, d, rng),
            b: Tensor::zeros(&[w]),
            relu: true,
        });
        d = w;
    }
    for &h in &arch.blstm {
        layers.push(Layer::Blstm {
            fwd: lstm_dir(d, h, rng),
            bwd: lstm_dir(d, h, rng),
        });
        d = 2 * h;
    }
    for &w in &arch.ff_post {
        layers.push(Layer::Dense {
            w: glorot(w, d, rng),
            b: Tensor::zeros(&[w]),
            relu: true,
        });
        d = w;
    }
    layers.push(Layer::Dense {
        w: glorot(arch.out_dim, d, rng),
        b: Tensor::zeros(&[arch.out_dim]),
        relu: false,
    });

    Ok(ModelParams {
        arch: arch.clone(),
        layers,
        revision: next_revision(),
    })
}

impl ModelParams {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// A zero-filled gradient container with this parameter layout.
    pub fn zeros_like(&self) -> ModelGrads {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { w, b, relu } => Layer::Dense {
                    w: Tensor::zeros(w.dims()),
                    b: Tensor::zeros(b.dims()),
                    relu: *relu,
                },
                Layer::Blstm { fwd, bwd } => Layer::Blstm {
                    fwd: LstmDirParams {
                        w_x: Tensor::zeros(fwd.w_x.dims()),
                        w_h: Tensor::zeros(fwd.w_h.dims()),
                        b: Tensor::zeros(fwd.b.dims()),
                    },
                    bwd: LstmDirParams {
                        w_x: Tensor::zeros(bwd.w_x.dims()),
                        w_h: Tensor::zeros(bwd.w_h.dims()),
                        b: Tensor::zeros(bwd.b.dims()),
                    },
                },
            })
            .collect();
        ModelParams {
            arch: self.arch.clone(),
            layers,
            revision: next_revision(),
        }
    }

    /// Visit every parameter in canonical (checkpoint) order.
    pub fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b, .. } => {
                    w.data().iter().for_each(|&v| f(v));
                    b.data().iter().for_each(|&v| f(v));
                }
                Layer::Blstm { fwd, bwd } => {
                    for dir in [fwd, bwd] {
                        dir.w_x.data().iter().for_each(|&v| f(v));
                        dir.w_h.data().iter().for_each(|&v| f(v));
                        dir.b.data().iter().for_each(|&v| f(v));
                    }
                }
            }
        }
    }

    /// Visit every parameter mutably in canonical order. Invalidates any
    /// outstanding forward traces.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b, .. } => {
                    w.data_mut().iter_mut().for_each(&mut f);
                    b.data_mut().iter_mut().for_each(&mut f);
                }
                Layer::Blstm { fwd, bwd } => {
                    for dir in [fwd, bwd] {
                        dir.w_x.data_mut().iter_mut().for_each(&mut f);
                        dir.w_h.data_mut().iter_mut().for_each(&mut f);
                        dir.b.data_mut().iter_mut().for_each(&mut f);
                    }
                }
            }
        }
        self.revision = next_revision();
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_| n += 1);
        n
    }

    pub fn to_flat(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.arch.param_count());
        self.for_each_param(|v| data.push(v));
        Tensor::from_vec(&[data.len()], data).expect("non-empty")
    }

    pub fn from_flat(arch: &ArchSpec, flat: &Tensor) -> Result<ModelParams, ModelError> {
        if flat.len() != arch.param_count() {
            return Err(ModelError::Shape(format!(
                "flat vector has {} values, arch needs {}",
                flat.len(),
                arch.param_count()
            )));
        }
        let mut rng = SeededRng::new(0);
        let mut params = init_params(arch, &mut rng)?;
        let mut it = flat.data().iter();
        params.for_each_param_mut(|v| *v = *it.next().expect("length checked"));
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|v| ok &= v.is_finite());
        ok
    }

    /// self += scale * other, matched layouts required.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) -> Result<(), ModelError> {
        if self.arch != other.arch {
            return Err(ModelError::Shape("axpy across different architectures".into()));
        }
        let mut values = Vec::with_capacity(other.arch.param_count());
        other.for_each_param(|v| values.push(v));
        let mut it = values.iter();
        self.for_each_param_mut(|v| *v += scale * *it.next().expect("same layout"));
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_param_mut(|v| *v *= s);
    }

    /// Euclidean norm over all parameters.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_param(|v| acc += v * v);
        acc.sqrt()
    }

    /// Named tensors in checkpoint order.
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let (mut n_ff_pre, mut n_blstm, mut n_ff_post) = (0usize, 0usize, 0usize);
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b, relu } => {
                    let name = if !relu {
                        "out".to_string()
                    } else if n_blstm == 0 {
                        let s = format!("ff_pre.{n_ff_pre}");
                        n_ff_pre += 1;
                        s
                    } else {
                        let s = format!("ff_post.{n_ff_post}");
                        n_ff_post += 1;
                        s
                    };
                    out.push((format!("{name}.w"), w.clone()));
                    out.push((format!("{name}.b"), b.clone()));
                }
                Layer::Blstm { fwd, bwd } => {
                    for (tag, dir) in [("fwd", fwd), ("bwd", bwd)] {
                        out.push((format!("blstm.{n_blstm}.{tag}.w_x"), dir.w_x.clone()));
                        out.push((format!("blstm.{n_blstm}.{tag}.w_h"), dir.w_h.clone()));
                        out.push((format!("blstm.{n_blstm}.{tag}.b"), dir.b.clone()));
                    }
                    n_blstm += 1;
                }
            }
        }
        out
    }
}

/// JSON sidecar stored next to each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub alphabet: Alphabet,
}

/// Write `<path>` as an ACDM container plus a `<path>.json` sidecar holding
/// the architecture and alphabet.
pub fn save_checkpoint(
    params: &ModelParams,
    alphabet: &Alphabet,
    path: &Path,
) -> Result<(), ModelError> {
    let mut c = Container::new();
    for (name, tensor) in params.named_tensors() {
        c.push(&name, tensor);
    }
    c.save(path)?;
    let meta = CheckpointMeta {
        arch: params.arch.clone(),
        alphabet: alphabet.clone(),
    };
    let json =
        serde_json::to_string_pretty(&meta).map_err(|e| ModelError::Sidecar(e.to_string()))?;
    std::fs::write(sidecar_path(path), json).map_err(|e| ModelError::Sidecar(e.to_string()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Alphabet), ModelError> {
    let json = std::fs::read_to_string(sidecar_path(path))
        .map_err(|e| ModelError::Sidecar(format!("{}: {e}", sidecar_path(path).display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&json).map_err(|e| ModelError::Sidecar(e.to_string()))?;
    let c = Container::load(path)?;
    let mut rng = SeededRng::new(0);
    let mut params = init_params(&meta.arch, &mut rng)?;
    let mut flat = Vec::with_capacity(meta.arch.param_count());
    for (name, tensor) in params.named_tensors() {
        let loaded = c.get(&name)?;
        if loaded.dims() != tensor.dims() {
            return Err(ModelError::Shape(format!(
                "checkpoint tensor {name}: dims {:?} vs arch {:?}",
                loaded.dims(),
                tensor.dims()
            )));
        }
        flat.extend_from_slice(loaded.data());
    }
    let mut it = flat.iter();
    params.for_each_param_mut(|v| *v = *it.next().expect("sizes checked"));
    Ok((params, meta.alphabet))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

// ---------------------------------------------------------------------------
// Forward / backward

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Four-accumulator dot product; the split accumulators let the compiler
/// vectorize the reduction without reassociating a single serial chain.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// out = w.x (w is rows x cols, x has cols entries).
fn matvec(w: &Tensor, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(r), x);
    }
}

/// out += w.x
fn matvec_acc(w: &Tensor, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(r), x);
    }
}

/// out += w^T . v
fn matvec_t_acc(w: &Tensor, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows(), v.len());
    debug_assert_eq!(w.cols(), out.len());
    for (r, &vr) in v.iter().enumerate() {
        let row = w.row(r);
        for (o, &wv) in out.iter_mut().zip(row.iter()) {
            *o += vr * wv;
        }
    }
}

/// gw += v (outer) x
fn outer_acc(gw: &mut Tensor, v: &[f64], x: &[f64]) {
    debug_assert_eq!(gw.rows(), v.len());
    debug_assert_eq!(gw.cols(), x.len());
    for (r, &vr) in v.iter().enumerate() {
        let row = gw.row_mut(r);
        for (g, &xv) in row.iter_mut().zip(x.iter()) {
            *g += vr * xv;
        }
    }
}

/// One LSTM cell update:
/// i,f,o = sigmoid gates, g = tanh candidate, c = f*c_prev + i*g,
/// h = o*tanh(c).
pub fn lstm_cell_step(
    p: &LstmDirParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden();
    let mut gates = vec![0.0; 4 * h];
    matvec(&p.w_x, x_t, &mut gates);
    matvec_acc(&p.w_h, h_prev, &mut gates);
    for (g, &b) in gates.iter_mut().zip(p.b.data()) {
        *g += b;
    }
    let mut c = vec![0.0; h];
    let mut out_h = vec![0.0; h];
    for j in 0..h {
        let i_g = sigmoid(gates[j]);
        let f_g = sigmoid(gates[h + j]);
        let g_g = gates[2 * h + j].tanh();
        let o_g = sigmoid(gates[3 * h + j]);
        c[j] = f_g * c_prev[j] + i_g * g_g;
        out_h[j] = o_g * c[j].tanh();
    }
    (out_h, c)
}

/// Per-direction cached activations, indexed by frame.
#[derive(Debug, Clone)]
struct DirTrace {
    /// Post-activation gates per frame: [i | f | g | o], N x 4H.
    gates: Tensor,
    c: Tensor,
    tanh_c: Tensor,
    h: Tensor,
    reversed: bool,
}

#[derive(Debug, Clone)]
enum LayerTrace {
    Dense { pre: Tensor },
    Blstm { fwd: DirTrace, bwd: DirTrace },
}

/// Cached activations of one utterance, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    revision: u64,
    /// Input to each layer; `layer_inputs[i]` feeds `layers[i]`.
    layer_inputs: Vec<Tensor>,
    details: Vec<LayerTrace>,
}

impl ForwardTrace {
    /// Hidden state (forward and backward halves) of the index-th BLSTM
    /// layer. Analysis hook; not needed for training.
    pub fn blstm_hidden(&self, index: usize) -> Option<(Tensor, Tensor)> {
        self.details
            .iter()
            .filter_map(|d| match d {
                LayerTrace::Blstm { fwd, bwd } => Some((fwd.h.clone(), bwd.h.clone())),
                _ => None,
            })
            .nth(index)
    }
}

fn dir_forward(p: &LstmDirParams, input: &Tensor, reversed: bool) -> DirTrace {
    let n = input.rows();
    let h = p.hidden();
    let mut gates = Tensor::zeros(&[n, 4 * h]);
    let mut cs = Tensor::zeros(&[n, h]);
    let mut tcs = Tensor::zeros(&[n, h]);
    let mut hs = Tensor::zeros(&[n, h]);
    let zero = vec![0.0; h];

    let order: Vec<usize> = if reversed {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let mut prev: Option<usize> = None;
    for &t in &order {
        let mut a = vec![0.0; 4 * h];
        matvec(&p.w_x, input.row(t), &mut a);
        {
            let h_prev = prev.map_or(&zero[..], |pt| hs.row(pt));
            matvec_acc(&p.w_h, h_prev, &mut a);
        }
        for (g, &b) in a.iter_mut().zip(p.b.data()) {
            *g += b;
        }
        for j in 0..h {
            let i_g = sigmoid(a[j]);
            let f_g = sigmoid(a[h + j]);
            let g_g = a[2 * h + j].tanh();
            let o_g = sigmoid(a[3 * h + j]);
            let c_prev = prev.map_or(0.0, |pt| cs.at(pt, j));
            let c = f_g * c_prev + i_g * g_g;
            let tc = c.tanh();
            gates.set(t, j, i_g);
            gates.set(t, h + j, f_g);
            gates.set(t, 2 * h + j, g_g);
            gates.set(t, 3 * h + j, o_g);
            cs.set(t, j, c);
            tcs.set(t, j, tc);
            hs.set(t, j, o_g * tc);
        }
        prev = Some(t);
    }
    DirTrace {
        gates,
        c: cs,
        tanh_c: tcs,
        h: hs,
        reversed,
    }
}

/// Run the network over one utterance. Returns N x |S| logits and the
/// activation trace needed by [`backward`].
pub fn forward(
    params: &ModelParams,
    x: &FeatureSequence,
) -> Result<(Tensor, ForwardTrace), ModelError> {
    if x.dim() != params.arch.input_dim {
        return Err(ModelError::Shape(format!(
            "input dim {} vs arch input_dim {}",
            x.dim(),
            params.arch.input_dim
        )));
    }
    let n = x.n_frames();
    let mut current = x.frames.clone();
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut details = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        layer_inputs.push(current.clone());
        match layer {
            Layer::Dense { w, b, relu } => {
                let out_dim = w.rows();
                let mut pre = Tensor::zeros(&[n, out_dim]);
                for t in 0..n {
                    let row_in = layer_inputs.last().expect("pushed above").row(t);
                    let row_out = pre.row_mut(t);
                    matvec(w, row_in, row_out);
                    for (v, &bv) in row_out.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                let mut out = pre.clone();
                if *relu {
                    for v in out.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                details.push(LayerTrace::Dense { pre });
                current = out;
            }
            Layer::Blstm { fwd, bwd } => {
                let f = dir_forward(fwd, &current, false);
                let b = dir_forward(bwd, &current, true);
                let h = fwd.hidden();
                let mut out = Tensor::zeros(&[n, 2 * h]);
                for t in 0..n {
                    out.row_mut(t)[..h].copy_from_slice(f.h.row(t));
                    out.row_mut(t)[h..].copy_from_slice(b.h.row(t));
                }
                details.push(LayerTrace::Blstm { fwd: f, bwd: b });
                current = out;
            }
        }
    }

    Ok((
        current,
        ForwardTrace {
            revision: params.revision,
            layer_inputs,
            details,
        },
    ))
}

fn dir_backward(
    p: &LstmDirParams,
    input: &Tensor,
    trace: &DirTrace,
    dh_out: &Tensor,
    grads: &mut LstmDirParams,
    dx: &mut Tensor,
) {
    let n = input.rows();
    let h = p.hidden();
    let zero = vec![0.0; h];

    // Forward processing order, walked backwards.
    let order: Vec<usize> = if trace.reversed {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    let mut dh_carry = vec![0.0; h];
    let mut dc_carry = vec![0.0; h];
    for (pos, &t) in order.iter().enumerate().rev() {
        let prev = if pos > 0 { Some(order[pos - 1]) } else { None };
        let gates = trace.gates.row(t);
        let tc = trace.tanh_c.row(t);
        let c_prev = prev.map_or(&zero[..], |pt| trace.c.row(pt));
        let h_prev = prev.map_or(&zero[..], |pt| trace.h.row(pt));

        let mut da = vec![0.0; 4 * h];
        for j in 0..h {
            let i_g = gates[j];
            let f_g = gates[h + j];
            let g_g = gates[2 * h + j];
            let o_g = gates[3 * h + j];
            let dh = dh_out.at(t, j) + dh_carry[j];
            let d_o = dh * tc[j];
            let dc = dh * o_g * (1.0 - tc[j] * tc[j]) + dc_carry[j];
            let d_f = dc * c_prev[j];
            let d_i = dc * g_g;
            let d_g = dc * i_g;
            dc_carry[j] = dc * f_g;
            da[j] = d_i * i_g * (1.0 - i_g);
            da[h + j] = d_f * f_g * (1.0 - f_g);
            da[2 * h + j] = d_g * (1.0 - g_g * g_g);
            da[3 * h + j] = d_o * o_g * (1.0 - o_g);
        }
        outer_acc(&mut grads.w_x, &da, input.row(t));
        outer_acc(&mut grads.w_h, &da, h_prev);
        for (g, &d) in grads.b.data_mut().iter_mut().zip(da.iter()) {
            *g += d;
        }
        matvec_t_acc(&p.w_x, &da, dx.row_mut(t));
        dh_carry.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&p.w_h, &da, &mut dh_carry);
    }
}

/// Exact gradients of the loss implied by `grad_logits` w.r.t. every
/// parameter. The trace must come from a [`forward`] call on the same,
/// unmodified parameters.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
) -> Result<ModelGrads, ModelError> {
    if trace.revision != params.revision {
        return Err(ModelError::StaleTrace {
            params: params.revision,
            trace: trace.revision,
        });
    }
    let n = trace.layer_inputs[0].rows();
    if grad_logits.dims() != [n, params.arch.out_dim] {
        return Err(ModelError::Shape(format!(
            "grad_logits {:?}, expected [{n}, {}]",
            grad_logits.dims(),
            params.arch.out_dim
        )));
    }

    let mut grads = params.zeros_like();
    let mut d_current = grad_logits.clone();

    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let input = &trace.layer_inputs[idx];
        let mut d_input = Tensor::zeros(&[n, input.cols()]);
        match (layer, &trace.details[idx], &mut grads.layers[idx]) {
            (
                Layer::Dense { w, relu, .. },
                LayerTrace::Dense { pre },
                Layer::Dense { w: gw, b: gb, .. },
            ) => {
                for t in 0..n {
                    let mut da = d_current.row(t).to_vec();
                    if *relu {
                        for (d, &p) in da.iter_mut().zip(pre.row(t)) {
                            if p <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    outer_acc(gw, &da, input.row(t));
                    for (g, &d) in gb.data_mut().iter_mut().zip(da.iter()) {
                        *g += d;
                    }
                    matvec_t_acc(w, &da, d_input.row_mut(t));
                }
            }
            (
                Layer::Blstm { fwd, bwd },
                LayerTrace::Blstm { fwd: ft, bwd: bt },
                Layer::Blstm { fwd: gf, bwd: gb },
            ) => {
                let h = fwd.hidden();
                let mut d_fwd = Tensor::zeros(&[n, h]);
                let mut d_bwd = Tensor::zeros(&[n, h]);
                for t in 0..n {
                    d_fwd.row_mut(t).copy_from_slice(&d_current.row(t)[..h]);
                    d_bwd.row_mut(t).copy_from_slice(&d_current.row(t)[h..]);
                }
                dir_backward(fwd, input, ft, &d_fwd, gf, &mut d_input);
                dir_backward(bwd, input, bt, &d_bwd, gb, &mut d_input);
            }
            _ => unreachable!("trace layout mirrors the layer list"),
        }
        d_current = d_input;
    }

    Ok(grads)
}

//! Acoustic model workbench: CTC-trained bidirectional LSTM networks,
//! tempered-softmax knowledge distillation, and a multi-generation
//! accent-specific teacher-student training pipeline.
//!
//! Everything runs on a deterministic synthetic multi-accent corpus so the
//! full pipeline (corpus generation, training, distillation, decoding,
//! evaluation) is reproducible bit-for-bit from a single seed on a laptop.
//!
//! Module map:
//! - [`numcore`]: dense tensors, stable softmax / log-sum-exp, seeded RNG,
//!   finite-difference gradient checking.
//! - [`container`]: the binary tensor container used for checkpoints,
//!   features and soft targets.
//! - [`frontend`]: framing, mel filterbank, context stacking, decimation.
//! - [`model`]: the FF + BLSTM + FF acoustic network with a hand-derived
//!   backward pass.
//! - [`ctc`]: the CTC objective (forward-backward in log domain) plus a
//!   brute-force enumeration oracle.
//! - [`distill`]: tempered softmax, teacher cross-entropy, combined and
//!   KL-adaptation losses.
//! - [`decode`]: best-path and prefix beam-search decoding, edit distance,
//!   CER, and the character-spike-overlap metric.
//! - [`corpus`]: the synthetic multi-accent corpus generator.
//! - [`pipeline`]: Adam, the training loop, experiment plans and reports.

pub mod container;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod distill;
pub mod frontend;
pub mod model;
pub mod numcore;
pub mod pipeline;

/// Error classes mapped to process exit codes by the CLI.
///
/// 2 = bad configuration, 3 = bad or missing data, 4 = numeric failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

//! Datasets and temporal input encodings.
//!
//! Every sample is a `(T, input_dim)` sequence of input currents. Sources:
//! a seeded synthetic generator with timestep-dependent drift, IDX image
//! files under constant coding, and CSV event streams binned into frames.

pub mod events;
pub mod idx;
pub mod store;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::Tensor;

pub use events::{bin_events, load_event_dir, parse_event_csv, EventRecord};
pub use idx::{constant_code, load_idx, parse_idx, StaticSample};
pub use store::{load_dataset, save_dataset};
pub use synth::{synth_generate, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("unsupported dataset file version {0}")]
    Version(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("event list is empty")]
    EmptyEvents,
    #[error("events not sorted by timestamp at row {0}")]
    Unsorted(usize),
    #[error("event {index} at ({x}, {y}) outside {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("malformed event csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One input sequence and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(T, input_dim)` input currents.
    pub input_seq: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn timesteps(&self) -> usize {
        self.input_seq.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.input_seq.shape()[1]
    }

    /// Input current at step `t` (0-based).
    pub fn step(&self, t: usize) -> &[f64] {
        let d = self.input_dim();
        &self.input_seq.data()[t * d..(t + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
    pub input_dim: usize,
    pub timesteps: usize,
}

impl Dataset {
    /// Checks every sample against the declared dimensions.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 2 {
            return Err(DataError::InvalidSpec("need at least 2 classes".into()));
        }
        for (i, s) in self.train.iter().chain(&self.test).enumerate() {
            if s.input_seq.shape() != [self.timesteps, self.input_dim] {
                return Err(DataError::InvalidSpec(format!(
                    "sample {i} has shape {:?}, expected [{}, {}]",
                    s.input_seq.shape(),
                    self.timesteps,
                    self.input_dim
                )));
            }
            if s.label >= self.classes {
                return Err(DataError::InvalidSpec(format!(
                    "sample {i} label {} >= {} classes",
                    s.label, self.classes
                )));
            }
            if !s.input_seq.is_finite() {
                return Err(DataError::InvalidSpec(format!("sample {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Held-out rule shared by all sources: every fifth sample of a class
/// (within-class index `k % 5 == 4`) goes to the test split.
pub fn is_test_index(within_class: usize) -> bool {
    within_class % 5 == 4
}

//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `SNNCKPT\0`, version `u32`, canonical config
//! text (`u64` length + UTF-8), completed epochs `u64`, parameter count `u32`
//! and named tensors `w0..`, optimizer step `u64`, moment count `u32` and
//! named tensors `m0..` then `v0..`, and the shuffling RNG (32-byte seed,
//! stream `u64`, word position `u128`). Each named tensor is name length
//! `u32`, name, rank `u32`, dims `u64`, then `f64` data.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::binio::{Reader, Truncated, Writer};
use crate::config::{ConfigError, RunConfig};
use crate::optim::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("tensor `{name}` has shape {got:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

impl From<Truncated> for CheckpointError {
    fn from(_: Truncated) -> Self {
        CheckpointError::Truncated
    }
}

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume a run between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<Tensor>,
    pub optimizer: OptimState,
    pub rng: RngState,
}

impl Checkpoint {
    /// Checks tensor counts and shapes against the config.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        self.config.validate()?;
        if self.epoch > self.config.epochs {
            return Err(CheckpointError::Corrupt(format!(
                "epoch {} beyond configured {}",
                self.epoch, self.config.epochs
            )));
        }
        let shapes = self.config.network.weight_shapes();
        for (prefix, tensors) in [
            ("w", &self.params),
            ("m", &self.optimizer.m),
            ("v", &self.optimizer.v),
        ] {
            if tensors.len() != shapes.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "{} `{prefix}` tensors, config implies {}",
                    tensors.len(),
                    shapes.len()
                )));
            }
            for (i, (t, want)) in tensors.iter().zip(&shapes).enumerate() {
                if t.shape() != want.as_slice() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: format!("{prefix}{i}"),
                        expected: want.to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.blob(ckpt.config.to_canonical_text().as_bytes());
    w.u64(ckpt.epoch as u64);
    w.u32(ckpt.params.len() as u32);
    for (i, p) in ckpt.params.iter().enumerate() {
        w.named_tensor(&format!("w{i}"), p);
    }
    w.u64(ckpt.optimizer.step);
    w.u32(ckpt.optimizer.m.len() as u32);
    for (i, m) in ckpt.optimizer.m.iter().enumerate() {
        w.named_tensor(&format!("m{i}"), m);
    }
    for (i, v) in ckpt.optimizer.v.iter().enumerate() {
        w.named_tensor(&format!("v{i}"), v);
    }
    w.bytes(&ckpt.rng.seed);
    w.u64(ckpt.rng.stream);
    w.u128(ckpt.rng.word_pos);
    w.finish()
}

fn read_tensors(
    r: &mut Reader<'_>,
    prefix: &str,
    count: usize,
    shapes: &[[usize; 2]],
) -> Result<Vec<Tensor>, CheckpointError> {
    if count != shapes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} `{prefix}` tensors, config implies {}",
            shapes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (i, want) in shapes.iter().enumerate() {
        let (name, shape, data) = r.named_tensor()?;
        let expected_name = format!("{prefix}{i}");
        if name != expected_name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor `{expected_name}`, found `{name}`"
            )));
        }
        if shape != want.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: want.to_vec(),
                got: shape,
            });
        }
        out.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
    }
    Ok(out)
}

/// Parses a whole checkpoint; nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader::new(bytes);
    if r.bytes(CHECKPOINT_MAGIC.len()).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let text = std::str::from_utf8(r.blob()?)
        .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
    let config = RunConfig::parse(text, &[])?;
    let shapes = config.network.weight_shapes();
    let epoch = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Corrupt("epoch".into()))?;
    let n = r.u32()? as usize;
    let params = read_tensors(&mut r, "w", n, &shapes)?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let m = read_tensors(&mut r, "m", n, &shapes)?;
    let v = read_tensors(&mut r, "v", n, &shapes)?;
    let seed: [u8; 32] = r.bytes(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if !r.is_at_end() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let ckpt = Checkpoint {
        config,
        epoch,
        params,
        optimizer: OptimState { step, m, v },
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Trainer;

    fn sample() -> Checkpoint {
        let cfg = RunConfig::parse(
            "network.layers=4,3,2\nnetwork.timesteps=2\ntrain.epochs=1\ndata.synth.samples_per_class=5",
            &[],
        )
        .unwrap();
        let ds = cfg.data.load(2).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.run_epoch(&ds).unwrap();
        trainer.checkpoint()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_checkpoint(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(CheckpointError::Version { found: 2, .. })
        ));

        for cut in [4, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(CheckpointError::Truncated | CheckpointError::BadMagic)
            ));
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn shape_inconsistency_is_reported() {
        let mut ckpt = sample();
        ckpt.params[0] = Tensor::zeros(&[3, 3]);
        let bytes = encode_checkpoint(&ckpt);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::ShapeMismatch { name, .. }) if name == "w0"
        ));
    }

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(1);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}

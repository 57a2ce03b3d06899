//! Binary dataset dump so a generated dataset can be reused across runs.
//!
//! Layout (little-endian): magic `SNNDATA\0`, version `u32`, spec echo
//! (`u64` length + UTF-8), classes, input_dim, timesteps, train count, test
//! count (all `u64`), then per sample a `u64` label and `T * D` `f64` values.

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Sample};
use crate::autodiff::Tensor;
use crate::binio::{Reader, Truncated, Writer};

pub const DATASET_MAGIC: &[u8; 8] = b"SNNDATA\0";
pub const DATASET_VERSION: u32 = 1;

impl From<Truncated> for DataError {
    fn from(_: Truncated) -> Self {
        DataError::Truncated("dataset file".into())
    }
}

pub fn encode_dataset(dataset: &Dataset, echo: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.blob(echo.as_bytes());
    for n in [
        dataset.classes,
        dataset.input_dim,
        dataset.timesteps,
        dataset.train.len(),
        dataset.test.len(),
    ] {
        w.u64(n as u64);
    }
    for s in dataset.train.iter().chain(&dataset.test) {
        w.u64(s.label as u64);
        w.f64s(s.input_seq.data());
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, String), DataError> {
    let mut r = Reader::new(bytes);
    let magic = r.bytes(8)?;
    if magic != DATASET_MAGIC {
        return Err(DataError::BadMagic {
            expected: u32::from_le_bytes(DATASET_MAGIC[..4].try_into().expect("4 bytes")),
            found: u32::from_le_bytes(magic[..4].try_into().expect("4 bytes")),
        });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(DataError::Version(version));
    }
    let echo = String::from_utf8_lossy(r.blob()?).into_owned();
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = usize::try_from(r.u64()?).map_err(|_| Truncated)?;
    }
    let [classes, input_dim, timesteps, n_train, n_test] = dims;
    if input_dim == 0 || timesteps == 0 {
        return Err(DataError::InvalidSpec("zero-sized samples".into()));
    }
    let mut read = |n: usize| -> Result<Vec<Sample>, DataError> {
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let label = r.u64()? as usize;
            let data = r.f64s(timesteps * input_dim)?;
            out.push(Sample {
                input_seq: Tensor::new(vec![timesteps, input_dim], data).expect("checked dims"),
                label,
            });
        }
        Ok(out)
    };
    let train = read(n_train)?;
    let test = read(n_test)?;
    if !r.is_at_end() {
        return Err(DataError::InvalidSpec(
            "trailing bytes after dataset".into(),
        ));
    }
    let dataset = Dataset {
        train,
        test,
        classes,
        input_dim,
        timesteps,
    };
    dataset.validate()?;
    Ok((dataset, echo))
}

pub fn save_dataset(
    dataset: &Dataset,
    echo: &str,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(dataset, echo)).map_err(|e| DataError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, String), DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_dataset(&bytes)
}

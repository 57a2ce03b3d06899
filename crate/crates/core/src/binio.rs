//! Little-endian primitives shared by the dataset and checkpoint formats.

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Truncated;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    /// `u64` length prefix followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }

    /// name length (u32), name, rank (u32), dims (u64 each), data (f64).
    pub fn named_tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.bytes(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        let end = self.pos.checked_add(n).ok_or(Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], Truncated> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn u128(&mut self) -> Result<u128, Truncated> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    pub fn blob(&mut self) -> Result<&'a [u8], Truncated> {
        let n = self.u64()?;
        self.bytes(usize::try_from(n).map_err(|_| Truncated)?)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, Truncated> {
        let raw = self.bytes(n.checked_mul(8).ok_or(Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Returns the name, the shape and the data; the shape is not checked
    /// against anything here.
    pub fn named_tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), Truncated> {
        let len = self.u32()? as usize;
        let name = String::from_utf8_lossy(self.bytes(len)?).into_owned();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Truncated)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Truncated)?;
        let data = self.f64s(n)?;
        Ok((name, shape, data))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

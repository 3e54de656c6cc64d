//! Binary user/item codes and real-valued embeddings.
//!
//! Codes are stored bit-packed, one row per entity, in `u64` words. Bit `k`
//! of a row is bit `k % 64` of word `k / 64`; a set bit is `+1`, a clear bit
//! is `-1`. Padding bits past `dim` are always zero so whole-word xor and
//! popcount give exact distances.
//!
//! On disk a code matrix is
//!
//! ```text
//! "DSML" | version: u32 LE (=1) | rows: u64 LE | dim: u32 LE | payload
//! ```
//!
//! where the payload holds `rows * ceil(dim / 8)` bytes, row-major, LSB-first
//! within each byte. Embeddings use the same header with magic `"DSMR"` and a
//! payload of `rows * dim` little-endian `f64` values.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const CODE_MAGIC: [u8; 4] = *b"DSML";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"DSMR";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[inline]
fn words_for(dim: usize) -> usize {
    dim.div_ceil(64)
}

/// Borrowed view of one packed code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodeRow<'a> {
    words: &'a [u64],
    dim: usize,
}

impl<'a> CodeRow<'a> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &'a [u64] {
        self.words
    }

    /// Entry `k` as `+1` or `-1`.
    #[inline]
    pub fn sign(&self, k: usize) -> i8 {
        if (self.words[k / 64] >> (k % 64)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn signs(&self) -> Vec<i8> {
        (0..self.dim).map(|k| self.sign(k)).collect()
    }

    /// Entries as `±1.0`.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.dim).map(|k| f64::from(self.sign(k))).collect()
    }

    /// Number of differing coordinates; dimensions are not checked.
    #[inline]
    pub fn hamming_unchecked(&self, other: &CodeRow<'_>) -> u32 {
        self.words
            .iter()
            .zip(other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// `d - 2 * hamming`; dimensions are not checked.
    #[inline]
    pub fn inner_unchecked(&self, other: &CodeRow<'_>) -> i64 {
        self.dim as i64 - 2 * i64::from(self.hamming_unchecked(other))
    }
}

fn check_dims(a: &CodeRow<'_>, b: &CodeRow<'_>) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    Ok(())
}

/// Inner product of two `±1` codes, in `[-d, d]`.
pub fn inner_product(a: CodeRow<'_>, b: CodeRow<'_>) -> Result<i64> {
    check_dims(&a, &b)?;
    Ok(a.inner_unchecked(&b))
}

/// Number of coordinates where the codes differ, equal to `(d - aᵀb) / 2`.
pub fn hamming_distance(a: CodeRow<'_>, b: CodeRow<'_>) -> Result<u32> {
    check_dims(&a, &b)?;
    Ok(a.hamming_unchecked(&b))
}

/// Angle between two codes, `arccos(aᵀb / d)`.
pub fn code_angle(a: CodeRow<'_>, b: CodeRow<'_>) -> Result<f64> {
    let inner = inner_product(a, b)?;
    Ok((inner as f64 / a.dim as f64).clamp(-1.0, 1.0).acos())
}

/// Bit-packed `±1` codes, one row per user or item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryCodeMatrix {
    rows: usize,
    dim: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BinaryCodeMatrix {
    /// All-`-1` matrix.
    pub fn new(rows: usize, dim: usize) -> Self {
        let words_per_row = words_for(dim);
        Self {
            rows,
            dim,
            words_per_row,
            bits: vec![0; rows * words_per_row],
        }
    }

    /// Builds a matrix where `positive(r, k)` decides whether entry `(r, k)`
    /// is `+1`.
    pub fn from_fn(
        rows: usize,
        dim: usize,
        mut positive: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut m = Self::new(rows, dim);
        for r in 0..rows {
            for k in 0..dim {
                if positive(r, k) {
                    m.bits[r * m.words_per_row + k / 64] |= 1 << (k % 64);
                }
            }
        }
        m
    }

    /// Builds a matrix from row-major `±1` entries.
    pub fn from_signs(rows: usize, dim: usize, signs: &[i8]) -> Result<Self> {
        if signs.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                left: signs.len(),
                right: rows * dim,
            });
        }
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidParameter(format!(
                "code entry {bad} is not ±1"
            )));
        }
        Ok(Self::from_fn(rows, dim, |r, k| signs[r * dim + k] > 0))
    }

    /// Uniformly random codes.
    pub fn random(rows: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, dim, |_, _| rng.random::<bool>())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// The packed words, row-major.
    pub fn as_words(&self) -> &[u64] {
        &self.bits
    }

    #[inline]
    pub fn row(&self, r: usize) -> CodeRow<'_> {
        let start = r * self.words_per_row;
        CodeRow {
            words: &self.bits[start..start + self.words_per_row],
            dim: self.dim,
        }
    }

    pub fn checked_row(&self, r: usize) -> Result<CodeRow<'_>> {
        if r >= self.rows {
            return Err(Error::IndexOutOfRange {
                index: r,
                len: self.rows,
            });
        }
        Ok(self.row(r))
    }

    pub fn get(&self, r: usize, k: usize) -> i8 {
        self.row(r).sign(k)
    }

    /// Overwrites row `r` from `±1` entries (any positive value is `+1`).
    pub fn set_row(&mut self, r: usize, signs: &[i8]) -> Result<()> {
        if signs.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: signs.len(),
                right: self.dim,
            });
        }
        let start = r * self.words_per_row;
        let row = &mut self.bits[start..start + self.words_per_row];
        row.fill(0);
        for (k, &s) in signs.iter().enumerate() {
            if s > 0 {
                row[k / 64] |= 1 << (k % 64);
            }
        }
        Ok(())
    }

    /// Bytes of one serialized row.
    pub fn row_bytes(&self) -> usize {
        self.dim.div_ceil(8)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let row_bytes = self.row_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows * row_bytes);
        write_header(&mut out, CODE_MAGIC, self.rows, self.dim);
        for r in 0..self.rows {
            let row: Vec<u8> = self
                .row(r)
                .words
                .iter()
                .flat_map(|w| w.to_le_bytes())
                .take(row_bytes)
                .collect();
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (rows, dim, payload) = read_header(bytes, CODE_MAGIC)?;
        let row_bytes = dim.div_ceil(8);
        check_payload_len(payload.len(), rows * row_bytes)?;
        let mut m = Self::new(rows, dim);
        let tail_bits = dim % 64;
        for r in 0..rows {
            let src = &payload[r * row_bytes..(r + 1) * row_bytes];
            let dst = &mut m.bits[r * m.words_per_row..(r + 1) * m.words_per_row];
            for (w, chunk) in src.chunks(8).enumerate() {
                let mut buf = [0u8; 8];
                buf[..chunk.len()].copy_from_slice(chunk);
                dst[w] = u64::from_le_bytes(buf);
            }
            if tail_bits != 0 && dst[m.words_per_row - 1] >> tail_bits != 0 {
                return Err(Error::InvalidParameter(format!(
                    "row {r} has nonzero padding bits"
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_header(out: &mut Vec<u8>, magic: [u8; 4], rows: usize, dim: usize) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
}

fn read_header(bytes: &[u8], magic: [u8; 4]) -> Result<(usize, usize, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if found != magic {
        return Err(Error::BadMagic {
            found,
            expected: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice")) as usize;
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4-byte slice")) as usize;
    Ok((rows, dim, &bytes[HEADER_LEN..]))
}

fn check_payload_len(got: usize, expected: usize) -> Result<()> {
    if got < expected {
        return Err(Error::Truncated {
            expected: HEADER_LEN + expected,
            got: HEADER_LEN + got,
        });
    }
    if got > expected {
        return Err(Error::InvalidParameter(format!(
            "{} trailing bytes after payload",
            got - expected
        )));
    }
    Ok(())
}

/// Real-valued user or item vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                left: values.len(),
                right: rows * dim,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "embedding entries must be finite".into(),
            ));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn random_normal(rows: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let values = (0..rows * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, dim, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        write_header(&mut out, EMBEDDING_MAGIC, self.rows, self.dim);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (rows, dim, payload) = read_header(bytes, EMBEDDING_MAGIC)?;
        check_payload_len(payload.len(), rows * dim * 8)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(rows, dim, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Entry-wise sign; zero maps to `+1`.
pub fn sign_quantize(e: &EmbeddingMatrix) -> BinaryCodeMatrix {
    BinaryCodeMatrix::from_fn(e.rows, e.dim, |r, k| e.values[r * e.dim + k] >= 0.0)
}

/// 64-bit FNV-1a, used for matrix checksums in reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(signs: &[i8]) -> BinaryCodeMatrix {
        BinaryCodeMatrix::from_signs(1, signs.len(), signs).unwrap()
    }

    #[test]
    fn inner_and_hamming_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = BinaryCodeMatrix::random(1, 20, &mut rng);
        let signs: Vec<i8> = a.row(0).signs().iter().map(|s| -s).collect();
        let neg = row(&signs);
        assert_eq!(inner_product(a.row(0), a.row(0)).unwrap(), 20);
        assert_eq!(inner_product(a.row(0), neg.row(0)).unwrap(), -20);
        assert_eq!(hamming_distance(a.row(0), a.row(0)).unwrap(), 0);
        assert_eq!(hamming_distance(a.row(0), neg.row(0)).unwrap(), 20);

        let x = row(&[1, 1, -1, -1]);
        let y = row(&[1, -1, 1, -1]);
        assert_eq!(inner_product(x.row(0), y.row(0)).unwrap(), 0);
        assert_eq!(hamming_distance(x.row(0), y.row(0)).unwrap(), 2);
        let angle = code_angle(x.row(0), y.row(0)).unwrap();
        assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = row(&[1, 1, 1]);
        let b = row(&[1, 1]);
        assert!(matches!(
            inner_product(a.row(0), b.row(0)),
            Err(Error::DimensionMismatch { left: 3, right: 2 })
        ));
        assert!(hamming_distance(a.row(0), b.row(0)).is_err());
    }

    #[test]
    fn sign_quantize_ties_to_plus_one() {
        let e = EmbeddingMatrix::new(1, 4, vec![0.5, -0.3, 0.0, -0.0]).unwrap();
        let c = sign_quantize(&e);
        assert_eq!(c.row(0).signs(), vec![1, -1, 1, 1]);
        let all = EmbeddingMatrix::new(2, 3, vec![0.1; 6]).unwrap();
        assert!(sign_quantize(&all).row(1).signs().iter().all(|&s| s == 1));
    }

    #[test]
    fn serialized_layout_is_lsb_first_with_zero_padding() {
        let c = row(&[1, -1, -1, -1, -1, -1, -1, -1, 1]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[0..4], b"DSML");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &9u32.to_le_bytes());
        assert_eq!(&bytes[20..], &[0b0000_0001, 0b0000_0001]);
        assert_eq!(BinaryCodeMatrix::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn deserialize_rejects_malformed_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = BinaryCodeMatrix::random(3, 13, &mut rng);
        let good = c.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            BinaryCodeMatrix::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            BinaryCodeMatrix::from_bytes(&bad),
            Err(Error::UnsupportedVersion(2))
        ));

        assert!(matches!(
            BinaryCodeMatrix::from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            BinaryCodeMatrix::from_bytes(&good[..10]),
            Err(Error::Truncated { .. })
        ));

        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] |= 0b1000_0000;
        assert!(BinaryCodeMatrix::from_bytes(&bad).is_err());

        let emb = EmbeddingMatrix::zeros(1, 1).to_bytes();
        assert!(matches!(
            BinaryCodeMatrix::from_bytes(&emb),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = BinaryCodeMatrix::random(17, 70, &mut rng);
        let e = EmbeddingMatrix::random_normal(5, 7, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("c.dsml");
        let ep = dir.path().join("e.dsmr");
        c.save(&cp).unwrap();
        e.save(&ep).unwrap();
        let c2 = BinaryCodeMatrix::load(&cp).unwrap();
        let e2 = EmbeddingMatrix::load(&ep).unwrap();
        assert_eq!(c2, c);
        assert_eq!(e2, e);
        assert_eq!(c2.to_bytes(), fs::read(&cp).unwrap());
        assert_eq!(e2.to_bytes(), fs::read(&ep).unwrap());
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0]).is_err());
    }
}

//! Binary model container.
//!
//! All integers and reals are little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic | `b"DGRASPNN"` |
//! | version | u32 (= 1) |
//! | flatten order | u32 (= 1: W1 row-major, b1, W2 row-major, b2, w3, b3) |
//! | N, K1, K2, R, side, channels | 6 x u64 |
//! | parameters | f64 x (N K1 + K1 + K1 K2 + K2 + K2 + 1) |
//! | modality matrix | R x N bits, row-major, LSB first, zero padded to a byte |
//! | channel means, channel stds | 2 x channels x f64 |
//! | scale cap | f64 |
//!
//! The file must end exactly after the last field.

use std::path::Path;

use super::NetworkParams;
use crate::patch::{InputSpec, ModalityMask, NormStats};
use crate::rgbd::NUM_CHANNELS;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DGRASPNN";
pub const FORMAT_VERSION: u32 = 1;
pub const FLATTEN_ORDER: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 4 + 6 * 8;

pub fn to_bytes(params: &NetworkParams) -> Result<Vec<u8>> {
    params.validate()?;
    let s = params.sizes();
    let modality = &params.input.modality;
    let r = modality.num_modes();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * s.num_params() + (r * s.n).div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&FLATTEN_ORDER.to_le_bytes());
    for d in [s.n, s.k1, s.k2, r, params.input.side, NUM_CHANNELS] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in params.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = vec![0u8; (r * s.n).div_ceil(8)];
    for i in 0..s.n {
        let bit = modality.mode_of(i) * s.n + i;
        bits[bit / 8] |= 1 << (bit % 8);
    }
    out.extend_from_slice(&bits);
    let norm = &params.input.norm;
    for v in norm.mean.iter().chain(&norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&params.input.cap.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::ModelFormat(format!(
                "truncated model file while reading {what} (offset {}, need {n} bytes, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::ModelFormat(format!("{what} {v} does not fit in memory")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| overflow(what))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn overflow(what: &str) -> Error {
    Error::ModelFormat(format!("{what} size overflows"))
}

pub fn from_bytes(buf: &[u8]) -> Result<NetworkParams> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(8, "magic")? != MAGIC {
        return Err(Error::ModelFormat("not a model file (bad magic bytes)".into()));
    }
    let version = rd.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let order = rd.u32("flatten order")?;
    if order != FLATTEN_ORDER {
        return Err(Error::ModelFormat(format!(
            "unsupported flatten order {order} (expected {FLATTEN_ORDER})"
        )));
    }
    let n = rd.u64("N")?;
    let k1 = rd.u64("K1")?;
    let k2 = rd.u64("K2")?;
    let r = rd.u64("mode count")?;
    let side = rd.u64("patch side")?;
    let channels = rd.u64("channel count")?;
    if channels != NUM_CHANNELS {
        return Err(Error::ModelFormat(format!(
            "model has {channels} channels, expected {NUM_CHANNELS}"
        )));
    }
    let expected_n = side
        .checked_mul(side)
        .and_then(|v| v.checked_mul(NUM_CHANNELS))
        .ok_or_else(|| overflow("patch side"))?;
    if n != expected_n {
        return Err(Error::ModelFormat(format!(
            "input size N = {n} does not match patch side {side} (expected {expected_n})"
        )));
    }
    if n == 0 || k1 == 0 || k2 == 0 || r == 0 || r > n {
        return Err(Error::ModelFormat(format!(
            "invalid dimensions N={n} K1={k1} K2={k2} R={r}"
        )));
    }
    let num_params = n
        .checked_mul(k1)
        .and_then(|a| k1.checked_mul(k2).and_then(|b| a.checked_add(b)))
        .and_then(|a| a.checked_add(k1 + 2 * k2 + 1))
        .ok_or_else(|| overflow("parameter block"))?;
    let flat = rd.f64s(num_params, "parameters")?;
    let bits = rd.take((r * n).div_ceil(8), "modality matrix")?;
    let mut modes = vec![usize::MAX; n];
    for row in 0..r {
        for (i, m) in modes.iter_mut().enumerate() {
            let bit = row * n + i;
            if bits[bit / 8] >> (bit % 8) & 1 == 1 {
                if *m != usize::MAX {
                    return Err(Error::ModelFormat(format!(
                        "coordinate {i} belongs to more than one mode"
                    )));
                }
                *m = row;
            }
        }
    }
    if let Some(i) = modes.iter().position(|&m| m == usize::MAX) {
        return Err(Error::ModelFormat(format!("coordinate {i} belongs to no mode")));
    }
    let modality = ModalityMask::from_modes(modes, r)
        .map_err(|e| Error::ModelFormat(format!("modality matrix: {e}")))?;
    let mean = rd.f64s(channels, "normalisation means")?;
    let std = rd.f64s(channels, "normalisation stds")?;
    let cap = rd.f64s(1, "scale cap")?[0];
    if rd.pos != buf.len() {
        return Err(Error::ModelFormat(format!(
            "{} trailing bytes after model data",
            buf.len() - rd.pos
        )));
    }
    if !(cap >= 1.0) || std.iter().any(|s| !(*s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::ModelFormat("invalid normalisation block".into()));
    }
    let input = InputSpec {
        side,
        modality,
        norm: NormStats { mean, std },
        cap,
    };
    let mut params = super::NetworkParams {
        w1: ndarray::Array2::zeros((n, k1)),
        b1: ndarray::Array1::zeros(k1),
        w2: ndarray::Array2::zeros((k1, k2)),
        b2: ndarray::Array1::zeros(k2),
        w3: ndarray::Array1::zeros(k2),
        b3: 0.0,
        input,
    };
    params.set_flat(&flat)?;
    params
        .validate()
        .map_err(|e| Error::ModelFormat(e.to_string()))?;
    Ok(params)
}

pub fn save_model(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Load and check the input size against what the caller will feed.
pub fn load_model_expecting(path: impl AsRef<Path>, expected_n: usize) -> Result<NetworkParams> {
    let params = load_model(path)?;
    let n = params.sizes().n;
    if n != expected_n {
        return Err(Error::ModelFormat(format!(
            "model input size N = {n} does not match expected patch size {expected_n}"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, LayerSizes};

    fn model() -> NetworkParams {
        let mut input = InputSpec::new(4);
        input.norm.mean[2] = 0.25;
        input.norm.std[5] = 3.5;
        input.cap = 1.75;
        let mut p = init_params(5, LayerSizes::new(112, 6, 3), input).unwrap();
        p.b1[0] = -0.1;
        p.b3 = 1.0 / 3.0;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = model();
        let bytes = to_bytes(&p).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(to_bytes(&q).unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        for cut in [0, 7, 8, 15, HEADER_LEN - 1, HEADER_LEN + 3, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::ModelFormat(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(from_bytes(&long).is_err());
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[8] = 2;
        let msg = from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 2"), "{msg}");
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn expected_size_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model(), &path).unwrap();
        let msg = load_model_expecting(&path, 4032).unwrap_err().to_string();
        assert!(msg.contains("112") && msg.contains("4032"), "{msg}");
        assert!(load_model_expecting(&path, 112).is_ok());
    }
}

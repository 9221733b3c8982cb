//! Binary checkpoint format.
//!
//! ```text
//! "GNDV"                      4 bytes
//! version                     u32 LE (currently 1)
//! mode                        u8 (0 unsupervised, 1 supervised)
//! k, l, d, m                  u32 LE each
//! hidden widths               l x u32 LE
//! parameters                  f64 LE, ModelParams field order:
//!                             mu_table, logvar_table, mu_bias, logvar_bias,
//!                             hidden_weights[0..l], hidden_biases[0..l],
//!                             rec_weights, rec_bias (matrices row-major)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelParams};

pub const MAGIC: &[u8; 4] = b"GNDV";
pub const VERSION: u32 = 1;
/// Byte offset of the mode flag.
pub const MODE_OFFSET: usize = 8;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let widths = params.hidden_widths();
    let mut out = Vec::with_capacity(25 + 4 * widths.len() + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match params.mode {
        Mode::Unsupervised => 0,
        Mode::Supervised => 1,
    });
    for v in [
        params.latent_dim(),
        widths.len(),
        params.output_dim(),
        params.n_columns(),
    ]
    .into_iter()
    .chain(widths)
    {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Consistency(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Consistency("not a GNDV checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Unsupported(format!("checkpoint version {version}")));
    }
    let mode = match r.take(1)?[0] {
        0 => Mode::Unsupervised,
        1 => Mode::Supervised,
        b => return Err(Error::Consistency(format!("bad mode byte {b}"))),
    };
    let k = r.u32()?;
    let l = r.u32()?;
    let d = r.u32()?;
    let m = r.u32()?;
    let widths = (0..l).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if k == 0 || l == 0 || d == 0 || m == 0 || widths.contains(&0) {
        return Err(Error::Consistency(format!(
            "degenerate checkpoint dimensions k={k} l={l} d={d} m={m} widths={widths:?}"
        )));
    }
    let mut params = ModelParams::zeros(mode, k, m, &widths, d);
    for t in params.tensors_mut() {
        let raw = r.take(8 * t.len())?;
        for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Consistency(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    params.check_shapes()?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

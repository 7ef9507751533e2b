//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "QCNNCKPT"  u32 version
//! u32 len     config echo (TOML, UTF-8)
//! u32 n_qubits  u32 filter_count
//! per filter: u32 arity, arity × u32 qubits, d×d f64 raw, d×d f64 projected (row-major)
//! u32 classes  u32 dim  classes×dim f64 weights (row-major)  classes × f64 bias
//! [32] sha256 of everything above
//! ```

use std::path::Path;

use qcnn_core::{Mat, QFilter, QcnnModel};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

const MAGIC: &[u8; 8] = b"QCNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: QcnnModel,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_mat(out: &mut Vec<u8>, m: &Mat<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat<f64>, String> {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64()?;
            }
        }
        Ok(m)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        let echo = self.config.to_toml();
        put_u32(&mut out, echo.len());
        out.extend_from_slice(echo.as_bytes());
        put_u32(&mut out, self.model.n_qubits());
        put_u32(&mut out, self.model.filters.len());
        for f in &self.model.filters {
            put_u32(&mut out, f.arity());
            for &q in f.qubits() {
                put_u32(&mut out, q);
            }
            put_mat(&mut out, f.raw());
            put_mat(&mut out, f.projected());
        }
        put_u32(&mut out, self.model.weights.nrows());
        put_u32(&mut out, self.model.weights.ncols());
        put_mat(&mut out, &self.model.weights);
        for b in &self.model.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 44 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let mut r = Reader { bytes: body, at: 8 };
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u32()?;
        let echo = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
        let config = RunConfig::from_toml(echo).map_err(|e| e.message)?;
        let n_qubits = r.u32()?;
        let count = r.u32()?;
        let mut filters = Vec::with_capacity(count);
        for _ in 0..count {
            let arity = r.u32()?;
            if arity > n_qubits {
                return Err(format!("filter arity {arity} exceeds {n_qubits} qubits"));
            }
            let qubits = (0..arity).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let d = 1 << arity;
            let raw = r.mat(d, d)?;
            let stored = r.mat(d, d)?;
            let f = QFilter::new(raw, qubits).map_err(|e| e.to_string())?;
            let drift = (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| (f.projected()[(i, j)] - stored[(i, j)]).abs())
                .fold(0.0, f64::max);
            if drift > 1e-9 {
                return Err(format!("stored projection differs from its raw matrix by {drift:.3e}"));
            }
            filters.push(f);
        }
        let classes = r.u32()?;
        let dim = r.u32()?;
        if dim != 1 << n_qubits {
            return Err(format!("head width {dim} does not match {n_qubits} qubits"));
        }
        let weights = r.mat(classes, dim)?;
        let bias = (0..classes).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.at != body.len() {
            return Err("trailing bytes".into());
        }
        let model = QcnnModel::new(n_qubits, filters, weights, bias).map_err(|e| e.to_string())?;
        Ok(Self { config, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|m| CliError::data(format!("{}: {m}", path.display())))
    }
}

//! On-disk formats.
//!
//! Binary files share one layout: an 8-byte magic, a little-endian `u32`
//! format version, the 32-byte SHA-256 fingerprint of whatever produced the
//! payload, then the payload with every integer as little-endian `u64` and
//! every real as little-endian `f64` bits, so round trips are bit-exact.
//! A cache whose fingerprint differs from the expected one is stale.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use tmle_lens_core::decomp::{SaeVariant, SparseCoder};
use tmle_lens_core::dgp::{Dataset, ScalerParams};
use tmle_lens_core::nnet::{Activation, EpochLosses, MultiTaskNet, NetConfig};
use tmle_lens_core::Matrix;

use crate::error::{LabError, LabResult};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_MAGIC: &[u8; 8] = b"TMLDATA\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMLCKPT\0";
pub const ACTIVATIONS_MAGIC: &[u8; 8] = b"TMLACTS\0";
pub const CODER_MAGIC: &[u8; 8] = b"TMLCODR\0";

pub type Fingerprint = [u8; 32];

pub fn fingerprint_of(text: &str) -> Fingerprint {
    Sha256::digest(text.as_bytes()).into()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 8], fp: &Fingerprint) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.0.extend_from_slice(fp);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &x in m.as_slice() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<(Self, Fingerprint), String> {
        let mut r = Reader { bytes, pos: 0, what };
        if r.take(8)? != magic {
            return Err(format!("not a {what} file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format!("{what} format version {version}, expected {FORMAT_VERSION}"));
        }
        let fp: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
        Ok((r, fp))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated {}", self.what)),
        }
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| format!("length overflow in {}", self.what))
    }

    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, String> {
        let n = self.usize()?;
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(format!("truncated {}", self.what));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<Matrix, String> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| format!("bad shape in {}", self.what))?;
        if len > (self.bytes.len() - self.pos) / 8 {
            return Err(format!("truncated {}", self.what));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
    }

    fn finish(self) -> Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!(
                "{} trailing bytes in {}",
                self.bytes.len() - self.pos,
                self.what
            ));
        }
        Ok(())
    }
}

fn check_fp(found: &Fingerprint, expected: Option<&Fingerprint>) -> Result<(), String> {
    match expected {
        Some(e) if e != found => Err("fingerprint mismatch".into()),
        _ => Ok(()),
    }
}

pub fn encode_dataset(ds: &Dataset, fp: &Fingerprint) -> Vec<u8> {
    let mut w = Writer::header(DATASET_MAGIC, fp);
    w.matrix(&ds.w);
    w.f64s(&ds.a);
    w.f64s(&ds.y);
    match ds.true_ate {
        Some(v) => {
            w.u8(1);
            w.f64(v);
        }
        None => w.u8(0),
    }
    w.u64(ds.seed);
    w.0
}

pub fn decode_dataset(bytes: &[u8], expected: Option<&Fingerprint>) -> Result<Dataset, String> {
    let (mut r, fp) = Reader::open(bytes, DATASET_MAGIC, "dataset")?;
    check_fp(&fp, expected)?;
    let w = r.matrix()?;
    let a = r.f64s()?;
    let y = r.f64s()?;
    let true_ate = match r.u8()? {
        0 => None,
        1 => Some(r.f64()?),
        t => return Err(format!("bad true_ate tag {t}")),
    };
    let seed = r.u64()?;
    r.finish()?;
    Dataset::new(w, a, y, true_ate, seed).map_err(|e| e.to_string())
}

/// A trained network, the covariate scaler it expects and its loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: MultiTaskNet,
    pub scaler: ScalerParams,
    pub history: Vec<EpochLosses>,
}

pub fn encode_checkpoint(ck: &Checkpoint, fp: &Fingerprint) -> Vec<u8> {
    let mut w = Writer::header(CHECKPOINT_MAGIC, fp);
    let c = &ck.net.config;
    w.usize(c.input_dim);
    w.usize(c.hidden_layers);
    w.usize(c.hidden_size);
    w.u8(match c.activation {
        Activation::Relu => 0,
    });
    w.u64(c.seed);
    w.f64s(&ck.net.parameters());
    w.f64s(&ck.scaler.mean);
    w.f64s(&ck.scaler.sd);
    w.usize(ck.history.len());
    for h in &ck.history {
        w.usize(h.epoch);
        for v in [h.train_total, h.val_total, h.val_mse, h.val_bce] {
            w.f64(v);
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8], expected: Option<&Fingerprint>) -> Result<Checkpoint, String> {
    let (mut r, fp) = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    check_fp(&fp, expected)?;
    let input_dim = r.usize()?;
    let hidden_layers = r.usize()?;
    let hidden_size = r.usize()?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        t => return Err(format!("unknown activation tag {t}")),
    };
    let seed = r.u64()?;
    let config = NetConfig {
        input_dim,
        hidden_layers,
        hidden_size,
        activation,
        seed,
    };
    let mut net = MultiTaskNet::zeros(&config).map_err(|e| e.to_string())?;
    net.set_parameters(&r.f64s()?).map_err(|e| e.to_string())?;
    let mean = r.f64s()?;
    let sd = r.f64s()?;
    let count = r.usize()?;
    let mut history = Vec::new();
    for _ in 0..count {
        history.push(EpochLosses {
            epoch: r.usize()?,
            train_total: r.f64()?,
            val_total: r.f64()?,
            val_mse: r.f64()?,
            val_bce: r.f64()?,
        });
    }
    r.finish()?;
    if mean.len() != input_dim || sd.len() != input_dim {
        return Err("scaler width differs from input_dim".into());
    }
    Ok(Checkpoint {
        net,
        scaler: ScalerParams { mean, sd },
        history,
    })
}

/// Post-ReLU activations of one trunk layer (1-based) over a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub layer: usize,
    pub acts: Matrix,
}

pub fn encode_activations(dump: &ActivationDump, fp: &Fingerprint) -> Vec<u8> {
    let mut w = Writer::header(ACTIVATIONS_MAGIC, fp);
    w.usize(dump.layer);
    w.matrix(&dump.acts);
    w.0
}

pub fn decode_activations(bytes: &[u8], expected: Option<&Fingerprint>) -> Result<ActivationDump, String> {
    let (mut r, fp) = Reader::open(bytes, ACTIVATIONS_MAGIC, "activation dump")?;
    check_fp(&fp, expected)?;
    let layer = r.usize()?;
    let acts = r.matrix()?;
    r.finish()?;
    Ok(ActivationDump { layer, acts })
}

pub fn encode_coder(model: &SparseCoder, fp: &Fingerprint) -> Vec<u8> {
    let mut w = Writer::header(CODER_MAGIC, fp);
    match model.variant {
        SaeVariant::L1 { lambda } => {
            w.u8(0);
            w.f64(lambda);
        }
        SaeVariant::TopK { k_active } => {
            w.u8(1);
            w.usize(k_active);
        }
        SaeVariant::JumpRelu { theta, lambda } => {
            w.u8(2);
            w.f64(theta);
            w.f64(lambda);
        }
    }
    w.usize(model.input_dim());
    w.usize(model.latent_dim());
    w.usize(model.output_dim());
    w.f64s(&model.parameters());
    w.0
}

pub fn decode_coder(bytes: &[u8], expected: Option<&Fingerprint>) -> Result<SparseCoder, String> {
    let (mut r, fp) = Reader::open(bytes, CODER_MAGIC, "coder")?;
    check_fp(&fp, expected)?;
    let variant = match r.u8()? {
        0 => SaeVariant::L1 { lambda: r.f64()? },
        1 => SaeVariant::TopK { k_active: r.usize()? },
        2 => SaeVariant::JumpRelu {
            theta: r.f64()?,
            lambda: r.f64()?,
        },
        t => return Err(format!("unknown variant tag {t}")),
    };
    let (k, m, out) = (r.usize()?, r.usize()?, r.usize()?);
    let mut model = SparseCoder::zeros(k, m, out, variant);
    model.set_parameters(&r.f64s()?).map_err(|e| e.to_string())?;
    r.finish()?;
    Ok(model)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Reads and decodes a cache file; `None` when it is missing, unreadable
/// or stale.
pub fn read_cached<T>(path: &Path, decode: impl FnOnce(&[u8]) -> Result<T, String>) -> Option<T> {
    let bytes = std::fs::read(path).ok()?;
    decode(&bytes).ok()
}

/// CSV with header `W1..Wd,A,Y`, preceded by `# ` comment lines.
pub fn dataset_csv(ds: &Dataset, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let header: Vec<String> = (1..=ds.dim()).map(|j| format!("W{j}")).collect();
    let _ = writeln!(out, "{},A,Y", header.join(","));
    for i in 0..ds.n() {
        for v in ds.w.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{},{}", ds.a[i], ds.y[i]);
    }
    out
}

pub fn parse_dataset_csv(text: &str, seed: u64) -> Result<Dataset, String> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines.next().ok_or("empty dataset file")?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().checked_sub(2).ok_or("header needs W columns, A and Y")?;
    if cols[d] != "A" || cols[d + 1] != "Y" || (0..d).any(|j| cols[j] != format!("W{}", j + 1)) {
        return Err(format!("unexpected header `{header}`"));
    }
    let (mut w, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in lines.enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("row {}: {e}", lineno + 1))?;
        if vals.len() != d + 2 {
            return Err(format!("row {}: {} fields, expected {}", lineno + 1, vals.len(), d + 2));
        }
        w.extend_from_slice(&vals[..d]);
        a.push(vals[d]);
        y.push(vals[d + 1]);
    }
    let n = a.len();
    let w = Matrix::from_vec(n, d, w).map_err(|e| e.to_string())?;
    Dataset::new(w, a, y, None, seed).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tmle_lens_core::dgp::{generate, DgpSpec};

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let ds = generate(&DgpSpec::ds2(50), 3).unwrap();
        let fp = fingerprint_of("x");
        let back = decode_dataset(&encode_dataset(&ds, &fp), Some(&fp)).unwrap();
        assert_eq!(back, ds);
        assert!(decode_dataset(&encode_dataset(&ds, &fp), Some(&fingerprint_of("y"))).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = generate(&DgpSpec::ds1(20), 3).unwrap();
        let back = parse_dataset_csv(&dataset_csv(&ds, &["fingerprint=abc".into()]), ds.seed).unwrap();
        assert_eq!(back.w, ds.w);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.a, ds.a);
    }

    #[test]
    fn truncated_files_rejected() {
        let ds = generate(&DgpSpec::ds2(10), 3).unwrap();
        let bytes = encode_dataset(&ds, &fingerprint_of("x"));
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(decode_dataset(&bytes[..cut], None).is_err());
        }
    }
}

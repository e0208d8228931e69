//! `kwsmodel v1` binary format, all integers and floats little-endian:
//!
//! ```text
//! "KWSM" | u32 version
//! front end: u32 window_ms, u32 shift_ms, u32 num_filters, u32 fft_size,
//!            f64 pre_emphasis, f64 energy_floor, u32 left_context,
//!            u32 right_context, f64 vad_threshold_db, u32 vad_hangover,
//!            f64 cmvn_variance_floor, f64 cmvn_prior_frames
//! u8 nonlinearity | u32 n_layers | u32 dims[n_layers + 1]
//! u32 n_units | n_units x (u32 len, utf-8 bytes)
//! f64 cmvn_mean[dims[0]] | f64 cmvn_var[dims[0]]
//! per layer: f32 weights[n_out * n_in] row-major, f32 bias[n_out]
//! ```

use std::path::Path;

use super::{LayerParams, ModelParameters, Nonlinearity};
use crate::error::{KwsError, Result};
use crate::features::{FrameParams, FrontendConfig, StackingParams, VadParams};
use crate::io::write_atomic;

pub const MODEL_MAGIC: &[u8; 4] = b"KWSM";
pub const MODEL_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(KwsError::ModelFormat(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| KwsError::ModelFormat(what.into()))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn save_model(m: &ModelParameters) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION as usize);
    let fe = &m.frontend;
    w.u32(fe.frame.window_ms as usize);
    w.u32(fe.frame.shift_ms as usize);
    w.u32(fe.frame.num_filters);
    w.u32(fe.frame.fft_size);
    w.f64(fe.frame.pre_emphasis);
    w.f64(fe.frame.energy_floor);
    w.u32(fe.stacking.left_context);
    w.u32(fe.stacking.right_context);
    w.f64(fe.vad.threshold_db);
    w.u32(fe.vad.hangover_frames);
    w.f64(fe.cmvn_variance_floor);
    w.f64(fe.cmvn_prior_frames);
    w.u8(m.nonlinearity.tag());
    w.u32(m.layers.len());
    for d in m.dims() {
        w.u32(d);
    }
    w.u32(m.inventory.len());
    for u in &m.inventory {
        w.u32(u.len());
        w.0.extend_from_slice(u.as_bytes());
    }
    m.cmvn_mean.iter().for_each(|&v| w.f64(v));
    m.cmvn_var.iter().for_each(|&v| w.f64(v));
    for l in &m.layers {
        l.weights.iter().for_each(|&v| w.f32(v));
        l.bias.iter().for_each(|&v| w.f32(v));
    }
    w.0
}

pub fn load_model(bytes: &[u8]) -> Result<ModelParameters> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(KwsError::ModelFormat("missing KWSM magic".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION as usize {
        return Err(KwsError::ModelFormat(format!("unsupported version {version}")));
    }
    let frame = FrameParams {
        window_ms: r.u32("window_ms")? as u32,
        shift_ms: r.u32("shift_ms")? as u32,
        num_filters: r.u32("num_filters")?,
        fft_size: r.u32("fft_size")?,
        pre_emphasis: r.f64("pre_emphasis")?,
        energy_floor: r.f64("energy_floor")?,
    };
    let stacking = StackingParams {
        left_context: r.u32("left_context")?,
        right_context: r.u32("right_context")?,
    };
    let vad = VadParams {
        threshold_db: r.f64("vad_threshold_db")?,
        hangover_frames: r.u32("vad_hangover")?,
    };
    let frontend = FrontendConfig {
        frame,
        stacking,
        vad,
        cmvn_variance_floor: r.f64("cmvn_variance_floor")?,
        cmvn_prior_frames: r.f64("cmvn_prior_frames")?,
    };
    frontend.frame.validate()?;
    let nonlinearity = Nonlinearity::from_tag(r.u8("nonlinearity")?)
        .ok_or_else(|| KwsError::ModelFormat("unknown nonlinearity tag".into()))?;
    let n_layers = r.u32("layer count")?;
    if n_layers == 0 || n_layers > 64 {
        return Err(KwsError::ModelFormat(format!("implausible layer count {n_layers}")));
    }
    let dims = (0..=n_layers)
        .map(|_| r.u32("layer dims"))
        .collect::<Result<Vec<_>>>()?;
    let n_units = r.u32("inventory size")?;
    let mut inventory = Vec::with_capacity(n_units.min(4096));
    for _ in 0..n_units {
        let len = r.u32("unit name length")?;
        let s = std::str::from_utf8(r.take(len, "unit name")?)
            .map_err(|_| KwsError::ModelFormat("unit name is not utf-8".into()))?;
        inventory.push(s.to_string());
    }
    let cmvn_mean = r.f64s(dims[0], "cmvn mean")?;
    let cmvn_var = r.f64s(dims[0], "cmvn variance")?;
    let mut layers = Vec::with_capacity(n_layers);
    for d in dims.windows(2) {
        let (cols, rows) = (d[0], d[1]);
        let weights = r.f32s(rows * cols, "weights")?;
        let bias = r.f32s(rows, "bias")?;
        layers.push(LayerParams {
            rows,
            cols,
            weights,
            bias,
        });
    }
    if r.pos != bytes.len() {
        return Err(KwsError::ModelFormat(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let m = ModelParameters {
        layers,
        nonlinearity,
        frontend,
        inventory,
        cmvn_mean,
        cmvn_var,
    };
    m.validate()
        .map_err(|e| KwsError::ModelFormat(e.to_string()))?;
    Ok(m)
}

pub fn save_model_file(path: &Path, m: &ModelParameters) -> Result<()> {
    write_atomic(path, &save_model(m))
}

pub fn load_model_file(path: &Path) -> Result<ModelParameters> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::file(path, e))?;
    load_model(&bytes)
}

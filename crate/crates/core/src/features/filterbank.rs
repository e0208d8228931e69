use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureVector, FrameParams, SAMPLE_RATE};
use crate::error::Result;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Mean filter power of a frame, in dB. Filter outputs are magnitudes, so
/// each band is squared before averaging.
pub fn frame_energy_db(frame: &FeatureVector) -> f64 {
    if frame.0.is_empty() {
        return f64::NEG_INFINITY;
    }
    let twice: Vec<f64> = frame.0.iter().map(|e| 2.0 * e).collect();
    let max = twice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = twice.iter().map(|v| (v - max).exp()).sum();
    let log_mean = max + sum.ln() - (twice.len() as f64).ln();
    10.0 * log_mean / std::f64::consts::LN_10
}

struct TriangleFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Per-frame analysis: pre-emphasis, Hamming window, magnitude spectrum,
/// triangular mel filters over `[0, fs/2]`, floored natural log.
pub struct FilterbankAnalyzer {
    params: FrameParams,
    window: Vec<f64>,
    filters: Vec<TriangleFilter>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl FilterbankAnalyzer {
    pub fn new(params: &FrameParams) -> Result<Self> {
        params.validate()?;
        let n = params.window_samples();
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos())
            .collect();

        let nyquist = SAMPLE_RATE as f64 / 2.0;
        let m = params.num_filters;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..m + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (m + 1) as f64))
            .collect();
        let bin_hz = SAMPLE_RATE as f64 / params.fft_size as f64;
        let n_bins = params.fft_size / 2 + 1;
        let filters = (0..m)
            .map(|j| {
                let (lo, c, hi) = (edges[j], edges[j + 1], edges[j + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                TriangleFilter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(params.fft_size);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Ok(FilterbankAnalyzer {
            params: params.clone(),
            window,
            filters,
            centers_hz: edges[1..=m].to_vec(),
            fft,
            buf: vec![Complex::default(); params.fft_size],
            scratch,
        })
    }

    pub fn params(&self) -> &FrameParams {
        &self.params
    }

    /// Center frequency of each filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Analyzes exactly one window of samples.
    pub fn analyze(&mut self, frame: &[i16]) -> FeatureVector {
        debug_assert_eq!(frame.len(), self.window.len());
        let coeff = self.params.pre_emphasis;
        for (i, slot) in self.buf.iter_mut().enumerate() {
            *slot = if i < frame.len() {
                let x = frame[i] as f64;
                let prev = if i == 0 { x } else { frame[i - 1] as f64 };
                Complex::new((x - coeff * prev) * self.window[i], 0.0)
            } else {
                Complex::default()
            };
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);

        let floor = self.params.energy_floor;
        FeatureVector(
            self.filters
                .iter()
                .map(|f| {
                    let e: f64 = f
                        .weights
                        .iter()
                        .zip(&self.buf[f.first_bin..])
                        .map(|(w, x)| w * x.norm())
                        .sum();
                    e.max(floor).ln()
                })
                .collect(),
        )
    }
}

//! Audio front end: 40-dim log mel filterbank frames, asymmetric context
//! stacking, cepstral mean/variance normalization and an energy gate that
//! marks voiced regions.
//!
//! Offline operations ([`frame_signal`], [`stack_frames`], [`apply_cmvn`],
//! [`voice_activity_gate`]) are pure functions over whole utterances. The
//! [`StreamingFrontend`] produces the same per-frame network inputs
//! incrementally from arbitrary sample chunks.

mod cmvn;
mod filterbank;
mod stream;
mod vad;
pub mod wav;

pub use cmvn::{apply_cmvn, CmvnMode, CmvnStats};
pub use filterbank::{frame_energy_db, hz_to_mel, mel_to_hz, FilterbankAnalyzer};
pub use stream::{prepare_inputs, FrontendFrame, StreamingFrontend};
pub use wav::{encode_wav, read_wav, read_wav_from, write_wav};
pub use vad::{voice_activity_gate, StreamingVad, VadParams};

use crate::error::{KwsError, Result};

/// The only sample rate the front end accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioBuffer {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<i16>) -> Self {
        AudioBuffer {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Framing and filterbank constants.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    pub window_ms: u32,
    pub shift_ms: u32,
    pub num_filters: usize,
    pub fft_size: usize,
    pub pre_emphasis: f64,
    /// Filter energies below this are clamped before the log.
    pub energy_floor: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams {
            window_ms: 25,
            shift_ms: 10,
            num_filters: 40,
            fft_size: 512,
            pre_emphasis: 0.97,
            energy_floor: 1e-10,
        }
    }
}

impl FrameParams {
    pub fn window_samples(&self) -> usize {
        (SAMPLE_RATE as usize * self.window_ms as usize) / 1000
    }

    pub fn shift_samples(&self) -> usize {
        (SAMPLE_RATE as usize * self.shift_ms as usize) / 1000
    }

    /// Number of frames produced for `n_samples` of audio.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        let w = self.window_samples();
        if n_samples < w {
            0
        } else {
            (n_samples - w) / self.shift_samples() + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KwsError::InvalidParams(msg));
        if self.shift_ms == 0 || self.shift_ms > self.window_ms {
            return bad(format!(
                "shift_ms must be in 1..=window_ms, got {} (window {})",
                self.shift_ms, self.window_ms
            ));
        }
        if self.num_filters == 0 {
            return bad("num_filters must be at least 1".into());
        }
        if !self.fft_size.is_power_of_two() || self.fft_size < self.window_samples() {
            return bad(format!(
                "fft_size must be a power of two >= {} samples, got {}",
                self.window_samples(),
                self.fft_size
            ));
        }
        if !(self.energy_floor > 0.0) {
            return bad("energy_floor must be positive".into());
        }
        Ok(())
    }
}

/// Context frames concatenated around each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackingParams {
    pub left_context: usize,
    pub right_context: usize,
}

impl Default for StackingParams {
    fn default() -> Self {
        StackingParams {
            left_context: 10,
            right_context: 5,
        }
    }
}

impl StackingParams {
    pub fn span(&self) -> usize {
        self.left_context + 1 + self.right_context
    }

    pub fn stacked_dim(&self, num_filters: usize) -> usize {
        num_filters * self.span()
    }
}

/// One frame of log filterbank energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Concatenated context frames; the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeatureVector(pub Vec<f64>);

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for StackedFeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Everything the front end needs to turn audio into network inputs. Stored
/// in the model file so inference reproduces training features exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub frame: FrameParams,
    pub stacking: StackingParams,
    pub vad: VadParams,
    pub cmvn_variance_floor: f64,
    /// Pseudo-count given to the stored CMVN prior when a stream starts.
    pub cmvn_prior_frames: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame: FrameParams::default(),
            stacking: StackingParams::default(),
            vad: VadParams::default(),
            cmvn_variance_floor: 1e-8,
            cmvn_prior_frames: 100.0,
        }
    }
}

impl FrontendConfig {
    pub fn input_dim(&self) -> usize {
        self.stacking.stacked_dim(self.frame.num_filters)
    }
}

/// Computes log mel filterbank energies for every complete window of `audio`.
///
/// Audio shorter than one window yields no frames.
pub fn frame_signal(audio: &AudioBuffer, params: &FrameParams) -> Result<Vec<FeatureVector>> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(KwsError::UnsupportedSampleRate(audio.sample_rate));
    }
    params.validate()?;
    let mut analyzer = FilterbankAnalyzer::new(params)?;
    let w = params.window_samples();
    let shift = params.shift_samples();
    Ok((0..params.num_frames(audio.samples.len()))
        .map(|t| analyzer.analyze(&audio.samples[t * shift..t * shift + w]))
        .collect())
}

/// Writes the stacked vector for frame `t` into `out`. Context indices are
/// clamped to `[0, last]`, so edges replicate the first/last frame.
pub(crate) fn stack_into<'a>(
    out: &mut Vec<f64>,
    t: usize,
    last: usize,
    s: &StackingParams,
    frame: impl Fn(usize) -> &'a [f64],
) {
    out.clear();
    for offset in 0..s.span() {
        let idx = (t + offset).saturating_sub(s.left_context).min(last);
        out.extend_from_slice(frame(idx));
    }
}

/// Concatenates `[t-left .. t .. t+right]` for every frame, replicating the
/// boundary frames where context runs past the utterance.
pub fn stack_frames(frames: &[FeatureVector], s: &StackingParams) -> Vec<StackedFeatureVector> {
    if frames.is_empty() {
        return Vec::new();
    }
    let last = frames.len() - 1;
    (0..frames.len())
        .map(|t| {
            let mut v = Vec::with_capacity(frames[0].0.len() * s.span());
            stack_into(&mut v, t, last, s, |i| &frames[i].0);
            StackedFeatureVector(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_frames(n: usize, dim: usize) -> Vec<FeatureVector> {
        (0..n)
            .map(|t| FeatureVector((0..dim).map(|d| (t * 100 + d) as f64).collect()))
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let audio = AudioBuffer::new(vec![0; 16000]);
        let frames = frame_signal(&audio, &FrameParams::default()).unwrap();
        assert_eq!(frames.len(), 98);
        assert!(frames.iter().all(|f| f.0.len() == 40));
    }

    #[test]
    fn short_audio_is_empty_not_error() {
        let audio = AudioBuffer::new(vec![100; 399]);
        assert!(frame_signal(&audio, &FrameParams::default()).unwrap().is_empty());
    }

    #[test]
    fn rejects_other_sample_rates() {
        let audio = AudioBuffer {
            samples: vec![0; 8000],
            sample_rate: 8000,
        };
        assert!(matches!(
            frame_signal(&audio, &FrameParams::default()),
            Err(KwsError::UnsupportedSampleRate(8000))
        ));
    }

    #[test]
    fn zero_audio_hits_the_floor() {
        let audio = AudioBuffer::new(vec![0; 4000]);
        let floor = 1e-10f64.ln();
        for f in frame_signal(&audio, &FrameParams::default()).unwrap() {
            assert!(f.0.iter().all(|&e| e == floor));
        }
    }

    #[test]
    fn frame_params_validation() {
        let mut p = FrameParams::default();
        p.fft_size = 256;
        assert!(p.validate().is_err());
        p.fft_size = 500;
        assert!(p.validate().is_err());
        let mut p = FrameParams::default();
        p.shift_ms = 30;
        assert!(p.validate().is_err());
        let mut p = FrameParams::default();
        p.num_filters = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_frame_is_repeated() {
        let frames = ramp_frames(1, 40);
        let out = stack_frames(&frames, &StackingParams::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0.len(), 640);
        for chunk in out[0].0.chunks(40) {
            assert_eq!(chunk, &frames[0].0[..]);
        }
    }

    #[test]
    fn hundred_frames_stack_to_640() {
        let out = stack_frames(&ramp_frames(100, 40), &StackingParams::default());
        assert_eq!(out.len(), 100);
        assert!(out.iter().all(|v| v.0.len() == 640));
    }

    #[test]
    fn interior_frame_concatenates_40_to_55() {
        let frames = ramp_frames(100, 40);
        let out = stack_frames(&frames, &StackingParams::default());
        let expected: Vec<f64> = (40..=55).flat_map(|t| frames[t].0.clone()).collect();
        assert_eq!(out[50].0, expected);
    }

    proptest! {
        #[test]
        fn frame_count_matches_enumeration(n in 0usize..20_000) {
            let p = FrameParams::default();
            let (w, s) = (p.window_samples(), p.shift_samples());
            let mut count = 0;
            let mut start = 0;
            while start + w <= n {
                count += 1;
                start += s;
            }
            prop_assert_eq!(p.num_frames(n), count);
        }

        #[test]
        fn stacking_preserves_length_and_replicates_edges(
            n in 1usize..200, left in 0usize..12, right in 0usize..8
        ) {
            let frames = ramp_frames(n, 3);
            let s = StackingParams { left_context: left, right_context: right };
            let out = stack_frames(&frames, &s);
            prop_assert_eq!(out.len(), n);
            for (t, v) in out.iter().enumerate() {
                prop_assert_eq!(v.0.len(), 3 * s.span());
                for (k, chunk) in v.0.chunks(3).enumerate() {
                    let src = (t as isize + k as isize - left as isize).clamp(0, n as isize - 1);
                    prop_assert_eq!(chunk, &frames[src as usize].0[..]);
                }
            }
        }
    }
}

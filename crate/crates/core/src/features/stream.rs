use std::collections::VecDeque;

use super::{
    apply_cmvn, stack_frames, stack_into, CmvnMode, CmvnStats, FeatureVector, FilterbankAnalyzer,
    FrontendConfig, StackedFeatureVector, StreamingVad,
};
use crate::error::{KwsError, Result};

/// A network-ready frame out of the streaming front end.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendFrame {
    pub index: usize,
    pub input: Vec<f64>,
    pub voiced: bool,
}

/// Offline equivalent of [`StreamingFrontend`] for a whole utterance: stack
/// with edge replication, then running CMVN seeded from `prior`.
pub fn prepare_inputs(
    frames: &[FeatureVector],
    config: &FrontendConfig,
    prior: &CmvnStats,
) -> Vec<StackedFeatureVector> {
    let mut stats = prior.clone();
    apply_cmvn(&stack_frames(frames, &config.stacking), CmvnMode::Streaming(&mut stats))
        .expect("streaming CMVN does not fail")
}

/// Incremental front end. Feeding the same samples in any chunking yields
/// the same frames, bit for bit.
///
/// Inputs lag the audio by the right context; voiced flags lag by the VAD
/// hangover. A frame is released once both are known.
pub struct StreamingFrontend {
    config: FrontendConfig,
    analyzer: FilterbankAnalyzer,
    prior: CmvnStats,
    cmvn: CmvnStats,
    vad: StreamingVad,
    samples: Vec<i16>,
    frames: VecDeque<FeatureVector>,
    first_frame: usize,
    n_frames: usize,
    next_stacked: usize,
    inputs: VecDeque<(usize, Vec<f64>)>,
    voiced: VecDeque<(usize, bool)>,
    raw: Vec<f64>,
}

impl StreamingFrontend {
    pub fn new(config: FrontendConfig, prior: CmvnStats) -> Result<Self> {
        if prior.dim() != config.input_dim() {
            return Err(KwsError::InvalidParams(format!(
                "CMVN prior has {} dims, front end produces {}",
                prior.dim(),
                config.input_dim()
            )));
        }
        Ok(StreamingFrontend {
            analyzer: FilterbankAnalyzer::new(&config.frame)?,
            vad: StreamingVad::new(config.vad),
            cmvn: prior.clone(),
            prior,
            config,
            samples: Vec::new(),
            frames: VecDeque::new(),
            first_frame: 0,
            n_frames: 0,
            next_stacked: 0,
            inputs: VecDeque::new(),
            voiced: VecDeque::new(),
            raw: Vec::new(),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    /// Frames analyzed so far in the current stream.
    pub fn frames_seen(&self) -> usize {
        self.n_frames
    }

    pub fn push(&mut self, samples: &[i16]) -> Vec<FrontendFrame> {
        self.samples.extend_from_slice(samples);
        let w = self.config.frame.window_samples();
        let shift = self.config.frame.shift_samples();
        let mut start = 0;
        let mut new_frames = Vec::new();
        while self.samples.len() - start >= w {
            new_frames.push(self.analyzer.analyze(&self.samples[start..start + w]));
            start += shift;
        }
        self.samples.drain(..start);
        for f in new_frames {
            self.accept(f);
        }
        self.release()
    }

    /// Ends the stream: replicates the last frame as right context, settles
    /// the VAD, returns the remaining frames and resets for a new stream.
    pub fn finish(&mut self) -> Vec<FrontendFrame> {
        let decided = self.vad.finish();
        self.voiced.extend(decided);
        while self.next_stacked < self.n_frames {
            self.stack_next(self.n_frames - 1);
        }
        let out = self.release();
        self.reset();
        out
    }

    pub fn reset(&mut self) {
        self.cmvn = self.prior.clone();
        self.vad.reset();
        self.samples.clear();
        self.frames.clear();
        self.first_frame = 0;
        self.n_frames = 0;
        self.next_stacked = 0;
        self.inputs.clear();
        self.voiced.clear();
    }

    fn accept(&mut self, frame: FeatureVector) {
        let decided = self.vad.push(&frame);
        self.voiced.extend(decided);
        self.frames.push_back(frame);
        self.n_frames += 1;
        let right = self.config.stacking.right_context;
        while self.next_stacked + right < self.n_frames {
            self.stack_next(self.n_frames - 1);
        }
        let keep_from = self
            .next_stacked
            .saturating_sub(self.config.stacking.left_context);
        while self.first_frame < keep_from {
            self.frames.pop_front();
            self.first_frame += 1;
        }
    }

    fn stack_next(&mut self, last: usize) {
        let t = self.next_stacked;
        let (frames, first) = (&self.frames, self.first_frame);
        stack_into(&mut self.raw, t, last, &self.config.stacking, |i| {
            &frames[i - first].0
        });
        let mut normalized = Vec::with_capacity(self.raw.len());
        self.cmvn.normalize_then_update(&self.raw, &mut normalized);
        self.inputs.push_back((t, normalized));
        self.next_stacked += 1;
    }

    fn release(&mut self) -> Vec<FrontendFrame> {
        let mut out = Vec::new();
        while !self.inputs.is_empty() && !self.voiced.is_empty() {
            let (index, input) = self.inputs.pop_front().unwrap();
            let (vi, voiced) = self.voiced.pop_front().unwrap();
            debug_assert_eq!(index, vi);
            out.push(FrontendFrame {
                index,
                input,
                voiced,
            });
        }
        out
    }
}

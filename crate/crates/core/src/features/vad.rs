use std::collections::VecDeque;
use std::ops::Range;

use super::{frame_energy_db, FeatureVector};

/// Energy gate: a frame is speech when its energy exceeds the 10th-percentile
/// (noise floor) energy by `threshold_db`. Speech frames are widened by
/// `hangover_frames` on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadParams {
    pub threshold_db: f64,
    pub hangover_frames: usize,
}

impl Default for VadParams {
    fn default() -> Self {
        VadParams {
            threshold_db: 6.0,
            hangover_frames: 5,
        }
    }
}

const NOISE_PERCENTILE: f64 = 0.10;

/// Noise floors are estimated over at most this many recent frames (one minute).
const STREAM_HISTORY: usize = 6000;

fn percentile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).floor() as usize]
}

fn merge_regions(speech: &[bool], hangover: usize) -> Vec<Range<usize>> {
    let n = speech.len();
    let mut regions: Vec<Range<usize>> = Vec::new();
    for (t, _) in speech.iter().enumerate().filter(|(_, &s)| s) {
        let r = t.saturating_sub(hangover)..(t + hangover + 1).min(n);
        match regions.last_mut() {
            Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
            _ => regions.push(r),
        }
    }
    regions
}

/// Voiced regions of an utterance as sorted, disjoint half-open frame ranges.
pub fn voice_activity_gate(
    frames: &[FeatureVector],
    threshold_db: f64,
    hangover_frames: usize,
) -> Vec<Range<usize>> {
    if frames.is_empty() {
        return Vec::new();
    }
    let energies: Vec<f64> = frames.iter().map(frame_energy_db).collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let gate = percentile_of_sorted(&sorted, NOISE_PERCENTILE) + threshold_db;
    let speech: Vec<bool> = energies.iter().map(|&e| e > gate).collect();
    merge_regions(&speech, hangover_frames)
}

/// Causal version of the gate for streams. The noise floor for frame `t` is
/// the percentile over frames seen up to `t`; a frame's voiced decision is
/// final once `hangover_frames` further frames have arrived.
#[derive(Debug, Clone)]
pub struct StreamingVad {
    params: VadParams,
    history: VecDeque<f64>,
    sorted: Vec<f64>,
    /// Raw speech flags for frames `decided..`.
    pending: VecDeque<bool>,
    /// Raw speech flags of the `hangover` frames before `decided`.
    past: VecDeque<bool>,
    decided: usize,
}

impl StreamingVad {
    pub fn new(params: VadParams) -> Self {
        StreamingVad {
            params,
            history: VecDeque::new(),
            sorted: Vec::new(),
            pending: VecDeque::new(),
            past: VecDeque::new(),
            decided: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = StreamingVad::new(self.params);
    }

    fn observe(&mut self, energy: f64) -> bool {
        let pos = self.sorted.partition_point(|&x| x < energy);
        self.sorted.insert(pos, energy);
        self.history.push_back(energy);
        if self.history.len() > STREAM_HISTORY {
            let old = self.history.pop_front().unwrap();
            let i = self.sorted.partition_point(|&x| x < old);
            self.sorted.remove(i);
        }
        energy > percentile_of_sorted(&self.sorted, NOISE_PERCENTILE) + self.params.threshold_db
    }

    fn decide_front(&mut self) -> (usize, bool) {
        let h = self.params.hangover_frames;
        let voiced = self.past.iter().any(|&s| s) || self.pending.iter().take(h + 1).any(|&s| s);
        let flag = self.pending.pop_front().unwrap();
        self.past.push_back(flag);
        if self.past.len() > h {
            self.past.pop_front();
        }
        let idx = self.decided;
        self.decided += 1;
        (idx, voiced)
    }

    /// Feeds one frame; returns frames whose decision became final.
    pub fn push(&mut self, frame: &FeatureVector) -> Vec<(usize, bool)> {
        let speech = self.observe(frame_energy_db(frame));
        self.pending.push_back(speech);
        let mut out = Vec::new();
        while self.pending.len() > self.params.hangover_frames {
            out.push(self.decide_front());
        }
        out
    }

    /// Decides every remaining frame, treating the stream end as silence.
    pub fn finish(&mut self) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            out.push(self.decide_front());
        }
        out
    }
}

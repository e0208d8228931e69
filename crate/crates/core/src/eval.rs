//! Detection-error tradeoff curves and real-time-factor measurement.
//!
//! A trial is one (utterance, keyword) pair scored by the best window the
//! spotter produced for that keyword. For a keyword's curve, positives are
//! utterances whose transcript contains the keyword's phonemes and negatives
//! are utterances containing no keyword at all; utterances of other keywords
//! are left out.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{KwsError, Result};
use crate::features::{read_wav, AudioBuffer};
use crate::network::ModelParameters;
use crate::spotter::{spot_utterance, KeywordSpec, Session, WindowParams};
use crate::trainer::read_manifest;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalUtterance {
    pub id: String,
    pub audio: AudioBuffer,
    pub phonemes: Vec<String>,
}

/// Reads every manifest entry; unreadable audio is reported per item and
/// does not stop the others.
pub fn load_eval_corpus(manifest: &Path) -> Result<(Vec<EvalUtterance>, Vec<(PathBuf, KwsError)>)> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for e in read_manifest(manifest)? {
        match read_wav(&e.path) {
            Ok(audio) => ok.push(EvalUtterance {
                id: e.path.display().to_string(),
                audio,
                phonemes: e.phonemes,
            }),
            Err(err) => failed.push((e.path, err)),
        }
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialClass {
    /// The utterance contains this keyword.
    Positive,
    /// The utterance contains no keyword.
    Negative,
    /// The utterance contains a different keyword.
    OtherKeyword,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrial {
    pub utterance: String,
    pub keyword: usize,
    pub class: TrialClass,
    /// Best window score, `-inf` when no window was scored.
    pub score: f64,
}

fn contains(hay: &[String], needle: &[&str]) -> bool {
    hay.windows(needle.len()).any(|w| w.iter().zip(needle).all(|(a, b)| a == b))
}

/// Scores every utterance against every keyword. Thresholds are ignored
/// (nothing fires, so no window is muted). Utterances run in parallel; the
/// output order is utterance-major, keyword-minor.
pub fn collect_trials(
    model: &ModelParameters,
    utterances: &[EvalUtterance],
    keywords: &[KeywordSpec],
    params: WindowParams,
) -> Result<Vec<LabeledTrial>> {
    let silent: Vec<KeywordSpec> = keywords
        .iter()
        .map(|k| KeywordSpec {
            threshold: f64::INFINITY,
            ..k.clone()
        })
        .collect();
    let names: Vec<Vec<&str>> = keywords
        .iter()
        .map(|k| k.phonemes.labels().iter().map(|&u| model.inventory[u].as_str()).collect())
        .collect();
    let per_utt: Vec<Vec<LabeledTrial>> = utterances
        .par_iter()
        .map(|u| {
            let events = spot_utterance(model, &silent, params, &u.audio.samples)?;
            let hits: Vec<bool> = names.iter().map(|n| contains(&u.phonemes, n)).collect();
            let any = hits.iter().any(|&h| h);
            Ok(keywords
                .iter()
                .enumerate()
                .map(|(i, k)| LabeledTrial {
                    utterance: u.id.clone(),
                    keyword: k.id,
                    class: match (hits[i], any) {
                        (true, _) => TrialClass::Positive,
                        (false, false) => TrialClass::Negative,
                        (false, true) => TrialClass::OtherKeyword,
                    },
                    score: events
                        .iter()
                        .filter(|e| e.keyword == k.id)
                        .map(|e| e.score)
                        .fold(f64::NEG_INFINITY, f64::max),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_utt.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Fire when score > threshold; `None` on averaged curves.
    pub threshold: Option<f64>,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn scores(trials: &[LabeledTrial], keyword: usize, class: TrialClass) -> Vec<f64> {
    trials
        .iter()
        .filter(|t| t.keyword == keyword && t.class == class)
        .map(|t| t.score)
        .collect()
}

/// False alarm and false reject rates when firing on score > threshold.
pub fn operating_point(trials: &[LabeledTrial], keyword: usize, threshold: f64) -> Result<(f64, f64)> {
    let pos = scores(trials, keyword, TrialClass::Positive);
    let neg = scores(trials, keyword, TrialClass::Negative);
    if pos.is_empty() || neg.is_empty() {
        return Err(missing_class(keyword));
    }
    let far = neg.iter().filter(|&&s| s > threshold).count() as f64 / neg.len() as f64;
    let frr = pos.iter().filter(|&&s| s <= threshold).count() as f64 / pos.len() as f64;
    Ok((far, frr))
}

fn missing_class(keyword: usize) -> KwsError {
    KwsError::Contract(format!("keyword {keyword} needs at least one positive and one negative trial"))
}

/// Threshold sweep. The first point accepts everything (FAR 1, FRR 0,
/// threshold `-inf`); then one point per distinct score in ascending order,
/// firing on scores strictly above it, ending with FAR 0.
pub fn roc_for_keyword(trials: &[LabeledTrial], keyword: usize) -> Result<RocCurve> {
    let mut pos = scores(trials, keyword, TrialClass::Positive);
    let mut neg = scores(trials, keyword, TrialClass::Negative);
    if pos.is_empty() || neg.is_empty() {
        return Err(missing_class(keyword));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: Some(f64::NEG_INFINITY),
        far: 1.0,
        frr: 0.0,
    }];
    let (mut ip, mut ineg) = (0, 0);
    for &t in &all {
        while ip < pos.len() && pos[ip] <= t {
            ip += 1;
        }
        while ineg < neg.len() && neg[ineg] <= t {
            ineg += 1;
        }
        points.push(RocPoint {
            threshold: Some(t),
            far: (neg.len() - ineg) as f64 / nn,
            frr: ip as f64 / np,
        });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// False reject rate at a false alarm rate, interpolating linearly
    /// between the neighbouring operating points. Where several points share
    /// a FAR, the lowest FRR counts.
    pub fn frr_at(&self, far: f64) -> f64 {
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.far, p.frr)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts.dedup_by(|b, a| a.0 == b.0);
        match pts.iter().position(|p| p.0 >= far) {
            None => pts.last().map_or(f64::NAN, |p| p.1),
            Some(0) => pts[0].1,
            Some(i) if pts[i].0 == far => pts[i].1,
            Some(i) => {
                let (a, b) = (pts[i - 1], pts[i]);
                a.1 + (b.1 - a.1) * (far - a.0) / (b.0 - a.0)
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.points {
            let t = p.threshold.map(|t| format!("{t:.6}")).unwrap_or_default();
            writeln!(s, "{t},{:.6},{:.6}", p.far, p.frr).unwrap();
        }
        s
    }
}

/// 200 false alarm rates, log-spaced from 1e-4 to 1.
pub fn far_grid() -> Vec<f64> {
    let n = 200;
    (0..n)
        .map(|i| 10f64.powf(-4.0 + 4.0 * i as f64 / (n - 1) as f64))
        .collect()
}

/// Vertical average: the mean FRR of the curves at each grid FAR.
pub fn average_roc(curves: &[RocCurve]) -> Result<RocCurve> {
    if curves.is_empty() {
        return Err(KwsError::Contract("average of zero curves".into()));
    }
    let points = far_grid()
        .into_iter()
        .map(|far| RocPoint {
            threshold: None,
            far,
            frr: curves.iter().map(|c| c.frr_at(far)).sum::<f64>() / curves.len() as f64,
        })
        .collect();
    Ok(RocCurve { points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtfReport {
    pub audio_s: f64,
    /// Median over repetitions.
    pub wall_s: f64,
    pub rtf: f64,
    pub params: usize,
}

impl RtfReport {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "rtf": self.rtf,
            "audio_s": self.audio_s,
            "wall_s": self.wall_s,
            "params": self.params,
        })
        .to_string()
    }
}

/// Median wall time of the full streaming pipeline (front end, network,
/// window scoring) over `repetitions` runs, feeding 100 ms chunks.
pub fn measure_rtf(
    model: &ModelParameters,
    keywords: &[KeywordSpec],
    audio: &AudioBuffer,
    params: WindowParams,
    repetitions: usize,
) -> Result<RtfReport> {
    if repetitions < 3 {
        return Err(KwsError::InvalidParams("need at least 3 repetitions".into()));
    }
    if audio.samples.is_empty() {
        return Err(KwsError::InvalidParams("cannot time zero-length audio".into()));
    }
    let mut session = Session::new(model, keywords.to_vec(), params)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for chunk in audio.samples.chunks(1600) {
            std::hint::black_box(session.push_audio(chunk)?);
        }
        std::hint::black_box(session.flush()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let wall_s = times[times.len() / 2];
    let audio_s = audio.duration_secs();
    Ok(RtfReport {
        audio_s,
        wall_s,
        rtf: wall_s / audio_s,
        params: model.count_parameters(),
    })
}

//! Streaming keyword spotter.
//!
//! A [`Session`] turns audio into frames with the streaming front end, runs
//! the network on batches of at most `batch_frames` frames, and scores every
//! registered keyword over the trailing `window_frames` posteriors whenever a
//! window boundary completes. Boundaries only occur inside voice-active
//! regions: after every `hop_frames` voiced frames, and where a region ends.
//! No boundary is placed before `window_frames` frames exist; a shorter
//! stream is evaluated once by [`Session::flush`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::ctc::{forward_score, PhonemeSequence};
use crate::error::{KwsError, Result};
use crate::features::{FrontendFrame, StreamingFrontend};
use crate::network::{ModelParameters, PosteriorGram};
use crate::trainer::phoneme_indices;

/// Word to phoneme-name sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Self {
        Lexicon { entries }
    }

    /// One `word<TAB>ph ph ph` entry per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |detail: &str| KwsError::Parse {
                what: "lexicon",
                line: i + 1,
                detail: detail.into(),
            };
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected <word><TAB><phonemes>"))?;
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if word.trim().is_empty() || phones.is_empty() {
                return Err(parse_err("empty word or pronunciation"));
            }
            entries.insert(word.trim().to_string(), phones);
        }
        Ok(Lexicon { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KwsError::file(path, e))?;
        Lexicon::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (w, p) in &self.entries {
            writeln!(s, "{w}\t{}", p.join(" ")).unwrap();
        }
        s
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenated pronunciations of a whitespace-separated phrase.
    pub fn phonemes_of(&self, phrase: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for w in phrase.split_whitespace() {
            out.extend_from_slice(self.get(w).ok_or_else(|| KwsError::UnknownWord(w.to_string()))?);
        }
        Ok(out)
    }

    /// Fails on the first phoneme missing from `inventory`.
    pub fn validate(&self, inventory: &[String]) -> Result<()> {
        for p in self.entries.values().flatten() {
            if !inventory.iter().skip(1).any(|u| u == p) {
                return Err(KwsError::UnknownPhoneme(p.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordSpec {
    pub id: usize,
    pub phrase: String,
    pub phonemes: PhonemeSequence,
    /// Fire when the window log-score exceeds this.
    pub threshold: f64,
    /// Divide the log-score by the window length before thresholding.
    pub normalize_by_frames: bool,
}

/// Looks up each word of `phrase` and concatenates the pronunciations.
pub fn register_keyword(
    id: usize,
    phrase: &str,
    lexicon: &Lexicon,
    inventory: &[String],
    threshold: f64,
    normalize_by_frames: bool,
) -> Result<KeywordSpec> {
    if !threshold.is_finite() {
        return Err(KwsError::InvalidParams(format!("threshold for '{phrase}' must be finite")));
    }
    let names = lexicon.phonemes_of(phrase)?;
    let phonemes = PhonemeSequence::new(phoneme_indices(&names, inventory)?)
        .map_err(|_| KwsError::InvalidParams("keyword phrase is empty".into()))?;
    Ok(KeywordSpec {
        id,
        phrase: phrase.split_whitespace().collect::<Vec<_>>().join(" "),
        phonemes,
        threshold,
        normalize_by_frames,
    })
}

/// A line of a keyword file: `phrase<TAB>threshold[<TAB>normalize]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordLine {
    pub phrase: String,
    pub threshold: f64,
    pub normalize: bool,
}

pub fn parse_keyword_file(text: &str) -> Result<Vec<KeywordLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |detail: String| KwsError::Parse {
            what: "keyword file",
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(err("expected <phrase><TAB><threshold>[<TAB>normalize]".into()));
        }
        let threshold = fields[1]
            .trim()
            .parse::<f64>()
            .map_err(|e| err(format!("threshold '{}': {e}", fields[1])))?;
        let normalize = match fields.get(2).map(|s| s.trim()) {
            None | Some("") | Some("0") | Some("false") => false,
            Some("1") | Some("true") | Some("normalize") => true,
            Some(other) => return Err(err(format!("normalize flag '{other}'"))),
        };
        out.push(KeywordLine {
            phrase: fields[0].trim().to_string(),
            threshold,
            normalize,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowParams {
    pub window_frames: usize,
    pub hop_frames: usize,
    /// Largest number of frames sent through the network at once.
    pub batch_frames: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            window_frames: 100,
            hop_frames: 25,
            batch_frames: 32,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if self.hop_frames == 0 || self.hop_frames > self.window_frames || self.batch_frames == 0 {
            return Err(KwsError::InvalidParams(format!(
                "need 0 < hop ({}) <= window ({}) and batch ({}) >= 1",
                self.hop_frames, self.window_frames, self.batch_frames
            )));
        }
        Ok(())
    }
}

/// One keyword scored over one window `[start, end)` of frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub keyword: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub fired: bool,
}

/// `log p(l | window)`, divided by the window length when the keyword asks
/// for it; `-inf` when the window is too short for the keyword.
pub fn score_window(y: &PosteriorGram, k: &KeywordSpec) -> f64 {
    let s = forward_score(&k.phonemes, y);
    if !s.feasible {
        return f64::NEG_INFINITY;
    }
    if k.normalize_by_frames {
        s.log_prob / y.frames() as f64
    } else {
        s.log_prob
    }
}

/// Streaming state for one audio stream. Many sessions can share a model.
pub struct Session<'m> {
    model: &'m ModelParameters,
    keywords: Vec<KeywordSpec>,
    params: WindowParams,
    frontend: StreamingFrontend,
    pending: Vec<Vec<f64>>,
    posts: PosteriorGram,
    /// Stream frame index of the first row in `posts`.
    posts_base: usize,
    frames: usize,
    voiced_since_boundary: usize,
    last_fire: Vec<Option<usize>>,
    closed: bool,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m ModelParameters, keywords: Vec<KeywordSpec>, params: WindowParams) -> Result<Self> {
        params.validate()?;
        model.validate()?;
        if keywords.is_empty() {
            return Err(KwsError::Contract("a session needs at least one keyword".into()));
        }
        let units = model.output_dim();
        if let Some(k) = keywords
            .iter()
            .find(|k| k.phonemes.labels().iter().any(|&u| u >= units))
        {
            return Err(KwsError::InvalidParams(format!(
                "keyword '{}' uses a unit outside the model inventory",
                k.phrase
            )));
        }
        Ok(Session {
            frontend: StreamingFrontend::new(model.frontend.clone(), model.cmvn_prior())?,
            last_fire: vec![None; keywords.len()],
            posts: PosteriorGram::empty(units),
            model,
            keywords,
            params,
            pending: Vec::new(),
            posts_base: 0,
            frames: 0,
            voiced_since_boundary: 0,
            closed: false,
        })
    }

    pub fn keywords(&self) -> &[KeywordSpec] {
        &self.keywords
    }

    /// Frames that have passed through the front end in the current stream.
    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    /// Appends samples; returns the events of every window completed by them.
    pub fn push_audio(&mut self, samples: &[i16]) -> Result<Vec<DetectionEvent>> {
        self.check_open()?;
        let frames = self.frontend.push(samples);
        self.process(frames)
    }

    /// Ends the stream: releases the remaining frames, evaluates a final
    /// window if voiced frames arrived since the last boundary, and resets
    /// for a new stream.
    pub fn flush(&mut self) -> Result<Vec<DetectionEvent>> {
        self.check_open()?;
        let frames = self.frontend.finish();
        let mut events = self.process(frames)?;
        if self.voiced_since_boundary > 0 {
            self.forward_pending()?;
            self.emit(self.frames, &mut events);
        }
        self.reset_stream();
        Ok(events)
    }

    /// After closing, pushing or flushing is a contract error.
    pub fn close(&mut self) {
        self.closed = true;
    }

    fn check_open(&self) -> Result<()> {
        if self.closed {
            return Err(KwsError::Contract("session is closed".into()));
        }
        Ok(())
    }

    fn reset_stream(&mut self) {
        self.frontend.reset();
        self.pending.clear();
        self.posts = PosteriorGram::empty(self.model.output_dim());
        self.posts_base = 0;
        self.frames = 0;
        self.voiced_since_boundary = 0;
        self.last_fire.fill(None);
    }

    fn process(&mut self, frames: Vec<FrontendFrame>) -> Result<Vec<DetectionEvent>> {
        let WindowParams {
            window_frames,
            hop_frames,
            batch_frames,
        } = self.params;
        let mut events = Vec::new();
        for f in frames {
            debug_assert_eq!(f.index, self.frames);
            self.pending.push(f.input);
            self.frames = f.index + 1;
            if f.voiced {
                self.voiced_since_boundary += 1;
            }
            let end = self.frames;
            let boundary = end >= window_frames
                && self.voiced_since_boundary > 0
                && (self.voiced_since_boundary >= hop_frames || !f.voiced);
            if boundary {
                self.forward_pending()?;
                self.emit(end, &mut events);
                self.voiced_since_boundary = 0;
            } else if self.pending.len() >= batch_frames {
                self.forward_pending()?;
            }
        }
        Ok(events)
    }

    fn forward_pending(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let y = self.model.forward(&self.pending)?;
        self.pending.clear();
        self.posts.push_rows(&y);
        let excess = self.posts.frames().saturating_sub(self.params.window_frames);
        self.posts.drop_front(excess);
        self.posts_base += excess;
        Ok(())
    }

    /// Scores the window ending at `end`. Keywords still muted by a recent
    /// detection, or longer than a short final window allows, are skipped.
    fn emit(&mut self, end: usize, events: &mut Vec<DetectionEvent>) {
        let start = end.saturating_sub(self.params.window_frames);
        let window = self.posts.slice(start - self.posts_base..end - self.posts_base);
        for (k, spec) in self.keywords.iter().enumerate() {
            if matches!(self.last_fire[k], Some(f) if end - f < self.params.window_frames) {
                continue;
            }
            if window.frames() < spec.phonemes.min_frames() {
                continue;
            }
            let score = score_window(&window, spec);
            let fired = score > spec.threshold;
            if fired {
                self.last_fire[k] = Some(end);
            }
            events.push(DetectionEvent {
                keyword: spec.id,
                start,
                end,
                score,
                fired,
            });
        }
    }
}

/// Runs a whole utterance through a fresh session in one push.
pub fn spot_utterance(
    model: &ModelParameters,
    keywords: &[KeywordSpec],
    params: WindowParams,
    samples: &[i16],
) -> Result<Vec<DetectionEvent>> {
    let mut s = Session::new(model, keywords.to_vec(), params)?;
    let mut events = s.push_audio(samples)?;
    events.extend(s.flush()?);
    Ok(events)
}

pub const DETECTION_CSV_HEADER: &str = "stream_id,keyword_id,start_frame,end_frame,score,fired\n";

/// Detection log rows (no header).
pub fn detection_csv_rows(stream_id: &str, events: &[DetectionEvent]) -> String {
    let mut s = String::new();
    for e in events {
        writeln!(
            s,
            "{stream_id},{},{},{},{:.6},{}",
            e.keyword, e.start, e.end, e.score, e.fired as u8
        )
        .unwrap();
    }
    s
}

use std::path::{Path, PathBuf};

use crate::ctc::PhonemeSequence;
use crate::error::{KwsError, Result};
use crate::features::{
    frame_signal, read_wav, stack_frames, AudioBuffer, CmvnStats, FeatureVector, FrontendConfig,
};

/// One manifest line: a WAV path and its phoneme transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub phonemes: Vec<String>,
}

/// Parses `path<TAB>ph ph ph` lines. Relative paths are resolved against
/// `base`. Blank lines and `#` comments are skipped; an empty transcript is
/// allowed (evaluation negatives may be pure background).
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, phones) = line.split_once('\t').ok_or_else(|| KwsError::Parse {
            what: "manifest",
            line: i + 1,
            detail: "expected <wav path><TAB><phonemes>".into(),
        })?;
        let path = Path::new(path.trim());
        out.push(ManifestEntry {
            path: if path.is_absolute() {
                path.to_path_buf()
            } else {
                base.join(path)
            },
            phonemes: phones.split_whitespace().map(str::to_string).collect(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| KwsError::file(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Maps phoneme names to inventory indices.
pub fn phoneme_indices(names: &[String], inventory: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            inventory
                .iter()
                .position(|u| u == n)
                .filter(|&i| i != crate::network::BLANK)
                .ok_or_else(|| KwsError::UnknownPhoneme(n.clone()))
        })
        .collect()
}

/// An utterance ready for training: raw filterbank frames and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Vec<FeatureVector>,
    pub labels: PhonemeSequence,
}

impl Utterance {
    pub fn feasible(&self) -> bool {
        self.frames.len() >= self.labels.min_frames()
    }
}

/// The training set `S` of (features, label sequence) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub items: Vec<Utterance>,
}

impl TrainingSet {
    pub fn new(items: Vec<Utterance>) -> Result<Self> {
        if items.is_empty() {
            return Err(KwsError::Contract("training set is empty".into()));
        }
        Ok(TrainingSet { items })
    }

    /// Builds a set from in-memory audio; transcripts are phoneme names.
    pub fn from_audio<'a, I>(items: I, config: &FrontendConfig, inventory: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, &'a AudioBuffer, &'a [String])>,
    {
        let mut out = Vec::new();
        for (id, audio, phones) in items {
            let labels = PhonemeSequence::new(phoneme_indices(phones, inventory)?)
                .map_err(|_| KwsError::InvalidParams(format!("utterance {id} has an empty transcript")))?;
            out.push(Utterance {
                frames: frame_signal(audio, &config.frame)?,
                id,
                labels,
            });
        }
        TrainingSet::new(out)
    }

    pub fn from_manifest(path: &Path, config: &FrontendConfig, inventory: &[String]) -> Result<Self> {
        let entries = read_manifest(path)?;
        let mut audio = Vec::with_capacity(entries.len());
        for e in &entries {
            audio.push(read_wav(&e.path)?);
        }
        TrainingSet::from_audio(
            entries
                .iter()
                .zip(&audio)
                .map(|(e, a)| (e.path.display().to_string(), a, e.phonemes.as_slice())),
            config,
            inventory,
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.items.iter().map(|u| u.frames.len()).sum()
    }

    /// Mean and variance of the stacked (pre-CMVN) input vectors over the
    /// whole set; stored in the model to seed streaming CMVN.
    pub fn input_statistics(&self, config: &FrontendConfig) -> (Vec<f64>, Vec<f64>) {
        let dim = config.input_dim();
        let mut stats = CmvnStats::new(dim, config.cmvn_variance_floor);
        for u in &self.items {
            for v in stack_frames(&u.frames, &config.stacking) {
                stats.update(&v.0);
            }
        }
        (stats.mean().to_vec(), stats.variance())
    }
}

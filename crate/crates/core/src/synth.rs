//! Deterministic synthetic speech corpus.
//!
//! Every phoneme has a fixed acoustic signature: vowels are pairs of
//! harmonic-rich tones at formant-like frequencies, consonants are bursts of
//! band-limited noise. Each rendered instance jitters duration, pitch,
//! frequencies and level, and a low white-noise floor runs underneath. Words
//! are short phoneme strings; keywords are two-word phrases.
//!
//! The corpus has the shape of a small keyword-spotting study: a general
//! training set of random word strings for the universal model,
//! keyword-specific adaptation data, dev sets, and held-out positives and
//! negatives for evaluation. Negatives never contain a keyword's phoneme
//! sequence.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::features::{encode_wav, AudioBuffer, SAMPLE_RATE};
use crate::io::write_atomic;
use crate::spotter::Lexicon;
use crate::trainer::TrainConfig;

const SHIFT: usize = 160;

#[derive(Debug, Clone, Copy)]
enum Voice {
    /// Two formant frequencies in Hz.
    Vowel(f64, f64),
    /// Noise band in Hz.
    Noise(f64, f64),
    /// Low murmur plus one formant.
    Nasal(f64),
}

const PHONEMES: [(&str, Voice); 12] = [
    ("a", Voice::Vowel(750.0, 1250.0)),
    ("e", Voice::Vowel(480.0, 2000.0)),
    ("i", Voice::Vowel(290.0, 2500.0)),
    ("o", Voice::Vowel(520.0, 880.0)),
    ("u", Voice::Vowel(330.0, 700.0)),
    ("b", Voice::Noise(150.0, 500.0)),
    ("d", Voice::Noise(1700.0, 2600.0)),
    ("g", Voice::Noise(900.0, 1500.0)),
    ("k", Voice::Noise(2800.0, 3800.0)),
    ("s", Voice::Noise(4500.0, 7000.0)),
    ("m", Voice::Nasal(1100.0)),
    ("n", Voice::Nasal(1800.0)),
];

/// Name of the blank unit in generated inventories.
pub const BLANK_NAME: &str = "<blk>";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocabulary: usize,
    pub keywords: usize,
    /// Universal-model training utterances (random word strings).
    pub general_train: usize,
    pub general_dev: usize,
    /// Keyword-specific adaptation utterances per keyword.
    pub keyword_train: usize,
    pub keyword_dev: usize,
    pub eval_positives: usize,
    pub eval_negatives: usize,
    /// Phoneme duration range in frames.
    pub phoneme_frames: (usize, usize),
    /// Silence before and after the speech, in frames.
    pub padding_frames: (usize, usize),
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            vocabulary: 24,
            keywords: 3,
            general_train: 1000,
            general_dev: 120,
            keyword_train: 60,
            keyword_dev: 20,
            eval_positives: 200,
            eval_negatives: 1000,
            phoneme_frames: (7, 12),
            padding_frames: (15, 40),
            noise_std: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub audio: AudioBuffer,
    pub words: Vec<String>,
    pub phonemes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Blank first, then the phonemes.
    pub inventory: Vec<String>,
    pub lexicon: Lexicon,
    /// Keyword phrases (space-separated words).
    pub keywords: Vec<String>,
    pub general_train: Vec<SynthUtterance>,
    pub general_dev: Vec<SynthUtterance>,
    pub keyword_train: Vec<SynthUtterance>,
    pub keyword_dev: Vec<SynthUtterance>,
    /// Held-out keyword utterances followed by negatives.
    pub eval: Vec<SynthUtterance>,
}

pub fn inventory() -> Vec<String> {
    std::iter::once(BLANK_NAME.to_string())
        .chain(PHONEMES.iter().map(|(n, _)| n.to_string()))
        .collect()
}

/// Optimizer settings that train a 3x128 model on this corpus in a few
/// epochs. With the default initialization range (0.02) the signal through
/// three hidden layers is too small and training stalls on the all-blank
/// solution.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        init_range: 0.1,
        batch_size: 4,
        max_epochs: 8,
        ..TrainConfig::default()
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

struct Generator<'a> {
    config: &'a SynthConfig,
    rng: ChaCha8Rng,
    words: Vec<(String, Vec<usize>)>,
}

impl Generator<'_> {
    fn make_vocabulary(&mut self) {
        let mut seen = std::collections::BTreeSet::new();
        let consonants: Vec<usize> = (5..PHONEMES.len()).collect();
        let vowels: Vec<usize> = (0..5).collect();
        while self.words.len() < self.config.vocabulary {
            // alternate consonant/vowel so neighbouring phonemes always differ
            let len = self.rng.gen_range(1..=3);
            let mut consonant_first = self.rng.gen_bool(0.6);
            let mut w = Vec::with_capacity(len);
            for _ in 0..len {
                let pool = if consonant_first { &consonants } else { &vowels };
                w.push(*pool.choose(&mut self.rng).unwrap());
                consonant_first = !consonant_first;
            }
            if len == 1 && w[0] >= 5 {
                continue;
            }
            if seen.insert(w.clone()) {
                let name: String = w.iter().map(|&p| PHONEMES[p].0).collect();
                self.words.push((name, w));
            }
        }
    }

    /// Word strings whose phonemes never repeat across a word boundary.
    fn word_string(&mut self, n: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            let w = self.rng.gen_range(0..self.words.len());
            let ok = out.last().map_or(true, |&prev| {
                self.words[prev].1.last() != self.words[w].1.first()
            });
            if ok {
                out.push(w);
            }
        }
        out
    }

    fn pick_keywords(&mut self) -> Result<Vec<Vec<usize>>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        for _ in 0..10_000 {
            if out.len() == self.config.keywords {
                return Ok(out);
            }
            let pair = self.word_string(2);
            let len: usize = pair.iter().map(|&w| self.words[w].1.len()).sum();
            if pair[0] == pair[1] || !(3..=5).contains(&len) {
                continue;
            }
            let phones = self.phonemes_of(&pair);
            // no keyword may contain another
            let clash = out.iter().any(|k| {
                let kp = self.phonemes_of(k);
                contains_run(&kp, &phones) || contains_run(&phones, &kp)
            });
            if !clash {
                out.push(pair);
            }
        }
        Err(KwsError::InvalidParams(
            "vocabulary too small to pick distinct keywords".into(),
        ))
    }

    fn phonemes_of(&self, words: &[usize]) -> Vec<String> {
        words
            .iter()
            .flat_map(|&w| self.words[w].1.iter().map(|&p| PHONEMES[p].0.to_string()))
            .collect()
    }

    fn utterance(&mut self, id: String, words: Vec<usize>) -> SynthUtterance {
        let phones: Vec<usize> = words.iter().flat_map(|&w| self.words[w].1.clone()).collect();
        let audio = self.render(&phones);
        SynthUtterance {
            id,
            phonemes: self.phonemes_of(&words),
            words: words.iter().map(|&w| self.words[w].0.clone()).collect(),
            audio,
        }
    }

    fn render(&mut self, phones: &[usize]) -> AudioBuffer {
        let c = self.config;
        let (pad_lo, pad_hi) = c.padding_frames;
        let lead = self.rng.gen_range(pad_lo..=pad_hi) * SHIFT;
        let trail = self.rng.gen_range(pad_lo..=pad_hi) * SHIFT;
        let mut signal = vec![0.0f64; lead];
        let pitch = self.rng.gen_range(100.0..220.0);
        for (i, &p) in phones.iter().enumerate() {
            if i > 0 {
                let gap = self.rng.gen_range(0..=2) * SHIFT;
                signal.extend(std::iter::repeat(0.0).take(gap));
            }
            let frames = self.rng.gen_range(c.phoneme_frames.0..=c.phoneme_frames.1);
            signal.extend(self.phoneme(PHONEMES[p].1, frames * SHIFT, pitch));
        }
        signal.extend(std::iter::repeat(0.0).take(trail));
        let samples = signal
            .into_iter()
            .map(|s| {
                let n = self.gaussian() * c.noise_std;
                (s + n).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
            })
            .collect();
        AudioBuffer::new(samples)
    }

    fn gaussian(&mut self) -> f64 {
        // Box-Muller
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    fn phoneme(&mut self, voice: Voice, n: usize, pitch: f64) -> Vec<f64> {
        let sr = SAMPLE_RATE as f64;
        let jitter = |rng: &mut ChaCha8Rng, f: f64| f * rng.gen_range(0.95..1.05);
        let level = self.rng.gen_range(1500.0..3500.0);
        let mut comps: Vec<(f64, f64, f64)> = Vec::new(); // (freq, amp, phase)
        match voice {
            Voice::Vowel(f1, f2) => {
                let (f1, f2) = (jitter(&mut self.rng, f1), jitter(&mut self.rng, f2));
                comps.push((f1, 1.0, self.rng.gen_range(0.0..2.0 * PI)));
                comps.push((f2, 0.6, self.rng.gen_range(0.0..2.0 * PI)));
                comps.push((pitch, 0.3, self.rng.gen_range(0.0..2.0 * PI)));
            }
            Voice::Noise(lo, hi) => {
                for _ in 0..24 {
                    let f = self.rng.gen_range(lo..hi);
                    comps.push((f, 0.35, self.rng.gen_range(0.0..2.0 * PI)));
                }
            }
            Voice::Nasal(f) => {
                comps.push((jitter(&mut self.rng, 250.0), 1.0, self.rng.gen_range(0.0..2.0 * PI)));
                comps.push((jitter(&mut self.rng, f), 0.4, self.rng.gen_range(0.0..2.0 * PI)));
            }
        }
        let ramp = (n / 8).max(1);
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let env = if i < ramp {
                    i as f64 / ramp as f64
                } else if n - i < ramp {
                    (n - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                let s: f64 = comps.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
                level * env * s
            })
            .collect()
    }
}

/// Renders one utterance of the given phoneme names (no blank) with the
/// acoustic settings of `config`, drawing jitter from `seed`.
pub fn render_phonemes(config: &SynthConfig, phonemes: &[String], seed: u64) -> Result<AudioBuffer> {
    let phones = phonemes
        .iter()
        .map(|name| {
            PHONEMES
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| KwsError::UnknownPhoneme(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g = Generator {
        config,
        rng: ChaCha8Rng::seed_from_u64(seed),
        words: Vec::new(),
    };
    Ok(g.render(&phones))
}

/// Generates the whole corpus. Identical configs give identical corpora.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.keywords == 0 || config.vocabulary < 2 * config.keywords {
        return Err(KwsError::InvalidParams(
            "need at least one keyword and two vocabulary words per keyword".into(),
        ));
    }
    let mut g = Generator {
        config,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        words: Vec::new(),
    };
    g.make_vocabulary();
    let keywords = g.pick_keywords()?;
    let keyword_phones: Vec<Vec<String>> = keywords.iter().map(|k| g.phonemes_of(k)).collect();

    let general = |g: &mut Generator, prefix: &str, n: usize| -> Vec<SynthUtterance> {
        (0..n)
            .map(|i| {
                let len = g.rng.gen_range(1..=3);
                let words = g.word_string(len);
                g.utterance(format!("{prefix}{i:05}"), words)
            })
            .collect()
    };
    let general_train = general(&mut g, "gen", config.general_train);
    let general_dev = general(&mut g, "gdev", config.general_dev);

    let keyword_set = |g: &mut Generator, prefix: &str, per_kw: usize| -> Vec<SynthUtterance> {
        let mut out = Vec::new();
        for (k, words) in keywords.iter().enumerate() {
            for i in 0..per_kw {
                out.push(g.utterance(format!("{prefix}{k}_{i:04}"), words.clone()));
            }
        }
        out
    };
    let keyword_train = keyword_set(&mut g, "kw", config.keyword_train);
    let keyword_dev = keyword_set(&mut g, "kdev", config.keyword_dev);
    let mut eval = keyword_set(&mut g, "pos", config.eval_positives);

    let mut negatives = 0;
    while negatives < config.eval_negatives {
        // half the negatives reuse one keyword word next to other words
        let len = g.rng.gen_range(1..=3);
        let mut words = g.word_string(len);
        if g.rng.gen_bool(0.5) {
            let k = &keywords[g.rng.gen_range(0..keywords.len())];
            let w = k[g.rng.gen_range(0..2)];
            let at = g.rng.gen_range(0..=words.len());
            words.insert(at, w);
            let boundary_repeat = words.windows(2).any(|p| g.words[p[0]].1.last() == g.words[p[1]].1.first());
            if boundary_repeat {
                continue;
            }
        }
        let phones = g.phonemes_of(&words);
        if keyword_phones.iter().any(|k| contains_run(&phones, k)) {
            continue;
        }
        eval.push(g.utterance(format!("neg{negatives:05}"), words));
        negatives += 1;
    }

    let lexicon = Lexicon::new(
        g.words
            .iter()
            .map(|(name, p)| (name.clone(), p.iter().map(|&i| PHONEMES[i].0.to_string()).collect()))
            .collect::<BTreeMap<_, _>>(),
    );
    Ok(SynthCorpus {
        inventory: inventory(),
        lexicon,
        keywords: keywords
            .iter()
            .map(|k| k.iter().map(|&w| g.words[w].0.as_str()).collect::<Vec<_>>().join(" "))
            .collect(),
        general_train,
        general_dev,
        keyword_train,
        keyword_dev,
        eval,
    })
}

fn manifest_text(dir: &str, utts: &[SynthUtterance]) -> String {
    let mut s = String::new();
    for u in utts {
        writeln!(s, "{dir}/{}.wav\t{}", u.id, u.phonemes.join(" ")).unwrap();
    }
    s
}

impl SynthCorpus {
    /// Writes WAV files under `dir/<set>/`, one manifest per set, the
    /// lexicon, the keyword list (with `threshold` for every keyword) and
    /// the unit inventory.
    pub fn write(&self, dir: &Path, threshold: f64) -> Result<()> {
        let sets: [(&str, &[SynthUtterance]); 5] = [
            ("train", &self.general_train),
            ("dev", &self.general_dev),
            ("kw_train", &self.keyword_train),
            ("kw_dev", &self.keyword_dev),
            ("eval", &self.eval),
        ];
        for (name, utts) in sets {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| KwsError::file(&sub, e))?;
            for u in utts {
                write_atomic(&sub.join(format!("{}.wav", u.id)), &encode_wav(&u.audio)?)?;
            }
            write_atomic(
                &dir.join(format!("{name}.tsv")),
                manifest_text(name, utts).as_bytes(),
            )?;
        }
        write_atomic(&dir.join("lexicon.txt"), self.lexicon.to_text().as_bytes())?;
        let mut kw = String::new();
        for k in &self.keywords {
            writeln!(kw, "{k}\t{threshold}").unwrap();
        }
        write_atomic(&dir.join("keywords.txt"), kw.as_bytes())?;
        write_atomic(&dir.join("units.txt"), (self.inventory.join("\n") + "\n").as_bytes())?;
        Ok(())
    }
}

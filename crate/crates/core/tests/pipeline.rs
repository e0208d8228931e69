use std::sync::OnceLock;

use kws_core::eval::{collect_trials, load_eval_corpus, EvalUtterance, TrialClass};
use kws_core::features::{frame_signal, prepare_inputs, FrontendConfig};
use kws_core::network::{load_model, save_model, ModelParameters, BLANK};
use kws_core::spotter::{register_keyword, spot_utterance, KeywordSpec, WindowParams};
use kws_core::synth::{self, SynthConfig, SynthCorpus, SynthUtterance};
use kws_core::trainer::{fit, initialize, set_cmvn_prior, TrainReport, TrainingSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    corpus: SynthCorpus,
    model: ModelParameters,
    report: TrainReport,
}

fn small_config() -> SynthConfig {
    SynthConfig {
        general_train: 400,
        general_dev: 40,
        keyword_train: 5,
        keyword_dev: 5,
        eval_positives: 10,
        eval_negatives: 40,
        ..SynthConfig::default()
    }
}

fn set(corpus: &SynthCorpus, utts: &[SynthUtterance]) -> TrainingSet {
    TrainingSet::from_audio(
        utts.iter().map(|u| (u.id.clone(), &u.audio, u.phonemes.as_slice())),
        &FrontendConfig::default(),
        &corpus.inventory,
    )
    .unwrap()
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = synth::generate(&small_config()).unwrap();
        let train = set(&corpus, &corpus.general_train);
        let dev = set(&corpus, &corpus.general_dev);
        let config = synth::train_config();
        let mut model =
            initialize(FrontendConfig::default(), &[128, 128], corpus.inventory.clone(), &config).unwrap();
        set_cmvn_prior(&mut model, &train);
        let (model, report) = fit(model, &train, &dev, &config).unwrap();
        Trained { corpus, model, report }
    })
}

fn keywords(corpus: &SynthCorpus, threshold: f64) -> Vec<KeywordSpec> {
    corpus
        .keywords
        .iter()
        .enumerate()
        .map(|(i, k)| register_keyword(i, k, &corpus.lexicon, &corpus.inventory, threshold, false).unwrap())
        .collect()
}

fn eval_set(corpus: &SynthCorpus) -> Vec<EvalUtterance> {
    corpus
        .eval
        .iter()
        .map(|u| EvalUtterance {
            id: u.id.clone(),
            audio: u.audio.clone(),
            phonemes: u.phonemes.clone(),
        })
        .collect()
}

#[test]
fn training_improves_dev_loss() {
    let t = trained();
    assert!(t.report.best_epoch > 0);
    let best = t.report.epochs[t.report.best_epoch - 1].dev_loss;
    assert!(best < 0.1 * t.report.initial_dev_loss, "{best} vs {}", t.report.initial_dev_loss);
}

#[test]
fn blank_dominates_trained_posteriors() {
    let t = trained();
    let (mut blank, mut total) = (0, 0);
    for u in &t.corpus.eval {
        let frames = frame_signal(&u.audio, &t.model.frontend.frame).unwrap();
        let x = prepare_inputs(&frames, &t.model.frontend, &t.model.cmvn_prior());
        let y = t.model.forward(&x).unwrap();
        for f in 0..y.frames() {
            let row = y.row(f);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            blank += usize::from(best == BLANK);
            total += 1;
        }
    }
    assert!(blank * 2 >= total, "blank wins {blank} of {total} frames");
}

/// A different ordering of `phones` with no equal neighbours.
fn scramble(phones: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    for _ in 0..1000 {
        let mut p = phones.to_vec();
        p.shuffle(rng);
        let repeats = p.windows(2).any(|w| w[0] == w[1]);
        if p != phones && !repeats {
            return p;
        }
    }
    panic!("no valid reordering of {phones:?}");
}

#[test]
fn keyword_fires_but_shuffled_phonemes_do_not() {
    let t = trained();
    let threshold = -5.0;
    let kws = keywords(&t.corpus, threshold);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = small_config();
    for (i, k) in kws.iter().enumerate() {
        let phones: Vec<String> = k.phonemes.labels().iter().map(|&u| t.corpus.inventory[u].clone()).collect();
        let audio = synth::render_phonemes(&config, &phones, 900 + i as u64).unwrap();
        let events = spot_utterance(&t.model, &kws, WindowParams::default(), &audio.samples).unwrap();
        assert!(
            events.iter().any(|e| e.keyword == k.id && e.fired && e.score > threshold),
            "keyword {i} did not fire: {events:?}"
        );

        let shuffled = scramble(&phones, &mut rng);
        let audio = synth::render_phonemes(&config, &shuffled, 950 + i as u64).unwrap();
        let events = spot_utterance(&t.model, &kws, WindowParams::default(), &audio.samples).unwrap();
        assert!(
            !events.iter().any(|e| e.keyword == k.id && e.fired),
            "keyword {i} fired on {shuffled:?}: {events:?}"
        );
    }
}

#[test]
fn trial_counts_match_utterances_times_keywords() {
    let t = trained();
    let kws = keywords(&t.corpus, -5.0);
    let utts = eval_set(&t.corpus);
    let trials = collect_trials(&t.model, &utts, &kws, WindowParams::default()).unwrap();
    assert_eq!(trials.len(), utts.len() * kws.len());
    let cfg = small_config();
    for k in 0..kws.len() {
        let pos = trials.iter().filter(|tr| tr.keyword == k && tr.class == TrialClass::Positive).count();
        let neg = trials.iter().filter(|tr| tr.keyword == k && tr.class == TrialClass::Negative).count();
        assert_eq!(pos, cfg.eval_positives);
        assert_eq!(neg, cfg.eval_negatives);
    }
}

#[test]
fn saved_model_spots_identically() {
    let t = trained();
    let back = load_model(&save_model(&t.model)).unwrap();
    assert_eq!(back, t.model);
    let kws = keywords(&t.corpus, -5.0);
    for u in t.corpus.eval.iter().take(5) {
        let a = spot_utterance(&t.model, &kws, WindowParams::default(), &u.audio.samples).unwrap();
        let b = spot_utterance(&back, &kws, WindowParams::default(), &u.audio.samples).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn written_corpus_reads_back() {
    let corpus = synth::generate(&SynthConfig {
        general_train: 6,
        general_dev: 3,
        keyword_train: 2,
        keyword_dev: 1,
        eval_positives: 2,
        eval_negatives: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path(), -5.0).unwrap();

    let (utts, failed) = load_eval_corpus(&dir.path().join("eval.tsv")).unwrap();
    assert!(failed.is_empty());
    assert_eq!(utts.len(), corpus.eval.len());
    for (a, b) in utts.iter().zip(&corpus.eval) {
        assert_eq!(a.audio, b.audio);
        assert_eq!(a.phonemes, b.phonemes);
    }

    let fe = FrontendConfig::default();
    let from_files = TrainingSet::from_manifest(&dir.path().join("dev.tsv"), &fe, &corpus.inventory).unwrap();
    let in_memory = set(&corpus, &corpus.general_dev);
    assert_eq!(from_files.len(), in_memory.len());
    for (a, b) in from_files.items.iter().zip(&in_memory.items) {
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.labels, b.labels);
    }
}

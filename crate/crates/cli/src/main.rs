use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kws_core::ctc::{alignment_dump, format_alignment};
use kws_core::eval::{
    average_roc, collect_trials, load_eval_corpus, measure_rtf, roc_for_keyword, RocCurve, TrialClass,
};
use kws_core::features::{frame_signal, prepare_inputs, read_wav, AudioBuffer, FrontendConfig};
use kws_core::io::write_atomic;
use kws_core::network::{load_model_file, save_model_file, ModelParameters};
use kws_core::spotter::{
    detection_csv_rows, parse_keyword_file, register_keyword, KeywordSpec, Lexicon, Session, WindowParams,
    DETECTION_CSV_HEADER,
};
use kws_core::synth::{self, SynthConfig};
use kws_core::trainer::{adapt, fit_with, initialize, set_cmvn_prior, TrainConfig, TrainingSet};
use kws_core::KwsError;

#[derive(Parser)]
#[command(name = "kws", version, about = "CTC keyword spotting: train, adapt, spot, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a manifest of transcribed WAV files.
    Train(TrainArgs),
    /// Fine-tune a trained model on keyword-specific data.
    Adapt(AdaptArgs),
    /// Stream WAV files through a spotter and print the detection log.
    Spot(SpotArgs),
    /// Score a labeled corpus and write per-keyword and averaged ROC curves.
    Eval(EvalArgs),
    /// Measure the real-time factor of the streaming pipeline.
    Bench(BenchArgs),
    /// Write a deterministic synthetic corpus.
    Synth(SynthArgs),
    /// Dump the top posteriors of every frame of one utterance.
    Align(AlignArgs),
}

#[derive(Args)]
struct OptimizerArgs {
    #[arg(long, default_value_t = 0.008)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    halving_threshold: f64,
    #[arg(long, default_value_t = 1e-5)]
    stop_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl OptimizerArgs {
    fn config(&self, init_range: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            init_range,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            halving_improvement_threshold: self.halving_threshold,
            stop_lr: self.stop_lr,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest: `<wav path><TAB><space-separated phonemes>` per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Development manifest used for learning-rate halving and model selection.
    #[arg(long)]
    dev: PathBuf,
    /// Output units, one per line, blank first.
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV; defaults to `<out>.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "128,128,128")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.02)]
    init_range: f64,
    #[arg(long, default_value_t = 10)]
    left_context: usize,
    #[arg(long, default_value_t = 5)]
    right_context: usize,
    #[command(flatten)]
    optimizer: OptimizerArgs,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Adaptation learning rate; defaults to a tenth of `--lr`.
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[command(flatten)]
    optimizer: OptimizerArgs,
}

#[derive(Args)]
struct WindowArgs {
    #[arg(long, default_value_t = 100)]
    window_frames: usize,
    #[arg(long, default_value_t = 25)]
    hop_frames: usize,
    #[arg(long, default_value_t = 32)]
    batch_frames: usize,
}

impl WindowArgs {
    fn params(&self) -> WindowParams {
        WindowParams {
            window_frames: self.window_frames,
            hop_frames: self.hop_frames,
            batch_frames: self.batch_frames,
        }
    }
}

#[derive(Args)]
struct KeywordArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    /// Keyword file: `<phrase><TAB><threshold>[<TAB>normalize]` per line.
    #[arg(long)]
    keywords: PathBuf,
    /// Use this threshold for every keyword.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Divide window scores by the window length.
    #[arg(long)]
    normalize_score: bool,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Args)]
struct SpotArgs {
    #[command(flatten)]
    keywords: KeywordArgs,
    /// Detection log CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    wavs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    keywords: KeywordArgs,
    /// Labeled trial manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for `roc_<keyword>.csv`, `roc_average.csv` and `trials.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    keywords: KeywordArgs,
    /// Audio to time; files are concatenated.
    #[arg(required = true)]
    wavs: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Threshold written to keywords.txt.
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    threshold: f64,
    #[arg(long, default_value_t = 3)]
    keywords: usize,
    #[arg(long, default_value_t = 24)]
    vocabulary: usize,
    #[arg(long, default_value_t = 1000)]
    general_train: usize,
    #[arg(long, default_value_t = 120)]
    general_dev: usize,
    #[arg(long, default_value_t = 60)]
    keyword_train: usize,
    #[arg(long, default_value_t = 20)]
    keyword_dev: usize,
    /// Held-out positives per keyword.
    #[arg(long, default_value_t = 200)]
    eval_positives: usize,
    #[arg(long, default_value_t = 1000)]
    eval_negatives: usize,
    #[arg(long, default_value_t = 30.0)]
    noise_std: f64,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &KwsError) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if matches!(e, KwsError::InvalidParams(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Spot(a) => cmd_spot(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Align(a) => cmd_align(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kws: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

type Result<T> = kws_core::Result<T>;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| KwsError::File {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_units(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Writes to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn report_path(report: Option<PathBuf>, out: &Path) -> PathBuf {
    report.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    })
}

fn print_epoch(e: &kws_core::trainer::EpochStats) {
    eprintln!(
        "epoch {:>3}  train {:.6}  dev {:.6}  lr {:e}  skipped {}",
        e.epoch, e.train_loss, e.dev_loss, e.lr, e.skipped
    );
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let inventory = read_units(&a.units)?;
    let mut frontend = FrontendConfig::default();
    frontend.stacking.left_context = a.left_context;
    frontend.stacking.right_context = a.right_context;
    let config = a.optimizer.config(a.init_range);
    config.validate()?;
    let train = TrainingSet::from_manifest(&a.manifest, &frontend, &inventory)?;
    let dev = TrainingSet::from_manifest(&a.dev, &frontend, &inventory)?;
    let mut model = initialize(frontend, &a.hidden, inventory, &config)?;
    set_cmvn_prior(&mut model, &train);
    let (model, report) = fit_with(model, &train, &dev, &config, print_epoch)?;
    save_model_file(&a.out, &model)?;
    write_atomic(&report_path(a.report, &a.out), report.to_csv().as_bytes())
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let model = load_model_file(&a.model)?;
    let base = a.optimizer.config(TrainConfig::default().init_range);
    let config = match a.adapt_lr {
        Some(lr) => TrainConfig {
            learning_rate: lr,
            ..base
        },
        None => base.for_adaptation(),
    };
    let set = TrainingSet::from_manifest(&a.manifest, &model.frontend, &model.inventory)?;
    let dev = TrainingSet::from_manifest(&a.dev, &model.frontend, &model.inventory)?;
    let (model, report) = adapt(model, &set, &dev, &config)?;
    report.epochs.iter().for_each(print_epoch);
    save_model_file(&a.out, &model)?;
    write_atomic(&report_path(a.report, &a.out), report.to_csv().as_bytes())
}

fn load_keywords(a: &KeywordArgs) -> Result<(ModelParameters, Vec<KeywordSpec>)> {
    a.window.params().validate()?;
    let model = load_model_file(&a.model)?;
    let lexicon = Lexicon::read(&a.lexicon)?;
    let lines = parse_keyword_file(&read_text(&a.keywords)?)?;
    if lines.is_empty() {
        return Err(KwsError::InvalidParams(format!("no keywords in {}", a.keywords.display())));
    }
    let keywords = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            register_keyword(
                i,
                &l.phrase,
                &lexicon,
                &model.inventory,
                a.threshold.unwrap_or(l.threshold),
                l.normalize || a.normalize_score,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, keywords))
}

fn cmd_spot(a: SpotArgs) -> Result<()> {
    let (model, keywords) = load_keywords(&a.keywords)?;
    let mut log = String::from(DETECTION_CSV_HEADER);
    let mut session = Session::new(&model, keywords, a.keywords.window.params())?;
    for path in &a.wavs {
        let audio = read_wav(path)?;
        let mut events = session.push_audio(&audio.samples)?;
        events.extend(session.flush()?);
        log.push_str(&detection_csv_rows(&path.display().to_string(), &events));
    }
    session.close();
    emit(a.out.as_deref(), &log)
}

fn trial_class(c: TrialClass) -> &'static str {
    match c {
        TrialClass::Positive => "positive",
        TrialClass::Negative => "negative",
        TrialClass::OtherKeyword => "other_keyword",
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, keywords) = load_keywords(&a.keywords)?;
    let (utts, failed) = load_eval_corpus(&a.manifest)?;
    for (path, e) in &failed {
        eprintln!("kws: skipping {}: {e}", path.display());
    }
    let trials = collect_trials(&model, &utts, &keywords, a.keywords.window.params())?;
    let mut csv = String::from("utterance,keyword_id,class,score\n");
    for t in &trials {
        writeln!(csv, "{},{},{},{:.6}", t.utterance, t.keyword, trial_class(t.class), t.score).unwrap();
    }
    write_atomic(&a.out.join("trials.csv"), csv.as_bytes())?;

    let mut curves: Vec<RocCurve> = Vec::new();
    let mut summary = String::from("keyword_id,phrase,frr_at_far_0.05,frr_at_far_0.015\n");
    for k in &keywords {
        let c = roc_for_keyword(&trials, k.id)?;
        write_atomic(&a.out.join(format!("roc_{}.csv", k.id)), c.to_csv().as_bytes())?;
        writeln!(summary, "{},{},{:.6},{:.6}", k.id, k.phrase, c.frr_at(0.05), c.frr_at(0.015)).unwrap();
        curves.push(c);
    }
    let avg = average_roc(&curves)?;
    write_atomic(&a.out.join("roc_average.csv"), avg.to_csv().as_bytes())?;
    writeln!(summary, "average,,{:.6},{:.6}", avg.frr_at(0.05), avg.frr_at(0.015)).unwrap();
    emit(None, &summary)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (model, keywords) = load_keywords(&a.keywords)?;
    let mut samples = Vec::new();
    for path in &a.wavs {
        samples.extend(read_wav(path)?.samples);
    }
    let report = measure_rtf(&model, &keywords, &AudioBuffer::new(samples), a.keywords.window.params(), a.runs)?;
    emit(a.out.as_deref(), &(report.to_json() + "\n"))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        seed: a.seed,
        vocabulary: a.vocabulary,
        keywords: a.keywords,
        general_train: a.general_train,
        general_dev: a.general_dev,
        keyword_train: a.keyword_train,
        keyword_dev: a.keyword_dev,
        eval_positives: a.eval_positives,
        eval_negatives: a.eval_negatives,
        noise_std: a.noise_std,
        ..SynthConfig::default()
    };
    synth::generate(&config)?.write(&a.out, a.threshold)
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    if a.top_k == 0 {
        return Err(KwsError::InvalidParams("--top-k must be at least 1".into()));
    }
    let model = load_model_file(&a.model)?;
    let audio = read_wav(&a.wav)?;
    let frames = frame_signal(&audio, &model.frontend.frame)?;
    let inputs = prepare_inputs(&frames, &model.frontend, &model.cmvn_prior());
    let y = model.forward(&inputs)?;
    emit(a.out.as_deref(), &format_alignment(&alignment_dump(&y, a.top_k), &model.inventory))
}

//! Command-line surface for the style transfer pipeline: synthetic corpus
//! generation, teacher pretraining, adversarial training, transfer,
//! evaluation, and classifier explanation.
//!
//! Exit codes: 0 success, 1 usage, 2 data/input, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mssrnet_core::checkpoint;
use mssrnet_core::data;
use mssrnet_core::metrics;
use mssrnet_core::model::MssrNetConfig;
use mssrnet_core::nn::StackConfig;
use mssrnet_core::teacher::{self, SalienceConfig, TeacherConfig, TeacherTrainOptions};
use mssrnet_core::training::{self, LossWeights, TrainSchedule, TrainSetup};
use mssrnet_core::{AdamConfig, Corpus};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "mssrnet", version, about = "Sequential style representation transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark corpus (one file per style).
    GenSynthetic(GenSyntheticArgs),
    /// Pretrain the style classifier (teacher).
    TeacherTrain(TeacherTrainArgs),
    /// Run the interleaved adversarial training schedule.
    Train(TrainArgs),
    /// Rewrite a text file into a target style with a trained model.
    Transfer(TransferArgs),
    /// Compute the metric suite over transferred outputs.
    Evaluate(EvaluateArgs),
    /// Report stylistic spans via classifier disturbance.
    Explain(ExplainArgs),
}

/// All tunables with their defaults; a JSON config file may override any
/// subset, CLI flags take final precedence. Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelSection,
    teacher: TeacherSection,
    schedule: TrainSchedule,
    weights: LossWeights,
    adam: AdamConfig,
    seed: u64,
    max_sentence_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            teacher: TeacherSection::default(),
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 123,
            max_sentence_len: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    d_model: usize,
    d_style: usize,
    d_ff: usize,
    encoder_layers: usize,
    decoder_layers: usize,
    heads: usize,
    max_len: usize,
    decode_margin: usize,
    dropout: f64,
    fixed_style_vector: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 256,
            d_style: 256,
            d_ff: 512,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            max_len: 64,
            decode_margin: 4,
            dropout: 0.1,
            fixed_style_vector: false,
        }
    }
}

impl ModelSection {
    fn desk() -> Self {
        ModelSection {
            d_model: 32,
            d_style: 32,
            d_ff: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            max_len: 16,
            decode_margin: 4,
            dropout: 0.1,
            fixed_style_vector: false,
        }
    }

    fn to_model_cfg(self, vocab_size: usize, styles: usize) -> MssrNetConfig {
        MssrNetConfig {
            d_model: self.d_model,
            d_style: self.d_style,
            d_ff: self.d_ff,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            styles,
            vocab_size,
            max_len: self.max_len,
            decode_margin: self.decode_margin,
            dropout: self.dropout,
            fixed_style_vector: self.fixed_style_vector,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TeacherSection {
    layers: usize,
    d_model: usize,
    d_ff: usize,
    heads: usize,
    dropout: f64,
    max_steps: usize,
    batch_size: usize,
    lr: f64,
    eval_every: usize,
    early_stop_acc: Option<f64>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            layers: 3,
            d_model: 256,
            d_ff: 512,
            heads: 8,
            dropout: 0.1,
            max_steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            eval_every: 50,
            early_stop_acc: Some(0.998),
        }
    }
}

impl TeacherSection {
    fn desk() -> Self {
        TeacherSection {
            d_model: 32,
            d_ff: 64,
            heads: 4,
            ..Default::default()
        }
    }

    fn to_teacher_cfg(self, vocab_size: usize, styles: usize, max_len: usize) -> TeacherConfig {
        TeacherConfig {
            stack: StackConfig {
                layers: self.layers,
                d_model: self.d_model,
                d_ff: self.d_ff,
                heads: self.heads,
                dropout: self.dropout,
            },
            vocab_size,
            max_len,
            styles,
        }
    }

    fn to_options(self, seed: u64) -> TeacherTrainOptions {
        TeacherTrainOptions {
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            eval_every: self.eval_every,
            seed,
            early_stop_acc: self.early_stop_acc,
        }
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; unknown keys are rejected
    #[arg(long)]
    config: Option<PathBuf>,
    /// small-model preset that trains in minutes on a CPU
    #[arg(long)]
    desk: bool,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if self.desk {
            cfg.model = ModelSection::desk();
            cfg.teacher = TeacherSection::desk();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// number of styles (2..=4)
    #[arg(long, default_value_t = 2)]
    styles: usize,
    /// sentences generated per style
    #[arg(long, default_value_t = 2000)]
    per_style: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// output directory for style<k>.txt files
    #[arg(long)]
    out_dir: PathBuf,
    /// also write gold marker-swap references (refs-<s>to<t>.txt)
    #[arg(long)]
    emit_refs: bool,
}

#[derive(Args)]
struct TeacherTrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// directory holding style0.txt, style1.txt, …
    #[arg(long, required_unless_present = "tsv", conflicts_with = "tsv")]
    corpus_dir: Option<PathBuf>,
    /// number of style files to read from --corpus-dir
    #[arg(long, default_value_t = 2)]
    styles: usize,
    /// two-column input: label<TAB>sentence
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, required_unless_present = "tsv", conflicts_with = "tsv")]
    corpus_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    styles: usize,
    #[arg(long)]
    tsv: Option<PathBuf>,
    /// pretrained teacher checkpoint
    #[arg(long)]
    teacher: PathBuf,
    /// output directory (metrics.jsonl, step-<n>.ckpt, model.ckpt)
    #[arg(long)]
    out_dir: PathBuf,
    /// overrides schedule.iterations
    #[arg(long)]
    max_iterations: Option<usize>,
    /// resume from a training checkpoint (restores optimizer state and RNG)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// ablation: zero the teacher-student weights (λ_teach, λ_s_pol)
    #[arg(long)]
    no_teacher_student: bool,
    /// ablation: broadcast a single pooled style vector to every position
    #[arg(long)]
    fixed_style_vector: bool,
}

#[derive(Args)]
struct TransferArgs {
    /// trained model checkpoint (training checkpoint format)
    #[arg(long)]
    model: PathBuf,
    /// input file, one sentence per line
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target_style: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// transferred sentences, line-aligned with --source
    #[arg(long)]
    outputs: PathBuf,
    /// source sentences
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_style: usize,
    #[arg(long)]
    target_style: usize,
    /// style classifier checkpoint (trained on a held-out split)
    #[arg(long)]
    classifier: PathBuf,
    /// corpus file for fitting the 5-gram language model
    #[arg(long)]
    lm_corpus: PathBuf,
    /// teacher checkpoint for the stylistic-transfer-ratio statistic
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// gold references (enables r-BLEU)
    #[arg(long)]
    refs: Option<PathBuf>,
    /// JSON report output
    #[arg(long)]
    report: PathBuf,
    /// CSV export of per-sentence transfer ratios (violin-plot data)
    #[arg(long)]
    ratio_csv: Option<PathBuf>,
    /// TSV dump of content/style representations (needs --teacher and --model)
    #[arg(long, requires = "teacher", requires = "model")]
    dump_representations: Option<PathBuf>,
    /// trained model checkpoint, required for representation dumps
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// style label being explained
    #[arg(long)]
    label: usize,
    /// probability-drop threshold
    #[arg(long, default_value_t = 0.10)]
    beta: f64,
    /// interpret beta as a relative drop
    #[arg(long)]
    relative: bool,
    /// renormalize surviving pooling weights after zeroing a span
    #[arg(long)]
    renormalize: bool,
    /// JSON-lines report output
    #[arg(long)]
    out: PathBuf,
}

// ---- error/exit-code plumbing ----

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<teacher::TeacherError> for CliError {
    fn from(e: teacher::TeacherError) -> Self {
        match e {
            teacher::TeacherError::Optim(inner) => CliError::numeric(inner.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<training::TrainError> for CliError {
    fn from(e: training::TrainError) -> Self {
        match e {
            training::TrainError::NonFiniteLoss { .. } | training::TrainError::Optim(_) => {
                CliError::numeric(e.to_string())
            }
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<mssrnet_core::model::ModelError> for CliError {
    fn from(e: mssrnet_core::model::ModelError) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(args) => cmd_gen_synthetic(args),
        Command::TeacherTrain(args) => cmd_teacher_train(args),
        Command::Train(args) => cmd_train(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Explain(args) => cmd_explain(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Every command records the fully resolved parameters next to its outputs,
/// enough to replay the invocation.
fn write_sidecar(path: &Path, command: &str, resolved: serde_json::Value) -> Result<(), CliError> {
    let sidecar = serde_json::json!({
        "command": command,
        "resolved": resolved,
    });
    std::fs::write(path, serde_json::to_string_pretty(&sidecar).expect("serializable") + "\n")?;
    Ok(())
}

fn sidecar_path(base: &Path) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    base.with_file_name(name)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn load_corpus(
    corpus_dir: &Option<PathBuf>,
    styles: usize,
    tsv: &Option<PathBuf>,
    max_len: usize,
) -> Result<Corpus, CliError> {
    let (corpus, skipped) = match (corpus_dir, tsv) {
        (Some(dir), None) => data::read_style_files(dir, styles, max_len)?,
        (None, Some(path)) => data::read_tsv(path, max_len)?,
        _ => return Err(CliError::usage("pass exactly one of --corpus-dir or --tsv")),
    };
    if skipped > 0 {
        log::warn!("skipped {skipped} over-length sentences at ingestion");
    }
    Ok(corpus)
}

fn cmd_gen_synthetic(args: GenSyntheticArgs) -> Result<(), CliError> {
    let (corpus, refs) = data::gen_synthetic_with_references(args.styles, args.per_style, args.seed)?;
    data::write_style_files(&corpus, &args.out_dir)?;
    if args.emit_refs {
        for src in 0..args.styles {
            for tgt in 0..args.styles {
                if src == tgt {
                    continue;
                }
                let mut body = String::new();
                for (i, sent) in corpus.sentences.iter().enumerate() {
                    if sent.style == src {
                        body.push_str(&refs[i][tgt].join(" "));
                        body.push('\n');
                    }
                }
                std::fs::write(args.out_dir.join(format!("refs-{src}to{tgt}.txt")), body)?;
            }
        }
    }
    write_sidecar(
        &sidecar_path(&args.out_dir.join("corpus")),
        "gen-synthetic",
        serde_json::json!({
            "styles": args.styles,
            "per_style": args.per_style,
            "seed": args.seed,
            "emit_refs": args.emit_refs,
            "vocab_size": corpus.vocab.size(),
        }),
    )?;
    println!(
        "wrote {} sentences across {} style files to {}",
        corpus.len(),
        args.styles,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_teacher_train(args: TeacherTrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let corpus = load_corpus(&args.corpus_dir, args.styles, &args.tsv, cfg.max_sentence_len)?;
    if corpus.styles < 2 {
        return Err(CliError::data("teacher training needs at least two styles"));
    }
    let splits = corpus.split(&[0.9, 0.1]);
    let teacher_cfg = cfg
        .teacher
        .to_teacher_cfg(corpus.vocab.size(), corpus.styles, cfg.max_sentence_len);
    let opts = cfg.teacher.to_options(cfg.seed);
    let (teacher, report) = teacher::train_teacher::<f32>(&splits[0], &splits[1], teacher_cfg, &opts)?;
    checkpoint::save_teacher(&args.out, &teacher, &corpus.vocab)?;
    write_sidecar(
        &sidecar_path(&args.out),
        "teacher-train",
        serde_json::json!({
            "config": cfg,
            "styles": corpus.styles,
            "vocab_size": corpus.vocab.size(),
            "report": report,
        }),
    )?;
    println!(
        "teacher: best held-out accuracy {:.4} after {} steps -> {}",
        report.best_val_accuracy,
        report.steps_run,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.config.resolve()?;
    if args.no_teacher_student {
        cfg.weights.teach = 0.0;
        cfg.weights.s_pol = 0.0;
    }
    if args.fixed_style_vector {
        cfg.model.fixed_style_vector = true;
    }
    if let Some(n) = args.max_iterations {
        cfg.schedule.iterations = n;
    }
    cfg.schedule.seed = cfg.seed;
    let corpus = load_corpus(&args.corpus_dir, args.styles, &args.tsv, cfg.max_sentence_len)?;
    let splits = corpus.split(&[0.9, 0.1]);
    let (teacher, teacher_vocab) = checkpoint::load_teacher::<f32>(&args.teacher)?;
    if teacher_vocab.size() != corpus.vocab.size() {
        return Err(CliError::data(format!(
            "teacher vocabulary ({}) does not match the corpus ({}); retrain the teacher on this corpus",
            teacher_vocab.size(),
            corpus.vocab.size()
        )));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let setup = TrainSetup {
        train: &splits[0],
        validation: &splits[1],
        teacher: &teacher,
        model_cfg: cfg.model.to_model_cfg(corpus.vocab.size(), corpus.styles),
        schedule: cfg.schedule,
        weights: cfg.weights,
        adam: cfg.adam,
        out_dir: Some(args.out_dir.clone()),
    };
    let outcome = match &args.resume {
        Some(path) => {
            let loaded = checkpoint::load_training_checkpoint::<f32>(path)?;
            training::resume_training(loaded, setup)?
        }
        None => training::run_training(setup)?,
    };
    // persist the final model as a training checkpoint for transfer/resume
    let final_path = args.out_dir.join("model.ckpt");
    {
        let setup2 = TrainSetup {
            train: &splits[0],
            validation: &splits[1],
            teacher: &teacher,
            model_cfg: outcome.model.cfg,
            schedule: cfg.schedule,
            weights: cfg.weights,
            adam: cfg.adam,
            out_dir: None,
        };
        let mut trainer = training::Trainer::new(&setup2)?;
        trainer.model.store.restore(&outcome.model.store.snapshot());
        trainer.style_critic.store.restore(&outcome.style_critic.store.snapshot());
        trainer.text_critic.store.restore(&outcome.text_critic.store.snapshot());
        trainer.iteration = outcome.iterations_run;
        trainer.counters = outcome.counters;
        checkpoint::save_training_checkpoint(&final_path, &trainer, &setup2)?;
    }
    write_sidecar(
        &sidecar_path(&final_path),
        "train",
        serde_json::json!({
            "config": cfg,
            "no_teacher_student": args.no_teacher_student,
            "fixed_style_vector": args.fixed_style_vector,
            "resumed_from": args.resume,
            "counters": outcome.counters,
            "best_validation": outcome.best_validation,
        }),
    )?;
    // rolling gain-gap statistics next to the raw metrics log
    let gap_series = training::gain_gap_series(&outcome.gain_gaps, 25);
    for (critic, stats) in &gap_series {
        let mut csv = String::from("index,rolling_mean,rolling_variance\n");
        for s in stats {
            csv.push_str(&format!("{},{},{}\n", s.index, s.mean, s.variance));
        }
        let name = format!("gain-gap-{:?}.csv", critic).to_lowercase();
        std::fs::write(args.out_dir.join(name), csv)?;
    }
    println!(
        "trained {} iterations (rc/dr/adr batches: {}/{}/{}), model -> {}",
        outcome.iterations_run,
        outcome.counters.reconstruction_batches,
        outcome.counters.critic_batches,
        outcome.counters.adversarial_batches,
        final_path.display()
    );
    if let Some(best) = outcome.best_validation {
        println!(
            "best validation: iteration {} accuracy {:.3} self-BLEU {:.1}",
            best.iteration, best.accuracy, best.self_bleu
        );
    }
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let loaded = checkpoint::load_training_checkpoint::<f32>(&args.model)?;
    if args.target_style >= loaded.model.cfg.styles {
        return Err(CliError::usage(format!(
            "target style {} out of range (model has {} styles)",
            args.target_style, loaded.model.cfg.styles
        )));
    }
    let lines = read_lines(&args.input)?;
    let mut out = String::new();
    for line in &lines {
        let ids = loaded.vocab.encode(line);
        if ids.is_empty() {
            out.push('\n');
            continue;
        }
        let transferred = loaded.model.transfer(&ids, args.target_style)?;
        out.push_str(&loaded.vocab.decode(&transferred));
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    write_sidecar(
        &sidecar_path(&args.out),
        "transfer",
        serde_json::json!({
            "model": args.model,
            "input": args.input,
            "target_style": args.target_style,
            "lines": lines.len(),
        }),
    )?;
    println!("transferred {} lines -> {}", lines.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (classifier, vocab) = checkpoint::load_teacher::<f32>(&args.classifier)?;
    let source_lines = read_lines(&args.source)?;
    let output_lines = read_lines(&args.outputs)?;
    if source_lines.len() != output_lines.len() {
        return Err(CliError::data(format!(
            "source has {} lines but outputs has {}",
            source_lines.len(),
            output_lines.len()
        )));
    }
    let pairs: Vec<(Vec<usize>, usize, Vec<usize>, usize)> = source_lines
        .iter()
        .zip(output_lines.iter())
        .map(|(s, o)| {
            (
                vocab.encode(s),
                args.source_style,
                vocab.encode(o),
                args.target_style,
            )
        })
        .collect();
    let lm_lines = read_lines(&args.lm_corpus)?;
    let lm = metrics::NGramLM::train(&metrics::tokenize_lines(&lm_lines), 5, 0.75)?;
    let gold = match &args.refs {
        Some(path) => {
            let lines = read_lines(path)?;
            if lines.len() != pairs.len() {
                return Err(CliError::data(format!(
                    "refs has {} lines but outputs has {}",
                    lines.len(),
                    pairs.len()
                )));
            }
            Some(metrics::tokenize_lines(&lines))
        }
        None => None,
    };
    let teacher_loaded = match &args.teacher {
        Some(path) => Some(checkpoint::load_teacher::<f32>(path)?),
        None => None,
    };
    let salience = teacher_loaded
        .as_ref()
        .map(|(t, _)| (t, SalienceConfig::default()));
    let inputs = metrics::EvalInputs {
        pairs: &pairs,
        classifier: &classifier,
        lm: &lm,
        vocab: &vocab,
        gold_references: gold.as_deref(),
        salience,
    };
    let report = metrics::evaluate(&inputs)?;
    std::fs::write(
        &args.report,
        serde_json::to_string_pretty(&report).expect("serializable") + "\n",
    )?;
    if let Some(csv_path) = &args.ratio_csv {
        if let Some((teacher, cfg)) = &salience {
            let triples: Vec<(Vec<usize>, usize, Vec<usize>)> = pairs
                .iter()
                .map(|(s, st, o, _)| (s.clone(), *st, o.clone()))
                .collect();
            let ratio = metrics::stylistic_transfer_ratio(&triples, *teacher, cfg, &vocab);
            let mut csv = String::from("sentence_id,ratio\n");
            for (i, r) in ratio.per_sentence.iter().enumerate() {
                if let Some(r) = r {
                    csv.push_str(&format!("{i},{r}\n"));
                }
            }
            std::fs::write(csv_path, csv)?;
        } else {
            return Err(CliError::usage("--ratio-csv needs --teacher for span selection"));
        }
    }
    if let Some(dump_path) = &args.dump_representations {
        let model_path = args.model.as_ref().expect("clap requires --model");
        let loaded = checkpoint::load_training_checkpoint::<f32>(model_path)?;
        let (teacher, _) = teacher_loaded.as_ref().expect("clap requires --teacher");
        let sentences: Vec<mssrnet_core::TokenSequence> = pairs
            .iter()
            .map(|(src, style, _, _)| mssrnet_core::TokenSequence {
                ids: src.clone(),
                style: *style,
            })
            .collect();
        let rows = metrics::dump_representations(&loaded.model, teacher, &sentences, dump_path)?;
        log::info!("dumped {rows} representation rows to {}", dump_path.display());
    }
    write_sidecar(
        &sidecar_path(&args.report),
        "evaluate",
        serde_json::json!({
            "outputs": args.outputs,
            "source": args.source,
            "source_style": args.source_style,
            "target_style": args.target_style,
            "classifier": args.classifier,
            "lm_corpus": args.lm_corpus,
            "refs": args.refs,
            "report": report,
        }),
    )?;
    println!(
        "accuracy {:.4}  self-BLEU {:.2}  PPL {:.2}{}",
        report.accuracy,
        report.bleu,
        report.perplexity,
        report
            .r_bleu
            .map(|r| format!("  r-BLEU {r:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<(), CliError> {
    let (teacher, vocab) = checkpoint::load_teacher::<f32>(&args.teacher)?;
    if args.label >= teacher.cfg.styles {
        return Err(CliError::usage(format!(
            "label {} out of range (teacher has {} styles)",
            args.label, teacher.cfg.styles
        )));
    }
    if !(0.0 < args.beta && args.beta < 1.0) {
        return Err(CliError::usage("beta must lie in (0, 1)"));
    }
    let cfg = SalienceConfig {
        beta: args.beta,
        relative: args.relative,
        renormalize: args.renormalize,
        ..Default::default()
    };
    let lines = read_lines(&args.input)?;
    let mut out = String::new();
    for line in &lines {
        let ids = vocab.encode(line);
        if ids.is_empty() {
            continue;
        }
        let result = teacher.select_stylistic_tokens(&ids, args.label, &cfg, &vocab);
        let record = serde_json::json!({
            "sentence": line,
            "label": args.label,
            "original_prob": result.original_prob,
            "low_confidence": result.low_confidence,
            "spans": result.spans,
        });
        out.push_str(&serde_json::to_string(&record).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    write_sidecar(
        &sidecar_path(&args.out),
        "explain",
        serde_json::json!({
            "teacher": args.teacher,
            "input": args.input,
            "label": args.label,
            "beta": args.beta,
            "relative": args.relative,
            "renormalize": args.renormalize,
        }),
    )?;
    println!("explained {} lines -> {}", lines.len(), args.out.display());
    Ok(())
}

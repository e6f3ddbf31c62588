use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::rc::Rc;

use clap::{Args, Parser, Subcommand};
use jmie_core::corpus::{
    generate_synthetic_corpus, inject_concept_noise, load_corpus, write_corpus, CorpusStats, Document, SynthSpec,
};
use jmie_core::encoder::{load_word_vectors, PrecomputedEmbeddings};
use jmie_core::evaluation::{average_reports, compare, evaluate, EvalReport, Protocol};
use jmie_core::pipeline::GoldInjection;
use jmie_core::trainer::{read_config_file, train, Resources, RunRecord, TrainConfig, TrainedModel};
use jmie_core::{CorpusError, EncoderError, EvalError, ModelError, TrainError};

#[derive(Parser)]
#[command(name = "jmie", version, about = "Joint concept, assertion and relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and run records.
    Train(TrainArgs),
    /// Annotate documents with a trained model.
    Predict(PredictArgs),
    /// Score predictions against reference annotations.
    Evaluate(EvaluateArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Print corpus statistics.
    Inspect(InspectArgs),
    /// Read a corpus and write it back in the flat layout.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Scored after training with the best checkpoint.
    #[arg(long)]
    test_dir: Option<PathBuf>,
    /// GloVe text file or JEMB1 file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// lstm, precomputed or precomputed+lstm.
    #[arg(long)]
    encoder: Option<String>,
    /// joint or pipeline.
    #[arg(long)]
    arch: Option<String>,
    /// softmax or sigmoid.
    #[arg(long)]
    relation_mode: Option<String>,
    /// One seed, or a comma-separated list for a multi-seed average.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    dev_fraction: Option<String>,
    #[arg(long)]
    unsafe_hparams: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Documents to annotate. Their own annotations are only read with
    /// `--inject-gold`.
    #[arg(long)]
    input: PathBuf,
    /// Needed for models trained on precomputed embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Feed reference annotations into the later stages: concept or assertion.
    #[arg(long)]
    inject_gold: Option<String>,
    /// Also write per-sentence tag and relation scores as JSON lines.
    #[arg(long)]
    debug_scores: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "compare")]
    gold: Option<PathBuf>,
    #[arg(long, required_unless_present = "compare")]
    pred: Option<PathBuf>,
    /// joint or independent; only labels the report.
    #[arg(long, default_value = "joint")]
    protocol: String,
    /// Print F1 deltas `a - b` of two report files.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["gold", "pred"])]
    compare: Option<Vec<PathBuf>>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    sentences: usize,
    #[arg(long, default_value_t = 5)]
    sentences_per_doc: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Fraction of concepts relabelled to another type.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    corpus: PathBuf,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Train(TrainError::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(io_at(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_at(path))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("JMIE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Convert(a) => cmd_convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Options of `train` after merging the config file and flags.
struct TrainPlan {
    config: TrainConfig,
    train_dir: PathBuf,
    test_dir: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    seeds: Vec<u64>,
    jobs: usize,
    out: PathBuf,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| usage(format!("bad seed list `{s}`"))))
        .collect()
}

fn plan_train(a: TrainArgs) -> Result<TrainPlan> {
    let mut config = TrainConfig::default();
    let (mut train_dir, mut test_dir, mut embeddings, mut out) = (None, None, None, None);
    let mut seeds = None;
    let mut jobs = 1;
    let mut apply = |config: &mut TrainConfig, key: &str, value: &str| -> Result<()> {
        if config.set(key, value)? {
            if key == "seed" {
                seeds = None;
            }
            return Ok(());
        }
        match key.replace('-', "_").as_str() {
            "train_dir" => train_dir = Some(PathBuf::from(value)),
            "test_dir" => test_dir = Some(PathBuf::from(value)),
            "embeddings" => embeddings = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            "seeds" => seeds = Some(parse_seeds(value)?),
            "jobs" => jobs = value.parse().map_err(|_| usage(format!("bad value `{value}` for `jobs`")))?,
            _ => return Err(usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        for (k, v) in read_config_file(&text)? {
            apply(&mut config, &k, &v)?;
        }
    }
    let flags = [
        ("encoder", a.encoder),
        ("arch", a.arch),
        ("relation_mode", a.relation_mode),
        ("lr", a.lr),
        ("batch", a.batch),
        ("hidden", a.hidden),
        ("epochs", a.epochs),
        ("patience", a.patience),
        ("dev_fraction", a.dev_fraction),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(&mut config, k, &v)?;
        }
    }
    if let Some(s) = &a.seed {
        apply(&mut config, "seeds", s)?;
    }
    for (k, v) in [("train_dir", &a.train_dir), ("test_dir", &a.test_dir), ("embeddings", &a.embeddings), ("out", &a.out)] {
        if let Some(v) = v {
            apply(&mut config, k, &v.to_string_lossy())?;
        }
    }
    if let Some(j) = a.jobs {
        jobs = j;
    }
    if a.unsafe_hparams {
        config.unsafe_hparams = true;
    }
    let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
    if seeds.is_empty() {
        return Err(usage("need at least one seed"));
    }
    config.seed = seeds[0];
    config.validate()?;
    Ok(TrainPlan {
        config,
        train_dir: train_dir.ok_or_else(|| usage("--train-dir is required"))?,
        test_dir,
        embeddings,
        seeds,
        jobs,
        out: out.ok_or_else(|| usage("--out is required"))?,
    })
}

fn is_jemb(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 5];
    let mut f = File::open(path).map_err(io_at(path))?;
    let n = f.read(&mut magic).map_err(io_at(path))?;
    Ok(n == 5 && &magic == b"JEMB1")
}

fn load_resources(config: &TrainConfig, path: Option<&Path>) -> Result<Resources> {
    let mode = config.model.encoder.mode;
    let Some(path) = path else {
        if mode.uses_precomputed() {
            return Err(usage(format!("encoder `{mode}` needs --embeddings with a JEMB1 file")));
        }
        return Ok(Resources::default());
    };
    let jemb = is_jemb(path)?;
    if jemb != mode.uses_precomputed() {
        return Err(usage(format!(
            "encoder `{mode}` cannot use {} (expected a {} file)",
            path.display(),
            if mode.uses_precomputed() { "JEMB1" } else { "GloVe text" }
        )));
    }
    Ok(if jemb {
        Resources {
            precomputed: Some(Rc::new(PrecomputedEmbeddings::load(path)?)),
            ..Resources::default()
        }
    } else {
        Resources {
            word_vectors: Some(load_word_vectors(path)?),
            ..Resources::default()
        }
    })
}

fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_at(path))?);
    for r in records {
        let line = serde_json::to_string(r).expect("plain data serializes");
        writeln!(w, "{line}").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("report.json"), &to_json(report))?;
    write_file(&dir.join("report.txt"), &report.table())
}

fn score_test(model: &TrainedModel, test: &[Document]) -> Result<EvalReport> {
    let inputs: Vec<Document> = test.iter().map(Document::unannotated).collect();
    let pred = model.predict(&inputs, GoldInjection::None, |_, _, _| {})?;
    Ok(evaluate(&pred, test, Protocol::Joint)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let plan = plan_train(a)?;
    let corpus = load_corpus(&plan.train_dir, plan.jobs)?;
    let test = plan.test_dir.as_deref().map(|d| load_corpus(d, plan.jobs)).transpose()?;
    let resources = load_resources(&plan.config, plan.embeddings.as_deref())?;
    create_dir(&plan.out)?;
    let multi = plan.seeds.len() > 1;
    let mut reports = Vec::new();
    for &seed in &plan.seeds {
        let cfg = TrainConfig {
            seed,
            ..plan.config.clone()
        };
        let dir = if multi { plan.out.join(format!("seed-{seed}")) } else { plan.out.clone() };
        let (model, used, records) = train(&corpus, &cfg, &resources)?;
        model.save(&dir, &used)?;
        write_records(&dir.join("runs.jsonl"), &records)?;
        for r in &records {
            println!(
                "seed {seed} {}: best dev {:.4} at epoch {} of {} ({:.1}s)",
                r.stage,
                r.best_dev_score,
                r.best_epoch,
                r.epochs.len(),
                r.wall_seconds
            );
        }
        if let Some(test) = &test {
            let report = score_test(&model, test)?;
            write_report(&dir, &report)?;
            reports.push(report);
        }
    }
    if let Some(mean) = average_reports(&reports) {
        if multi {
            write_report(&plan.out, &mean)?;
        }
        print!("{}", mean.table());
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let inject = match a.inject_gold.as_deref() {
        None => GoldInjection::None,
        Some(s) => s.parse().map_err(usage)?,
    };
    let manifest_cfg = {
        let path = a.model.join("model.json");
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|source| CliError::Json { path, source })?;
        serde_json::from_value::<TrainConfig>(v["config"].clone()).map_err(|source| CliError::Json {
            path: a.model.join("model.json"),
            source,
        })?
    };
    let resources = if manifest_cfg.model.encoder.mode.uses_precomputed() {
        load_resources(&manifest_cfg, a.embeddings.as_deref())?
    } else {
        Resources::default()
    };
    let (model, _) = TrainedModel::load(&a.model, &resources)?;
    let docs = load_corpus(&a.input, a.jobs)?;
    let inputs: Vec<Document> = match inject {
        GoldInjection::None => docs.iter().map(Document::unannotated).collect(),
        _ => docs,
    };
    if let Some(p) = &resources.precomputed {
        p.check_against(&inputs)?;
    }
    create_dir(&a.out)?;
    let mut debug = Vec::new();
    let pred = model.predict(&inputs, inject, |doc, sent, p| {
        if a.debug_scores {
            let rows = |t: &jmie_autodiff::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
            debug.push(serde_json::json!({
                "doc": doc.id,
                "sentence": sent,
                "tokens": doc.sentences[sent],
                "tags": p.tags.0.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                "tag_scores": rows(&p.emissions),
                "relation_scores": rows(&p.relation_scores),
            }));
        }
    })?;
    write_corpus(&a.out, &pred)?;
    if a.debug_scores {
        let body: String = debug.iter().map(|v| format!("{v}\n")).collect();
        write_file(&a.out.join("debug_scores.jsonl"), &body)?;
    }
    println!("annotated {} documents into {}", pred.len(), a.out.display());
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    if let Some(files) = &a.compare {
        let (x, y) = (read_report(&files[0])?, read_report(&files[1])?);
        print!("{}", compare(&x, &y));
        return Ok(());
    }
    let protocol: Protocol = a.protocol.parse().map_err(usage)?;
    let gold = load_corpus(a.gold.as_deref().expect("required by clap"), a.jobs)?;
    let pred = load_corpus(a.pred.as_deref().expect("required by clap"), a.jobs)?;
    let report = evaluate(&pred, &gold, protocol)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_report(out, &report)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(usage("--noise must lie in [0, 1]"));
    }
    let spec = SynthSpec {
        sentences: a.sentences,
        sentences_per_doc: a.sentences_per_doc,
        ..SynthSpec::default()
    };
    let mut docs = generate_synthetic_corpus(&spec, a.seed).map_err(|e| match e {
        CorpusError::InvalidSpec(m) => usage(m),
        other => other.into(),
    })?;
    if a.noise > 0.0 {
        docs = inject_concept_noise(&docs, a.noise, a.seed.wrapping_add(1));
    }
    write_corpus(&a.out, &docs)?;
    println!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let docs = load_corpus(&a.corpus, a.jobs)?;
    let s = CorpusStats::of(&docs);
    if a.json {
        println!("{}", to_json(&s));
    } else {
        println!("{:<10} {:>10} {:>10} {:>10}", "documents", "concepts", "assertions", "relations");
        println!("{:<10} {:>10} {:>10} {:>10}", s.documents, s.concepts, s.assertions, s.relations);
    }
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let docs = load_corpus(&a.input, a.jobs)?;
    write_corpus(&a.out, &docs)?;
    println!("converted {} documents", docs.len());
    Ok(())
}

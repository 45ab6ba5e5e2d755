use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use msved::analysis::{
    attention_records, example_pairs, exact_match_accuracy, export_latents, pseudo_lemma_grouping, scaling_harness,
    write_attention_jsonl, write_latents_tsv, write_predictions_tsv, write_scaling_tsv,
};
use msved::corpus::{load_unlabeled, parse_label_string, parse_task3, write_task3, LabeledExample, UnlabeledWord};
use msved::objectives::Mode;
use msved::toy::{generate, ToyConfig};
use msved::trainer::{encode_examples, predict, Checkpoint, Dataset, EncodedExample, Trainer, TrainingConfig};

#[derive(Parser)]
#[command(name = "msved", version, about = "Train and apply multi-space variational encoder-decoders for reinflection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, metrics.jsonl and resolved_config.json under --out.
    Train(TrainArgs),
    /// Exact-match accuracy of a checkpoint (or a predictions file) on labeled data.
    Evaluate(EvaluateArgs),
    /// Reinflect every (source, labels) line of a TSV file.
    Infer(InferArgs),
    /// Write posterior-mean latent vectors of pseudo-lemma-grouped words.
    ExportLatents(ExportArgs),
    /// Train one model per unlabeled-prefix size and tabulate accuracy.
    Scale(ScaleArgs),
    /// Write the generated toy language as train/dev/test/unlabeled files.
    ToyData(ToyArgs),
}

#[derive(Args)]
struct Settings {
    /// Config file: a JSON object or key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Beam width used for dev selection and decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Settings {
    fn resolve(&self, mode: Option<Mode>) -> anyhow::Result<TrainingConfig> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let mut overrides = Vec::new();
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(m) = mode {
            overrides.push(("mode".into(), m.name().into()));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(b) = self.beam {
            overrides.push(("beam_size".into(), b.to_string()));
        }
        Ok(TrainingConfig::resolve(text.as_deref(), &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// One word per line.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    limit_unlabeled: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Labeled file with gold targets.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// TSV whose last column holds predictions, one line per gold line.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    /// Also write a per-example TSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSV of source word and label string; further columns are ignored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// JSON lines of per-step attention weights over tag categories.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled file whose source/target pairs define the pseudo-lemmas.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    limit_unlabeled: Option<usize>,
    /// Comma-separated unlabeled prefix sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 10000, 20000, 30000])]
    sizes: Vec<usize>,
    /// Output TSV table.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ToyConfig::default().seed)]
    seed: u64,
}

/// Failures that are the caller's fault exit with 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MSVED_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Infer(a) => infer(a),
        Command::ExportLatents(a) => export(a),
        Command::Scale(a) => scale(a),
        Command::ToyData(a) => toy_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_labeled(path: &Path) -> anyhow::Result<Vec<LabeledExample>> {
    parse_task3(path).with_context(|| format!("in {}", path.display()))
}

fn read_unlabeled(path: &Path, limit: Option<usize>) -> anyhow::Result<Vec<UnlabeledWord>> {
    load_unlabeled(path, limit.unwrap_or(usize::MAX)).with_context(|| format!("in {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.settings.resolve(a.mode)?;
    if config.mode.uses_unlabeled() && a.unlabeled.is_none() {
        bail!(Usage(format!("--mode {} needs --unlabeled", config.mode)));
    }
    let train_set = read_labeled(&a.train)?;
    let dev = read_labeled(&a.dev)?;
    let unlabeled = match (&a.unlabeled, config.mode.uses_unlabeled()) {
        (Some(p), true) => read_unlabeled(p, a.limit_unlabeled)?,
        _ => Vec::new(),
    };
    let data = Dataset::build(&train_set, &dev, &unlabeled)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt_path = a.out.join("checkpoint");
    let metrics_path = a.out.join("metrics.jsonl");

    let mut trainer = if a.resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        if ckpt.header.training != config {
            bail!(Usage("resolved configuration differs from the checkpoint's".into()));
        }
        Trainer::resume(ckpt, &data)?
    } else {
        Trainer::new(config.clone(), &data)?
    };
    let resolved = serde_json::to_vec_pretty(trainer.config())?;
    write_file(&a.out.join("resolved_config.json"), &resolved)?;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;

    // Metrics reach the file only once the matching checkpoint is on disk.
    let mut pending = Vec::new();
    while !trainer.is_finished() {
        let epoch = trainer.run_epoch(&mut pending)?;
        trainer.checkpoint().save(&ckpt_path)?;
        metrics
            .write_all(&pending)
            .with_context(|| format!("writing {}", metrics_path.display()))?;
        pending.clear();
        eprintln!(
            "epoch {} dev accuracy {:.4} (best {:.4})",
            epoch.epoch, epoch.dev_accuracy, epoch.best_dev_accuracy
        );
    }
    Ok(())
}

/// Source and label columns of an inference input file.
fn read_queries(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next()) {
            (Some(s), Some(l)) if !s.trim().is_empty() => out.push((s.trim().to_string(), l.trim().to_string())),
            _ => bail!("{}:{}: expected source and labels separated by a tab", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn decode_strings(ckpt: &Checkpoint, examples: &[EncodedExample], beam: usize) -> anyhow::Result<Vec<msved::search::Reinflection>> {
    let factor = ckpt.header.training.max_decode_factor;
    Ok(predict(ckpt.inference_params(), examples, beam, factor)?)
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let h = &ckpt.header;
    let queries = read_queries(&a.input)?;
    let mut examples = Vec::with_capacity(queries.len());
    for (i, (source, labels)) in queries.iter().enumerate() {
        let pairs = parse_label_string(labels).map_err(|m| anyhow::anyhow!("{}:{}: {m}", a.input.display(), i + 1))?;
        let labels = h
            .schema
            .label_vector(&pairs)
            .with_context(|| format!("{}:{}", a.input.display(), i + 1))?;
        examples.push(EncodedExample {
            source: h.vocab.encode(&msved::corpus::normalize(source)),
            target: Vec::new(),
            labels,
        });
    }
    let beam = a.beam.unwrap_or(h.training.beam_size);
    let preds = decode_strings(&ckpt, &examples, beam)?;
    let mut out = String::new();
    for ((source, labels), p) in queries.iter().zip(&preds) {
        out.push_str(&format!("{source}\t{labels}\t{}\n", h.vocab.decode(&p.symbols)));
    }
    write_file(&a.out, out.as_bytes())?;
    if let Some(path) = &a.dump_attention {
        let names: Vec<String> = h.schema.categories.iter().map(|c| c.name.clone()).collect();
        let mut buf = Vec::new();
        write_attention_jsonl(&mut buf, &attention_records(&names, &preds))?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let gold = read_labeled(&a.test)?;
    let predictions: Vec<String> = if let Some(path) = &a.predictions {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.rsplit('\t').next().unwrap_or("").trim().to_string())
            .collect()
    } else {
        let ckpt = load_checkpoint(a.checkpoint.as_deref().expect("clap requires one source"))?;
        let h = &ckpt.header;
        let examples = encode_examples(&h.schema, &h.vocab, &gold)?;
        let preds = decode_strings(&ckpt, &examples, a.beam.unwrap_or(h.training.beam_size))?;
        preds.iter().map(|p| h.vocab.decode(&p.symbols)).collect()
    };
    let targets: Vec<&str> = gold.iter().map(|e| e.target.as_str()).collect();
    let acc = exact_match_accuracy(&predictions, &targets)?;
    if let Some(path) = &a.out {
        let mut buf = Vec::new();
        write_predictions_tsv(&mut buf, &gold, &predictions)?;
        write_file(path, &buf)?;
    }
    println!("{acc:.4}");
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let examples = read_labeled(&a.train)?;
    let groups = pseudo_lemma_grouping(&example_pairs(&examples));
    let rows = export_latents(ckpt.inference_params(), &ckpt.header.vocab, &groups)?;
    let mut buf = Vec::new();
    write_latents_tsv(&mut buf, &rows)?;
    write_file(&a.out, &buf)
}

fn scale(a: ScaleArgs) -> anyhow::Result<()> {
    let config = a.settings.resolve(Some(Mode::SemiSup))?;
    let train_set = read_labeled(&a.train)?;
    let dev = read_labeled(&a.dev)?;
    let test = read_labeled(&a.test)?;
    let unlabeled = read_unlabeled(&a.unlabeled, a.limit_unlabeled)?;
    let rows = scaling_harness(&config, &train_set, &dev, &test, &unlabeled, &a.sizes, |run| {
        eprintln!("size {} test accuracy {:.4}", run.row.size, run.row.test_accuracy);
        Ok(())
    })?;
    let mut buf = Vec::new();
    write_scaling_tsv(&mut buf, &rows)?;
    write_file(&a.out, &buf)
}

fn toy_data(a: ToyArgs) -> anyhow::Result<()> {
    let corpus = generate(&ToyConfig {
        seed: a.seed,
        ..ToyConfig::default()
    });
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("train.tsv"), write_task3(&corpus.train).as_bytes())?;
    write_file(&a.out.join("dev.tsv"), write_task3(&corpus.dev).as_bytes())?;
    write_file(&a.out.join("test.tsv"), write_task3(&corpus.test).as_bytes())?;
    let mut words = corpus.unlabeled.join("\n");
    words.push('\n');
    write_file(&a.out.join("unlabeled.txt"), words.as_bytes())
}

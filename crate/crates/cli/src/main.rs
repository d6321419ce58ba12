use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pktrank::container::{self, ContainerError, CompressedContainer, CONTAINER_MAGIC};
use pktrank::ingest::{self, load_corpus, save_corpus, split_corpus, CorpusFormat, CorpusSplit, IngestError};
use pktrank::metrics::{self, Baseline, BenchOptions, MetricsError};
use pktrank::model::{load_model, read_model, save_model, ModelConfig, ModelError, MODEL_MAGIC};
use pktrank::synth::{generate, CorpusKind};
use pktrank::train::{train_with_progress, write_loss_sidecar, Optimizer, TrainConfig, TrainError};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "pktrank", version, about = "Lossless packet compression with a byte-level Transformer")]
struct Cli {
    /// Worker threads for frame-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a packet corpus.
    Train(TrainArgs),
    /// Compress a corpus into a container.
    Compress(CompressArgs),
    /// Restore a corpus from a container.
    Decompress(DecompressArgs),
    /// Compare the model pipeline against plain zlib on held-out groups.
    Bench(BenchArgs),
    /// Write a deterministic synthetic corpus.
    GenCorpus(GenArgs),
    /// Print the header of a container or model file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Auto,
    Separated,
    Rpkt,
    Pcap,
}

impl FormatArg {
    fn resolve(self) -> Option<CorpusFormat> {
        match self {
            FormatArg::Auto => None,
            FormatArg::Separated => Some(CorpusFormat::Separated),
            FormatArg::Rpkt => Some(CorpusFormat::LengthPrefixed),
            FormatArg::Pcap => Some(CorpusFormat::Pcap),
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// 0.5M, 5M, 55M, 103M or custom.
    #[arg(long, default_value = "0.5M")]
    preset: String,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// FFN width for custom models (default 4 × d_model).
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = pktrank::DEFAULT_CONTEXT)]
    context: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Defaults to the preset's batch size (256 for custom).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
    /// Loss sidecar (default: <out>.loss.tsv).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = container::DEFAULT_LEVEL, value_parser = clap::value_parser!(u32).range(0..=9))]
    level: u32,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
}

#[derive(Args, Serialize)]
struct DecompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "rpkt")]
    format: FormatArg,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2560)]
    test_count: usize,
    /// Use every packet for testing instead of drawing --test-count.
    #[arg(long)]
    all_test: bool,
    #[arg(long, default_value_t = 256)]
    group_size: usize,
    /// Split the test set into this many groups (overrides --group-size).
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = container::DEFAULT_LEVEL, value_parser = clap::value_parser!(u32).range(0..=9))]
    level: u32,
    #[arg(long, default_value_t = 5)]
    timing_runs: usize,
    #[arg(long, value_enum, default_value = "auto")]
    format: FormatArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[arg(long, value_parser = parse_kind)]
    #[serde(serialize_with = "kind_name")]
    kind: CorpusKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "rpkt")]
    format: FormatArg,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<CorpusKind, String> {
    s.parse()
}

fn kind_name<S: serde::Serializer>(k: &CorpusKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

#[derive(Args, Serialize)]
struct InspectArgs {
    path: PathBuf,
    /// Also write the header JSON here (and a manifest beside it).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Ingest(IngestError),
    Model(ModelError),
    Container(ContainerError),
    Train(TrainError),
    Metrics(MetricsError),
    Io(String, std::io::Error),
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Ingest(e)
    }
}
impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}
impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Container(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Container(c) => CliError::Container(c),
            other => CliError::Metrics(other),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Ingest(e) => write!(f, "{e}"),
            CliError::Model(e) => write!(f, "{e}"),
            CliError::Container(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Metrics(e) => write!(f, "{e}"),
            CliError::Io(path, e) => write!(f, "{path}: {e}"),
        }
    }
}

impl CliError {
    /// 0 ok, 2 usage/input, 3 fingerprint, 4 corruption, 1 other.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Ingest(_) | CliError::Io(..) => 2,
            CliError::Model(e) => model_code(e),
            CliError::Container(ContainerError::FingerprintMismatch { .. }) => 3,
            CliError::Container(ContainerError::Model(e)) => model_code(e),
            CliError::Container(e) if e.is_corruption() => 4,
            CliError::Container(_) => 1,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::EmptyCorpus) => 2,
            CliError::Train(TrainError::Model(e)) => model_code(e),
            CliError::Train(_) => 1,
            CliError::Metrics(MetricsError::EmptyStream | MetricsError::ZeroOriginal) => 2,
            CliError::Metrics(_) => 1,
        }
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::FingerprintMismatch(_) => 3,
        ModelError::BadMagic | ModelError::UnsupportedVersion(_) | ModelError::NonFinite(_) => 4,
        ModelError::Io(_) | ModelError::InvalidConfig(_) => 2,
        _ => 1,
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    argv: Vec<String>,
    flags: Value,
    workers: usize,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    model_fingerprint: Option<String>,
    tool_version: &'static str,
}

impl RunManifest {
    fn new(command: &'static str, flags: &impl Serialize, workers: usize) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            flags: serde_json::to_value(flags).expect("flags serialize"),
            workers,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            model_fingerprint: None,
            tool_version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_file(path, text.as_bytes())
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(show(path), e))
}

fn model_config(a: &TrainArgs) -> Result<(ModelConfig, usize), CliError> {
    if a.preset.eq_ignore_ascii_case("custom") {
        let (Some(h), Some(l), Some(d)) = (a.heads, a.layers, a.d_model) else {
            return Err(CliError::Usage("--preset custom requires --heads, --layers and --d-model".into()));
        };
        let cfg = ModelConfig::custom(h, l, d, a.d_ff).with_context(a.context);
        return Ok((cfg, 256));
    }
    if a.heads.is_some() || a.layers.is_some() || a.d_model.is_some() || a.d_ff.is_some() {
        return Err(CliError::Usage("--heads/--layers/--d-model/--d-ff only apply to --preset custom".into()));
    }
    let cfg = ModelConfig::preset(&a.preset)
        .ok_or_else(|| CliError::Usage(format!("unknown preset {:?} (0.5M, 5M, 55M, 103M, custom)", a.preset)))?;
    let batch = ModelConfig::preset_batch_size(&a.preset).expect("preset exists");
    Ok((cfg.with_context(a.context), batch))
}

fn cmd_train(a: &TrainArgs, workers: usize) -> Result<(), CliError> {
    let (model_cfg, preset_batch) = model_config(a)?;
    model_cfg.validate()?;
    let corpus = load_corpus(&a.corpus, a.format.resolve())?;
    let cfg = TrainConfig {
        batch_size: a.batch_size.unwrap_or(preset_batch),
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        ..TrainConfig::default()
    };
    eprintln!(
        "training {} ({} params) on {} packets, {} epochs, batch {}",
        model_cfg.preset_name,
        model_cfg.param_count(),
        corpus.len(),
        cfg.epochs,
        cfg.batch_size
    );
    let (params, report) =
        train_with_progress(&corpus, &model_cfg, &cfg, |e, l| eprintln!("epoch {e}\tloss {l:.6}"))?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.tsv"));
    save_model(&params, &a.out).map_err(|e| match e {
        ModelError::Io(io) => CliError::Io(show(&a.out), io),
        other => other.into(),
    })?;
    write_loss_sidecar(&report, &metrics_path).map_err(|e| match e {
        TrainError::Io(io) => CliError::Io(show(&metrics_path), io),
        other => other.into(),
    })?;

    let mut m = RunManifest::new("train", a, workers);
    m.flags["batch_size"] = json!(cfg.batch_size);
    m.flags["model_config"] = serde_json::to_value(&model_cfg).expect("config serializes");
    m.inputs.push(show(&a.corpus));
    m.outputs.extend([show(&a.out), show(&metrics_path)]);
    m.seed = Some(a.seed);
    m.model_fingerprint = Some(format!("{:016x}", report.final_fingerprint));
    m.write(&with_suffix(&a.out, ".manifest.json"))?;

    let final_loss = report.epoch_losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!("final_loss\t{final_loss}");
    println!("fingerprint\t{:016x}", report.final_fingerprint);
    Ok(())
}

fn cmd_compress(a: &CompressArgs, workers: usize) -> Result<(), CliError> {
    let params = load_model(&a.model)?;
    let corpus = load_corpus(&a.input, a.format.resolve())?;
    let (c, _) = container::pack_with_level(&corpus, &params, a.level)?;
    write_file(&a.output, &c.to_bytes())?;

    let mut m = RunManifest::new("compress", a, workers);
    m.inputs.extend([show(&a.input), show(&a.model)]);
    m.outputs.push(show(&a.output));
    m.model_fingerprint = Some(format!("{:016x}", c.fingerprint));
    m.write(&with_suffix(&a.output, ".manifest.json"))?;
    println!(
        "packets\t{}\noriginal_bytes\t{}\ncontainer_bytes\t{}\nratio\t{:.6}",
        corpus.len(),
        corpus.total_bytes(),
        c.total_len(),
        c.total_len() as f64 / corpus.total_bytes().max(1) as f64
    );
    Ok(())
}

fn cmd_decompress(a: &DecompressArgs, workers: usize) -> Result<(), CliError> {
    let format = a
        .format
        .resolve()
        .ok_or_else(|| CliError::Usage("decompress needs an explicit output --format".into()))?;
    let params = load_model(&a.model)?;
    let bytes = fs::read(&a.input).map_err(|e| CliError::Io(show(&a.input), e))?;
    let c = CompressedContainer::from_bytes(&bytes)?;
    let corpus = container::unpack(&c, &params)?;
    save_corpus(&corpus, &a.output, format)?;

    let mut m = RunManifest::new("decompress", a, workers);
    m.inputs.extend([show(&a.input), show(&a.model)]);
    m.outputs.push(show(&a.output));
    m.model_fingerprint = Some(format!("{:016x}", c.fingerprint));
    m.write(&with_suffix(&a.output, ".manifest.json"))?;
    println!("packets\t{}\nbytes\t{}", corpus.len(), corpus.total_bytes());
    Ok(())
}

fn cmd_bench(a: &BenchArgs, workers: usize) -> Result<(), CliError> {
    let params = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus, a.format.resolve())?;
    let test_count = if a.all_test { corpus.len() } else { a.test_count };
    if test_count == 0 {
        return Err(CliError::Usage("test set is empty".into()));
    }
    let group_size = match a.groups {
        Some(0) => return Err(CliError::Usage("--groups must be at least 1".into())),
        Some(g) => test_count.div_ceil(g),
        None => a.group_size,
    };
    let split = if a.all_test {
        CorpusSplit::test_only(corpus, group_size)
    } else {
        split_corpus(&corpus, test_count, group_size, a.seed)?
    };
    let opts = BenchOptions { level: a.level, timing_runs: a.timing_runs, workers };
    let report = metrics::run_benchmark(&split, &params, Baseline::DeflateOnly, &opts)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(show(&a.out_dir), e))?;
    let files = [
        ("report.tsv", metrics::report_tsv(&report)),
        ("report.json", metrics::report_json(&report)),
        ("timing.tsv", metrics::timing_tsv(&report)),
    ];
    let mut m = RunManifest::new("bench", a, workers);
    for (name, text) in &files {
        let p = a.out_dir.join(name);
        write_file(&p, text.as_bytes())?;
        m.outputs.push(show(&p));
    }
    m.inputs.extend([show(&a.corpus), show(&a.model)]);
    m.flags["resolved_group_size"] = json!(group_size);
    m.flags["resolved_test_count"] = json!(test_count);
    m.seed = Some(a.seed);
    m.model_fingerprint = Some(report.model_fingerprint.clone());
    m.write(&a.out_dir.join("manifest.json"))?;
    print!("{}", metrics::summary_table(&report));
    Ok(())
}

fn cmd_gen(a: &GenArgs, workers: usize) -> Result<(), CliError> {
    let format = a.format.resolve().ok_or_else(|| CliError::Usage("gen-corpus needs an explicit --format".into()))?;
    let corpus = generate(a.kind, a.count as usize, a.seed);
    save_corpus(&corpus, &a.out, format)?;
    let mut m = RunManifest::new("gen-corpus", a, workers);
    m.outputs.push(show(&a.out));
    m.seed = Some(a.seed);
    m.write(&with_suffix(&a.out, ".manifest.json"))?;
    println!("packets\t{}\nbytes\t{}", corpus.len(), corpus.total_bytes());
    Ok(())
}

fn inspect_json(bytes: &[u8]) -> Result<Value, CliError> {
    if bytes.starts_with(CONTAINER_MAGIC) {
        let c = CompressedContainer::from_bytes(bytes)?;
        return Ok(json!({
            "kind": "container",
            "version": c.version,
            "model_fingerprint": format!("{:016x}", c.fingerprint),
            "crc32": format!("{:08x}", c.crc32),
            "packet_count": c.lengths.len(),
            "original_bytes": c.original_bytes(),
            "rank_count": c.expected_rank_count(),
            "header_bytes": c.header_len(),
            "payload_bytes": c.payload.len(),
            "total_bytes": c.total_len(),
        }));
    }
    if bytes.starts_with(MODEL_MAGIC) {
        let p = read_model(bytes)?;
        return Ok(json!({
            "kind": "model",
            "version": bytes[4],
            "config": p.config,
            "param_count": p.param_count(),
            "fingerprint": format!("{:016x}", p.fingerprint()),
        }));
    }
    let format = ingest::detect_format(bytes)?;
    Err(CliError::Usage(format!("not a container or model file (looks like a {} corpus)", format.name())))
}

fn cmd_inspect(a: &InspectArgs, workers: usize) -> Result<(), CliError> {
    let bytes = fs::read(&a.path).map_err(|e| CliError::Io(show(&a.path), e))?;
    let info = inspect_json(&bytes)?;
    let text = serde_json::to_string_pretty(&info).expect("json") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, text.as_bytes())?;
        let mut m = RunManifest::new("inspect", a, workers);
        m.inputs.push(show(&a.path));
        m.outputs.push(show(out));
        m.model_fingerprint =
            info.get("model_fingerprint").or_else(|| info.get("fingerprint")).and_then(Value::as_str).map(String::from);
        m.write(&with_suffix(out, ".manifest.json"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Train(a) => cmd_train(a, workers),
        Command::Compress(a) => cmd_compress(a, workers),
        Command::Decompress(a) => cmd_decompress(a, workers),
        Command::Bench(a) => cmd_bench(a, workers),
        Command::GenCorpus(a) => cmd_gen(a, workers),
        Command::Inspect(a) => cmd_inspect(a, workers),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Batch entry points. Every subcommand writes its outputs plus a
//! `manifest.json` into `--out`, and reports failures as one line on stderr:
//! `error[usage]: ...` (exit 2) or `error[data]: ...` (exit 1).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::embed_io::{EmbeddingTable, PoolingTag};
use crate::eval::{baseline_cos_sim, baseline_isin, f1_by_depth, f1_by_frequency, prf_predictions, threshold_predictions};
use crate::hierarchy::{build_graph, shortest_path_matrix, GraphOptions, DEFAULT_BRANCHES, DEFAULT_NODE_CAP};
use crate::manifest::{sha256_hex, Manifest};
use crate::model::{build_instances, predict, train, Mode, Model, ModelConfig, Pooling, TrainConfig};
use crate::pairs::{gen_balanced, gen_siblings, read_pairs, split_zero_shot, Configuration, Corpus, LabelView, Pair, Partition};
use crate::probe::{
    build_probe_dataset, eval_probe, load_probe, predictions, save_probe, train_probe, DatasetRecord, LossMode,
    ProbeConfig, ProbeDataset, ProbeTask, Split,
};
use crate::synth::{gaussian_embeddings, litcovid_fixture, planted_embeddings, separable_corpus, synthetic_thesaurus, CorpusConfig, SynthConfig};
use crate::thesaurus::{LoadMode, Thesaurus, CONTENT_TOKENS, VOCAB_SIZE};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }

    /// Single-line rendering.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
        };
        format!("error[{kind}]: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "meshzs", version, about = "Hierarchy-aware zero-shot label matching toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file, or a preset name (balanced, siblings).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic thesaurus, corpus and embeddings.
    Synth(SynthArgs),
    /// Inspect a thesaurus file.
    Thesaurus {
        #[command(subcommand)]
        cmd: ThesaurusCmd,
    },
    /// Generate document/descriptor pair sets.
    Pairs {
        #[command(subcommand)]
        cmd: PairsCmd,
    },
    /// Train or evaluate the matching model.
    Model {
        #[command(subcommand)]
        cmd: ModelCmd,
    },
    /// Build, train and evaluate structural probes.
    Probe {
        #[command(subcommand)]
        cmd: ProbeCmd,
    },
    /// Score a pair file with the IsIn or cosine-similarity baseline.
    Baseline(BaselineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Fixture {
    Separable,
    Litcovid,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    fixture: Option<Fixture>,
    #[arg(long)]
    descriptors: Option<usize>,
    #[arg(long)]
    docs: Option<usize>,
    /// Branch letters of the synthetic thesaurus.
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ThesaurusCmd {
    /// Descriptor, Tree Number, vocabulary and graph statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Debug, Subcommand)]
enum PairsCmd {
    /// Split the corpus and write labelled pair files.
    Gen(PairsGenArgs),
}

#[derive(Debug, Args)]
struct PairsGenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_parser = parse_configuration)]
    kind: Option<Configuration>,
    /// Number of held-out descriptors.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    /// Train on `train.tsv`, selecting by loss on `val.tsv`.
    Train(ModelTrainArgs),
    /// Score a test pair file; optionally export label embeddings.
    Eval(ModelEvalArgs),
}

#[derive(Debug, Args)]
struct ModelTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory written by `pairs gen`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ViewArg {
    Seen,
    ZeroShot,
    All,
}

impl ViewArg {
    fn file(self) -> &'static str {
        match self {
            ViewArg::Seen => "test.seen.tsv",
            ViewArg::ZeroShot => "test.zero-shot.tsv",
            ViewArg::All => "test.all.tsv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoolingArg {
    First,
    Mean,
}

#[derive(Debug, Args)]
struct ModelEvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_enum, default_value = "seen")]
    view: ViewArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write label embeddings of every descriptor as EMB1.
    #[arg(long)]
    emit_embeddings: bool,
    #[arg(long, value_enum, default_value = "first")]
    pooling: PoolingArg,
}

#[derive(Debug, Subcommand)]
enum ProbeCmd {
    /// Split descriptors and sample gold-labelled pairs.
    Build(ProbeBuildArgs),
    Train(ProbeTrainArgs),
    Eval(ProbeEvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ProbeKind {
    ShortestPath,
    CommonAncestors,
}

#[derive(Debug, Args)]
struct ProbeBuildArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum)]
    probe: Option<ProbeKind>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    k: Option<u8>,
    #[arg(long)]
    sample_fraction: Option<f64>,
    #[arg(long)]
    branches: Option<String>,
}

#[derive(Debug, Args)]
struct ProbeTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = parse_loss_mode)]
    loss_mode: Option<LossMode>,
}

#[derive(Debug, Args)]
struct ProbeEvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum BaselineMethod {
    Isin,
    CosSim,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    thesaurus: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Pair file.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, value_enum)]
    method: Option<BaselineMethod>,
    /// EMB1 file holding descriptor and document vectors (cos-sim only).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn parse_configuration(s: &str) -> Result<Configuration, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_loss_mode(s: &str) -> Result<LossMode, String> {
    s.parse()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsSettings {
    pub configuration: Configuration,
    pub holdout: usize,
}

impl Default for PairsSettings {
    fn default() -> Self {
        PairsSettings {
            configuration: Configuration::Balanced,
            holdout: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    task: ProbeKind,
    pub k: usize,
    pub sample_fraction: f64,
    pub training: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            task: ProbeKind::ShortestPath,
            k: 1,
            sample_fraction: 0.1,
            training: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSettings {
    method: BaselineMethod,
    pub threshold: f64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            method: BaselineMethod::Isin,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthSettings {
    fixture: Fixture,
    thesaurus: SynthConfig,
    corpus: CorpusConfig,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            fixture: Fixture::Separable,
            thesaurus: SynthConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

/// File-level defaults; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub branches: Option<String>,
    synth: SynthSettings,
    pub pairs: PairsSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeSettings,
    baseline: BaselineSettings,
}

const PRESETS: &[&str] = &["balanced", "siblings"];

impl RunConfig {
    fn preset(name: &str) -> Option<Self> {
        let configuration = name.parse::<Configuration>().ok()?;
        Some(RunConfig {
            pairs: PairsSettings {
                configuration,
                ..PairsSettings::default()
            },
            ..RunConfig::default()
        })
    }

    /// A preset name, else a TOML file.
    fn resolve(value: Option<&str>) -> CliResult<(Self, Option<PathBuf>)> {
        let Some(value) = value else {
            return Ok((RunConfig::default(), None));
        };
        let path = PathBuf::from(value);
        if !path.exists() {
            if let Some(cfg) = RunConfig::preset(value) {
                return Ok((cfg, None));
            }
            return Err(usage(format!(
                "--config {value:?} is neither a readable file nor a preset ({})",
                PRESETS.join(", ")
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| usage(format!("config {value}: {e}")))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| usage(format!("config {value}: {}", e.message())))?;
        Ok((cfg, Some(path)))
    }
}

/// Effective seed plus the config with every component seed derived from it.
fn seeded(common: &Common) -> CliResult<(RunConfig, u64, Option<PathBuf>)> {
    let (mut cfg, path) = RunConfig::resolve(common.config.as_deref())?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    cfg.synth.thesaurus.seed = seed;
    cfg.synth.corpus.seed = seed.wrapping_add(1);
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.probe.training.seed = seed;
    Ok((cfg, seed, path))
}

fn branch_options(flag: Option<&str>, cfg: &RunConfig) -> CliResult<GraphOptions> {
    let letters = flag.or(cfg.branches.as_deref()).unwrap_or(DEFAULT_BRANCHES);
    GraphOptions::with_branches(letters).map_err(|e| usage(format!("--branches: {e}")))
}

/// Output directory writer that records hashes for the manifest.
struct Outputs {
    dir: PathBuf,
    manifest: Manifest,
}

impl Outputs {
    fn new(dir: &Path, command: &str, seed: u64, cfg: &impl Serialize, config_file: Option<&Path>) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let config = serde_json::to_value(cfg).map_err(|e| CliError::Data(e.to_string()))?;
        let mut manifest = Manifest::new(command, seed, config);
        if let Some(p) = config_file {
            manifest
                .add_input(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        }
        Ok(Outputs {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.manifest
            .add_input(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.manifest.add_output(name, bytes);
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(self) -> CliResult<()> {
        let path = self.dir.join("manifest.json");
        fs::write(&path, self.manifest.to_json()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn load_thesaurus(path: &Path) -> CliResult<Thesaurus> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Thesaurus::load(BufReader::new(f), LoadMode::Strict)
        .map(|(th, _)| th)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Corpus::load(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_pairs(path: &Path) -> CliResult<Vec<Pair>> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_pairs(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_embeddings(path: &Path) -> CliResult<(EmbeddingTable, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let table = EmbeddingTable::read(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((table, sha256_hex(&bytes)))
}

fn emb_bytes(t: &EmbeddingTable) -> Vec<u8> {
    let mut buf = Vec::with_capacity(t.encoded_len());
    t.write(&mut buf).expect("writing to memory");
    buf
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(buf)
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                let err = usage("missing subcommand (see --help)");
                eprintln!("{}", err.line());
                return err.exit_code();
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = usage(first.trim_start_matches("error: "));
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Thesaurus { cmd: ThesaurusCmd::Stats(a) } => cmd_stats(a),
        Command::Pairs { cmd: PairsCmd::Gen(a) } => cmd_pairs_gen(a),
        Command::Model { cmd: ModelCmd::Train(a) } => cmd_model_train(a),
        Command::Model { cmd: ModelCmd::Eval(a) } => cmd_model_eval(a),
        Command::Probe { cmd: ProbeCmd::Build(a) } => cmd_probe_build(a),
        Command::Probe { cmd: ProbeCmd::Train(a) } => cmd_probe_train(a),
        Command::Probe { cmd: ProbeCmd::Eval(a) } => cmd_probe_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(f) = a.fixture {
        cfg.synth.fixture = f;
    }
    if let Some(n) = a.descriptors {
        cfg.synth.thesaurus.descriptors = n;
    }
    if let Some(n) = a.docs {
        cfg.synth.corpus.docs = n;
    }
    if let Some(b) = a.branches {
        cfg.synth.thesaurus.branches = b;
    }
    let mut out = Outputs::new(&a.common.out, "synth", seed, &cfg.synth, cfg_path.as_deref())?;
    let (th, corpus) = match cfg.synth.fixture {
        Fixture::Separable => {
            let th = synthetic_thesaurus(&cfg.synth.thesaurus).map_err(|e| usage(format!("synth: {e}")))?;
            let corpus = separable_corpus(&th, &cfg.synth.corpus).map_err(|e| usage(format!("synth: {e}")))?;
            let planted = planted_embeddings(&th).map_err(|e| CliError::Data(e.to_string()))?;
            let gaussian = gaussian_embeddings(&th, planted.dim(), seed).map_err(|e| CliError::Data(e.to_string()))?;
            out.write("planted.emb1", &emb_bytes(&planted))?;
            out.write("gaussian.emb1", &emb_bytes(&gaussian))?;
            (th, corpus)
        }
        Fixture::Litcovid => litcovid_fixture(seed).map_err(|e| CliError::Data(e.to_string()))?,
    };
    out.write("thesaurus.tsv", &to_bytes(|b| th.write(b))?)?;
    out.write("corpus.tsv", &to_bytes(|b| corpus.write(b))?)?;
    println!("wrote {} descriptors and {} documents", th.len(), corpus.len());
    out.finish()
}

#[derive(Serialize)]
struct GraphStats {
    branches: String,
    nodes: usize,
    edges: usize,
    descriptors: usize,
}

#[derive(Serialize)]
struct ThesaurusStats {
    descriptors: usize,
    tree_numbers: usize,
    vocab_size: usize,
    content_tokens: usize,
    reserved_tokens: usize,
    max_depth: usize,
    tree_numbers_per_branch: BTreeMap<char, usize>,
    depth_histogram: BTreeMap<usize, usize>,
    graph: Option<GraphStats>,
}

fn cmd_stats(a: StatsArgs) -> CliResult<()> {
    let (cfg, seed, cfg_path) = seeded(&a.common)?;
    let options = branch_options(a.branches.as_deref(), &cfg)?;
    let branches: String = options.branches.iter().collect();
    #[derive(Serialize)]
    struct Echo<'a> {
        branches: &'a str,
    }
    let mut out = Outputs::new(&a.common.out, "thesaurus stats", seed, &Echo { branches: &branches }, cfg_path.as_deref())?;
    out.input(&a.thesaurus)?;
    let th = load_thesaurus(&a.thesaurus)?;
    let mut per_branch = BTreeMap::new();
    let mut hist = BTreeMap::new();
    let mut max_depth = 0;
    for d in th.descriptors() {
        for tn in &d.tree_numbers {
            *per_branch.entry(tn.branch()).or_insert(0) += 1;
            *hist.entry(tn.depth()).or_insert(0) += 1;
            max_depth = max_depth.max(tn.depth());
        }
    }
    let graph = build_graph(&th, &options).ok().map(|g| GraphStats {
        branches: branches.clone(),
        nodes: g.node_count(),
        edges: g.edge_count(),
        descriptors: g.descriptors().len(),
    });
    let stats = ThesaurusStats {
        descriptors: th.len(),
        tree_numbers: th.tree_number_count(),
        vocab_size: VOCAB_SIZE,
        content_tokens: CONTENT_TOKENS,
        reserved_tokens: VOCAB_SIZE - CONTENT_TOKENS,
        max_depth,
        tree_numbers_per_branch: per_branch,
        depth_histogram: hist,
        graph,
    };
    println!("descriptors {} tree_numbers {} vocab {}", stats.descriptors, stats.tree_numbers, stats.vocab_size);
    out.write_json("stats.json", &stats)?;
    out.finish()
}

fn cmd_pairs_gen(a: PairsGenArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(k) = a.kind {
        cfg.pairs.configuration = k;
    }
    if let Some(h) = a.holdout {
        cfg.pairs.holdout = h;
    }
    let options = branch_options(a.branches.as_deref(), &cfg)?;
    #[derive(Serialize)]
    struct Echo<'a> {
        pairs: &'a PairsSettings,
        branches: String,
        split_seed: u64,
        sample_seed: u64,
    }
    let echo = Echo {
        pairs: &cfg.pairs,
        branches: options.branches.iter().collect(),
        split_seed: seed,
        sample_seed: seed.wrapping_add(1),
    };
    let mut out = Outputs::new(&a.common.out, "pairs gen", seed, &echo, cfg_path.as_deref())?;
    out.input(&a.thesaurus)?;
    out.input(&a.corpus)?;
    let th = load_thesaurus(&a.thesaurus)?;
    let corpus = load_corpus(&a.corpus)?;
    let split = split_zero_shot(&corpus, Some(&th), cfg.pairs.holdout, seed).map_err(|e| CliError::Data(e.to_string()))?;
    out.write_json("split.json", &split)?;
    let graph = match cfg.pairs.configuration {
        Configuration::Siblings => Some(build_graph(&th, &options).map_err(|e| CliError::Data(e.to_string()))?),
        Configuration::Balanced => None,
    };
    let jobs = [
        ("train.tsv", Partition::Train, LabelView::Seen),
        ("val.tsv", Partition::Val, LabelView::Seen),
        ("test.seen.tsv", Partition::Test, LabelView::Seen),
        ("test.zero-shot.tsv", Partition::Test, LabelView::ZeroShot),
        ("test.all.tsv", Partition::Test, LabelView::All),
    ];
    let mut skipped_lines = String::new();
    for (name, partition, view) in jobs {
        let set = match &graph {
            None => gen_balanced(&corpus, &split, partition, view, None, seed.wrapping_add(1)),
            Some(g) => gen_siblings(&corpus, &split, partition, view, &th, g).map(|(set, skipped)| {
                for s in skipped {
                    skipped_lines.push_str(&format!("{name}\t{}\t{}\n", s.doc_id, s.descriptor));
                }
                set
            }),
        }
        .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        out.write(name, &to_bytes(|b| set.write(b))?)?;
        println!("{name}: {} pairs", set.pairs.len());
    }
    if graph.is_some() {
        out.write("skipped.tsv", skipped_lines.as_bytes())?;
    }
    out.finish()
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn cmd_model_train(a: ModelTrainArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(m) = a.mode {
        cfg.train.mode = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let echo = TrainEcho {
        model: &cfg.model,
        train: &cfg.train,
    };
    let mut out = Outputs::new(&a.common.out, "model train", seed, &echo, cfg_path.as_deref())?;
    let train_path = a.pairs.join("train.tsv");
    let val_path = a.pairs.join("val.tsv");
    for p in [&a.thesaurus, &a.corpus, &train_path, &val_path] {
        out.input(p)?;
    }
    let th = load_thesaurus(&a.thesaurus)?;
    let corpus = load_corpus(&a.corpus)?;
    let train_pairs = load_pairs(&train_path)?;
    let val_pairs = load_pairs(&val_path)?;
    let mut model = Model::new(cfg.model.clone()).map_err(|e| usage(e.to_string()))?;
    let mode = cfg.train.mode;
    let train_set = build_instances(&model, &train_pairs, &corpus, &th, mode).map_err(|e| CliError::Data(e.to_string()))?;
    let val_set = build_instances(&model, &val_pairs, &corpus, &th, mode).map_err(|e| CliError::Data(e.to_string()))?;
    let outcome = train(&mut model, &train_set, &val_set, &cfg.train).map_err(|e| CliError::Data(e.to_string()))?;
    let ckpt = model
        .to_container(outcome.rng, outcome.steps)
        .map_err(|e| CliError::Data(e.to_string()))?;
    out.write("model.ckpt", &to_bytes(|b| ckpt.write(b))?)?;
    let mut history = csv::Writer::from_writer(Vec::new());
    history
        .write_record(["step", "epoch", "train_loss", "val_loss", "sigma1", "sigma2"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for h in &outcome.history {
        history
            .write_record([
                h.step.to_string(),
                format!("{:.4}", h.epoch),
                format!("{:.8}", h.train_loss),
                format!("{:.8}", h.val_loss),
                format!("{:.8}", h.sigma1),
                format!("{:.8}", h.sigma2),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let history = history.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    out.write("history.csv", &history)?;
    #[derive(Serialize)]
    struct Summary {
        mode: Mode,
        train_instances: usize,
        val_instances: usize,
        steps: u64,
        best_step: u64,
        best_val_loss: f64,
    }
    out.write_json(
        "summary.json",
        &Summary {
            mode,
            train_instances: train_set.len(),
            val_instances: val_set.len(),
            steps: outcome.steps,
            best_step: outcome.best_step,
            best_val_loss: outcome.best_val_loss,
        },
    )?;
    println!(
        "trained {} steps, best validation loss {:.4} at step {}",
        outcome.steps, outcome.best_val_loss, outcome.best_step
    );
    out.finish()
}

fn cmd_model_eval(a: ModelEvalArgs) -> CliResult<()> {
    let (_, seed, cfg_path) = seeded(&a.common)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage(format!("--threshold {} not in [0, 1]", a.threshold)));
    }
    #[derive(Serialize)]
    struct Echo<'a> {
        view: &'a str,
        threshold: f64,
        emit_embeddings: bool,
        pooling: &'a str,
    }
    let echo = Echo {
        view: a.view.file(),
        threshold: a.threshold,
        emit_embeddings: a.emit_embeddings,
        pooling: match a.pooling {
            PoolingArg::First => "first-position",
            PoolingArg::Mean => "mean",
        },
    };
    let mut out = Outputs::new(&a.common.out, "model eval", seed, &echo, cfg_path.as_deref())?;
    let test_path = a.pairs.join(a.view.file());
    let train_path = a.pairs.join("train.tsv");
    for p in [&a.model, &a.thesaurus, &a.corpus, &test_path, &train_path] {
        out.input(p)?;
    }
    let (model, _) = Model::load(&a.model).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let th = load_thesaurus(&a.thesaurus)?;
    let corpus = load_corpus(&a.corpus)?;
    let pairs = load_pairs(&test_path)?;
    let train_pairs = load_pairs(&train_path)?;
    let instances = build_instances(&model, &pairs, &corpus, &th, Mode::Stl).map_err(|e| CliError::Data(e.to_string()))?;
    let scores = predict(&model, &instances).map_err(|e| CliError::Data(e.to_string()))?;
    let gold: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let labels: Vec<&str> = pairs.iter().map(|p| p.descriptor.as_str()).collect();
    let predicted = threshold_predictions(&scores, a.threshold);
    let report = prf_predictions(a.view.file(), &predicted, &gold, Some(&labels)).map_err(|e| CliError::Data(e.to_string()))?;
    let mut train_counts = BTreeMap::new();
    for p in train_pairs.iter().filter(|p| p.positive) {
        *train_counts.entry(p.descriptor.clone()).or_insert(0) += 1;
    }
    let by_freq = f1_by_frequency(&predicted, &gold, &labels, &train_counts).map_err(|e| CliError::Data(e.to_string()))?;
    let by_depth = f1_by_depth(&predicted, &gold, &labels, &th).map_err(|e| CliError::Data(e.to_string()))?;

    let mut scores_tsv = String::new();
    for (p, s) in pairs.iter().zip(&scores) {
        scores_tsv.push_str(&format!("{}\t{}\t{}\t{:.8}\n", p.descriptor, p.doc_id, u8::from(p.positive), s));
    }
    out.write("scores.tsv", scores_tsv.as_bytes())?;
    out.write_json("metrics.json", &report)?;
    let csv_bytes = |r: &crate::eval::BinnedReport| -> CliResult<Vec<u8>> {
        let mut buf = Vec::new();
        r.write_csv(&mut buf).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(buf)
    };
    out.write("bins_frequency.csv", &csv_bytes(&by_freq)?)?;
    out.write("bins_depth.csv", &csv_bytes(&by_depth)?)?;
    if a.emit_embeddings {
        let (pooling, tag) = match a.pooling {
            PoolingArg::First => (Pooling::FirstPosition, PoolingTag::FirstPosition),
            PoolingArg::Mean => (Pooling::Mean, PoolingTag::Mean),
        };
        let mut table = EmbeddingTable::new(model.config().encoder.width, tag);
        for d in th.descriptors() {
            let v = model
                .label_embedding(&d.label, &d.description, pooling)
                .map_err(|e| CliError::Data(format!("{}: {e}", d.id)))?;
            table.insert_f64(&d.id, &v).map_err(|e| CliError::Data(format!("{}: {e}", d.id)))?;
        }
        out.write("label_embeddings.emb1", &emb_bytes(&table))?;
    }
    println!(
        "{}: precision {:.4} recall {:.4} f1 {:.4} over {} pairs",
        a.view.file(),
        report.precision,
        report.recall,
        report.f1,
        report.pairs
    );
    out.finish()
}

fn probe_task(kind: ProbeKind, k: usize) -> CliResult<ProbeTask> {
    match kind {
        ProbeKind::ShortestPath => Ok(ProbeTask::ShortestPath),
        ProbeKind::CommonAncestors if (1..=3).contains(&k) => Ok(ProbeTask::CommonAncestors { k }),
        ProbeKind::CommonAncestors => Err(usage(format!("--k {k} not in 1..=3"))),
    }
}

fn cmd_probe_build(a: ProbeBuildArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(p) = a.probe {
        cfg.probe.task = p;
    }
    if let Some(k) = a.k {
        cfg.probe.k = usize::from(k);
    }
    if let Some(f) = a.sample_fraction {
        cfg.probe.sample_fraction = f;
    }
    if !(cfg.probe.sample_fraction > 0.0 && cfg.probe.sample_fraction <= 1.0) {
        return Err(usage(format!("sample fraction {} not in (0, 1]", cfg.probe.sample_fraction)));
    }
    let task = probe_task(cfg.probe.task, cfg.probe.k)?;
    let options = branch_options(a.branches.as_deref(), &cfg)?;
    #[derive(Serialize)]
    struct Echo {
        task: ProbeTask,
        sample_fraction: f64,
        branches: String,
    }
    let echo = Echo {
        task,
        sample_fraction: cfg.probe.sample_fraction,
        branches: options.branches.iter().collect(),
    };
    let mut out = Outputs::new(&a.common.out, "probe build", seed, &echo, cfg_path.as_deref())?;
    out.input(&a.thesaurus)?;
    out.input(&a.embeddings)?;
    let th = load_thesaurus(&a.thesaurus)?;
    let (emb, emb_sha) = load_embeddings(&a.embeddings)?;
    let g = build_graph(&th, &options).map_err(|e| CliError::Data(e.to_string()))?;
    let oracle = shortest_path_matrix(&g, DEFAULT_NODE_CAP).map_err(|e| CliError::Data(e.to_string()))?;
    let ds = build_probe_dataset(&th, &g, &oracle, &emb, task, cfg.probe.sample_fraction, seed)
        .map_err(|e| CliError::Data(e.to_string()))?;
    out.write_json("dataset.json", &ds.to_record(cfg.probe.sample_fraction, seed, &emb_sha))?;
    println!(
        "{task}: {} descriptors, {} train / {} val / {} eval pairs",
        ds.descriptors.len(),
        ds.train.len(),
        ds.val.len(),
        ds.eval.len()
    );
    out.finish()
}

fn load_dataset(dataset: &Path, embeddings: &Path) -> CliResult<ProbeDataset> {
    let text = fs::read_to_string(dataset).map_err(|e| CliError::Data(format!("{}: {e}", dataset.display())))?;
    let rec: DatasetRecord =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", dataset.display())))?;
    let (emb, sha) = load_embeddings(embeddings)?;
    if sha != rec.embeddings_sha256 {
        return Err(CliError::Data(format!(
            "{} does not match the embeddings the dataset was built from",
            embeddings.display()
        )));
    }
    ProbeDataset::from_record(&rec, &emb).map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_probe_train(a: ProbeTrainArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(r) = a.rank {
        cfg.probe.training.rank = r;
    }
    if let Some(m) = a.loss_mode {
        cfg.probe.training.loss_mode = m;
    }
    let pc = cfg.probe.training.clone();
    let mut out = Outputs::new(&a.common.out, "probe train", seed, &pc, cfg_path.as_deref())?;
    out.input(&a.dataset)?;
    out.input(&a.embeddings)?;
    let ds = load_dataset(&a.dataset, &a.embeddings)?;
    let outcome = train_probe(&ds, &pc).map_err(|e| match e {
        crate::probe::ProbeError::BadConfig(m) => usage(m),
        other => CliError::Data(other.to_string()),
    })?;
    let ckpt_path = out.dir.join("probe.ckpt");
    save_probe(&ckpt_path, &outcome.params, ds.task, &pc, outcome.rng, outcome.steps)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let bytes = fs::read(&ckpt_path).map_err(|e| CliError::Data(e.to_string()))?;
    out.manifest.add_output("probe.ckpt", &bytes);
    let mut history = String::from("epoch,train_loss,val_loss\n");
    for h in &outcome.history {
        history.push_str(&format!("{},{:.8},{:.8}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out.write("history.csv", history.as_bytes())?;
    let metrics: Vec<_> = [Split::Val, Split::Eval]
        .into_iter()
        .map(|s| eval_probe(&outcome.params, &ds, s, pc.loss_mode))
        .collect();
    out.write_json("metrics.json", &metrics)?;
    report_probe(&metrics[1]);
    out.finish()
}

fn report_probe(m: &crate::probe::ProbeMetrics) {
    match (m.distance_error, m.f1) {
        (Some(e), _) => println!(
            "{} {}: distance error {:.4} (gold mean {:.3}, std {:.3}) over {} pairs",
            m.task, m.split, e, m.gold_mean, m.gold_std, m.pairs
        ),
        (_, Some(f)) => println!("{} {}: f1 {:.4} over {} pairs", m.task, m.split, f, m.pairs),
        _ => {}
    }
}

fn cmd_probe_eval(a: ProbeEvalArgs) -> CliResult<()> {
    let (_, seed, cfg_path) = seeded(&a.common)?;
    #[derive(Serialize)]
    struct Echo {
        split: Split,
    }
    let mut out = Outputs::new(&a.common.out, "probe eval", seed, &Echo { split: Split::Eval }, cfg_path.as_deref())?;
    for p in [&a.dataset, &a.embeddings, &a.checkpoint] {
        out.input(p)?;
    }
    let ds = load_dataset(&a.dataset, &a.embeddings)?;
    let (params, task, pc) = load_probe(&a.checkpoint).map_err(|e| CliError::Data(format!("{}: {e}", a.checkpoint.display())))?;
    if task != ds.task {
        return Err(CliError::Data(format!("checkpoint task {task} does not match dataset task {}", ds.task)));
    }
    if params.width() != ds.width() {
        return Err(CliError::Data(format!(
            "checkpoint width {} does not match embedding width {}",
            params.width(),
            ds.width()
        )));
    }
    let preds = predictions(&params, &ds, &ds.eval, pc.loss_mode);
    let mut tsv = String::new();
    for (p, y) in ds.eval.iter().zip(&preds) {
        let (x, z) = ds.descriptor_pair(p);
        tsv.push_str(&format!("{x}\t{z}\t{}\t{y:.8}\n", p.gold));
    }
    out.write("predictions.tsv", tsv.as_bytes())?;
    let m = eval_probe(&params, &ds, Split::Eval, pc.loss_mode);
    out.write_json("metrics.json", &m)?;
    report_probe(&m);
    out.finish()
}

fn cmd_baseline(a: BaselineArgs) -> CliResult<()> {
    let (mut cfg, seed, cfg_path) = seeded(&a.common)?;
    if let Some(m) = a.method {
        cfg.baseline.method = m;
    }
    if let Some(t) = a.threshold {
        cfg.baseline.threshold = t;
    }
    if cfg.baseline.method == BaselineMethod::CosSim && a.embeddings.is_none() {
        return Err(usage("--method cos-sim requires --embeddings"));
    }
    let mut out = Outputs::new(&a.common.out, "baseline", seed, &cfg.baseline, cfg_path.as_deref())?;
    out.input(&a.thesaurus)?;
    out.input(&a.corpus)?;
    out.input(&a.pairs)?;
    if let Some(e) = &a.embeddings {
        out.input(e)?;
    }
    let th = load_thesaurus(&a.thesaurus)?;
    let corpus = load_corpus(&a.corpus)?;
    let pairs = load_pairs(&a.pairs)?;
    let emb = a.embeddings.as_deref().map(load_embeddings).transpose()?.map(|(t, _)| t);
    let mut predicted = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let doc = corpus
            .get(&p.doc_id)
            .ok_or_else(|| CliError::Data(format!("unknown document {:?}", p.doc_id)))?;
        let d = th
            .get(&p.descriptor)
            .ok_or_else(|| CliError::Data(format!("unknown descriptor {:?}", p.descriptor)))?;
        let yes = match (cfg.baseline.method, &emb) {
            (BaselineMethod::Isin, _) => baseline_isin(&d.label, &doc.abstract_text),
            (BaselineMethod::CosSim, Some(t)) => {
                let lookup = |id: &str| t.get_f64(id).ok_or_else(|| CliError::Data(format!("no embedding for {id:?}")));
                baseline_cos_sim(&lookup(&p.descriptor)?, &lookup(&p.doc_id)?, cfg.baseline.threshold)
                    .map_err(|e| CliError::Data(e.to_string()))?
            }
            (BaselineMethod::CosSim, None) => unreachable!("checked above"),
        };
        predicted.push(yes);
    }
    let gold: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let labels: Vec<&str> = pairs.iter().map(|p| p.descriptor.as_str()).collect();
    let name = match cfg.baseline.method {
        BaselineMethod::Isin => "isin",
        BaselineMethod::CosSim => "cos-sim",
    };
    let report = prf_predictions(name, &predicted, &gold, Some(&labels)).map_err(|e| CliError::Data(e.to_string()))?;
    let mut tsv = String::new();
    for (p, y) in pairs.iter().zip(&predicted) {
        tsv.push_str(&format!("{}\t{}\t{}\t{}\n", p.descriptor, p.doc_id, u8::from(p.positive), u8::from(*y)));
    }
    out.write("predictions.tsv", tsv.as_bytes())?;
    out.write_json("metrics.json", &report)?;
    println!(
        "{name}: precision {:.4} recall {:.4} f1 {:.4}",
        report.precision, report.recall, report.f1
    );
    std::io::stdout().flush().ok();
    out.finish()
}

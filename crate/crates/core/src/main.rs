use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use adapterforge::ckpt::{self, read_checkpoint, write_atomic, write_checkpoint};
use adapterforge::compose::{self, Mode, Operands, Recipe, Space};
use adapterforge::lang::{distance_report, select_related, DistanceTable, SelectionRule};
use adapterforge::minilm::corpus::{generate_corpus, Dataset, DatasetKind};
use adapterforge::minilm::eval::{self, Metric};
use adapterforge::minilm::experiment::{self, ToyConfig, ToySetup, ToyWorld};
use adapterforge::minilm::model::{MiniLm, MiniLmConfig};
use adapterforge::minilm::train::{self, TrainSpec};
use adapterforge::{AdapterCheckpoint, CheckpointMeta, Error, Objective};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INCOMPATIBLE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "adapterforge", version, about = "Compose language and task adapters by weight arithmetic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create a randomly initialized base model file.
    InitBase(InitBaseArgs),
    /// Write a synthetic dataset for one toy language.
    Generate(GenerateArgs),
    /// Train a language or task adapter over a frozen base.
    Train(TrainArgs),
    /// Combine adapters by a composition recipe.
    Compose(ComposeArgs),
    /// Pick related languages by typological distance.
    Select(SelectArgs),
    /// Score an adapter, or sweep λ for a recipe.
    Eval(EvalArgs),
    /// Print checkpoint metadata, shapes and norms.
    Inspect(InspectArgs),
    /// Fold an adapter into a base model file.
    Merge(MergeArgs),
    /// Run the full toy experiment and write a comparison table.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long, env = "ADAPTERFORGE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InitBaseArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 64)]
    mlp_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WorldArg {
    /// Seed of the toy language family that language codes refer to.
    #[arg(long, default_value_t = 0)]
    world: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Unlabeled,
    Task,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Unlabeled => DatasetKind::Unlabeled,
            KindArg::Task => DatasetKind::Task,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    language: String,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[command(flatten)]
    world: WorldArg,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    PrefixLm,
    Task,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AdapterArg {
    Lora,
    Kronecker,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    objective: ObjectiveArg,
    #[arg(long)]
    language: String,
    #[arg(long, default_value_t = train::DEFAULT_STEPS)]
    steps: u64,
    #[arg(long, default_value_t = train::DEFAULT_LEARNING_RATE)]
    lr: f64,
    #[arg(long, default_value_t = train::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    base: PathBuf,
    /// Training data; generated from the toy world when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_examples: usize,
    #[command(flatten)]
    world: WorldArg,
    #[arg(long, value_enum, default_value = "lora")]
    adapter: AdapterArg,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 2)]
    kron_m: usize,
    #[arg(long, default_value_t = 2)]
    kron_n: usize,
    /// Seed of the adapter initialization (defaults to --seed).
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Add,
    AddSubtract,
    TaskAddAll,
    TaskAddRelated,
    AddSubtractRelated,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Add => Mode::LangTaskAdd,
            ModeArg::AddSubtract => Mode::LangTaskAddSubtract,
            ModeArg::TaskAddAll => Mode::TaskAddAll,
            ModeArg::TaskAddRelated => Mode::TaskAddRelated,
            ModeArg::AddSubtractRelated => Mode::LangTaskAddSubtractRelated,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Default)]
enum SpaceArg {
    #[default]
    Factor,
    Delta,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Factor => Space::Factor,
            SpaceArg::Delta => Space::Delta,
        }
    }
}

#[derive(Args, Debug)]
struct OperandArgs {
    #[arg(long = "task", num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long)]
    lm_target: Option<PathBuf>,
    #[arg(long = "lm-source", num_args = 1..)]
    lm_sources: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "factor")]
    space: SpaceArg,
}

#[derive(Args, Debug)]
struct ComposeArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    operands: OperandArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    target: String,
    /// Comma-separated candidate codes; the seen XLSum languages when absent.
    #[arg(long, value_delimiter = ',')]
    pool: Vec<String>,
    /// Distance table CSV; the packaged table when absent.
    #[arg(long)]
    distances: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    max_syn: f64,
    #[arg(long, default_value_t = 0.3)]
    max_geo: f64,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Xent,
    Rouge2,
    LangRate,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Xent => Metric::CrossEntropy,
            MetricArg::Rouge2 => Metric::Rouge2,
            MetricArg::LangRate => Metric::TargetLanguageRate,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "sweep_lambda")]
    adapter: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Target language code for lang-rate.
    #[arg(long)]
    language: Option<String>,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[command(flatten)]
    world: WorldArg,
    /// λ grid `start:end:step`, swept over the recipe given by --mode and the operand flags.
    #[arg(long, requires = "mode")]
    sweep_lambda: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[command(flatten)]
    operands: OperandArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Base model for the parameter ratio.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = train::DEFAULT_STEPS)]
    steps: u64,
    #[arg(long, default_value_t = experiment::TOY_LEARNING_RATE)]
    lr: f64,
    #[arg(long, value_enum, default_value = "factor")]
    space: SpaceArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Structured-text record of a mutating command.
struct Manifest {
    command: &'static str,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &'static str, seed: Option<u64>) -> Self {
        Self {
            command,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        self.inputs.push((path.display().to_string(), ckpt::fingerprint(&bytes)));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        self.outputs.push((path.display().to_string(), ckpt::fingerprint(&bytes)));
        Ok(())
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut s = String::new();
        writeln!(s, "command: {}", self.command)?;
        for a in std::env::args().skip(1) {
            writeln!(s, "argument: {a}")?;
        }
        if let Some(seed) = self.seed {
            writeln!(s, "seed: {seed}")?;
        }
        for (p, f) in &self.inputs {
            writeln!(s, "input: {f} {p}")?;
        }
        for (p, f) in &self.outputs {
            writeln!(s, "output: {f} {p}")?;
        }
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        writeln!(s, "timestamp: {ts}")?;
        write_atomic(path, s.as_bytes())?;
        Ok(())
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn load_base(path: &Path) -> anyhow::Result<MiniLm> {
    MiniLm::read(path).with_context(|| format!("reading base model {}", path.display()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<AdapterCheckpoint> {
    read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn cmd_init_base(a: InitBaseArgs) -> anyhow::Result<()> {
    let config = MiniLmConfig {
        vocab_size: a.vocab_size,
        model_dim: a.model_dim,
        heads: a.heads,
        layers: a.layers,
        max_seq_len: a.max_seq_len,
        mlp_dim: a.mlp_dim,
        seed: a.seed.seed,
    };
    let model = MiniLm::new(config)?;
    model.write(&a.out)?;
    let mut m = Manifest::new("init-base", Some(a.seed.seed));
    m.output(&a.out)?;
    m.write(&sidecar(&a.out, ".manifest"))?;
    println!("{}", model.fingerprint());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let world = ToyWorld::new(a.vocab_size, a.world.world)?;
    let data = generate_corpus(world.language(&a.language)?, a.kind.into(), a.n, a.seed.seed)?;
    data.write(&a.out)?;
    let mut m = Manifest::new("generate", Some(a.seed.seed));
    m.output(&a.out)?;
    m.write(&sidecar(&a.out, ".manifest"))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    if a.steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(usage("--lr must be a positive number"));
    }
    let objective = match a.objective {
        ObjectiveArg::PrefixLm => Objective::Lm,
        ObjectiveArg::Task => Objective::Task,
    };
    let spec = TrainSpec::new(objective, a.steps, a.lr, a.batch_size, a.seed.seed)?;
    let model = load_base(&a.base)?;
    let mut manifest = Manifest::new("train", Some(a.seed.seed));
    manifest.input(&a.base)?;
    let data = match &a.dataset {
        Some(p) => {
            manifest.input(p)?;
            load_dataset(p)?
        }
        None => {
            let world = ToyWorld::new(model.config().vocab_size, a.world.world)?;
            generate_corpus(world.language(&a.language)?, train::dataset_kind_for(objective), a.n_examples, a.seed.seed)?
        }
    };
    let meta = CheckpointMeta::new(&a.language, objective, model.fingerprint());
    let init_seed = a.init_seed.unwrap_or(a.seed.seed);
    let init = match a.adapter {
        AdapterArg::Lora => AdapterCheckpoint::init_lora(&model.site_shapes(), a.rank, init_seed, meta)?,
        AdapterArg::Kronecker => AdapterCheckpoint::init_kronecker(&model.site_shapes(), a.kron_m, a.kron_n, init_seed, meta)?,
    };
    let outcome = train::train_adapter(&model, &spec, &data, init)?;
    write_checkpoint(&outcome.adapter, &a.out)?;
    let curve_path = sidecar(&a.out, ".loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        writeln!(csv, "{},{l}", i + 1)?;
    }
    write_atomic(&curve_path, csv.as_bytes())?;
    manifest.output(&a.out)?;
    manifest.output(&curve_path)?;
    manifest.write(&sidecar(&a.out, ".manifest"))?;
    let last = outcome.loss_curve.last().copied().unwrap_or(f64::NAN);
    println!("trained {} steps, final batch loss {last:.6}", a.steps);
    Ok(())
}

struct LoadedOperands {
    tasks: Vec<AdapterCheckpoint>,
    lm_target: Option<AdapterCheckpoint>,
    lm_sources: Vec<AdapterCheckpoint>,
}

impl LoadedOperands {
    fn load(args: &OperandArgs, manifest: &mut Manifest) -> anyhow::Result<Self> {
        let mut load = |p: &PathBuf| -> anyhow::Result<AdapterCheckpoint> {
            manifest.input(p)?;
            load_ckpt(p)
        };
        Ok(Self {
            tasks: args.tasks.iter().map(&mut load).collect::<anyhow::Result<_>>()?,
            lm_target: args.lm_target.as_ref().map(&mut load).transpose()?,
            lm_sources: args.lm_sources.iter().map(&mut load).collect::<anyhow::Result<_>>()?,
        })
    }

    fn operands(&self) -> Operands<'_> {
        Operands {
            tasks: self.tasks.iter().collect(),
            lm_target: self.lm_target.as_ref(),
            lm_sources: self.lm_sources.iter().collect(),
        }
    }
}

fn cmd_compose(a: ComposeArgs) -> anyhow::Result<()> {
    let recipe = Recipe::new(a.mode.into(), a.lambda, a.operands.space.into())?;
    let mut manifest = Manifest::new("compose", None);
    let ops = LoadedOperands::load(&a.operands, &mut manifest)?;
    let out = recipe.apply(&ops.operands())?;
    write_checkpoint(&out, &a.out)?;
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out, ".manifest"))?;
    println!("{}", ckpt::checkpoint_fingerprint(&out)?);
    Ok(())
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let table = match &a.distances {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::Io)?;
            DistanceTable::parse_csv(&text).with_context(|| format!("reading distance table {}", p.display()))?
        }
        None => DistanceTable::packaged(),
    };
    let rule = SelectionRule::new(a.max_syn, a.max_geo)?;
    let mut pool: Vec<&str> = a.pool.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    if pool.is_empty() {
        pool = adapterforge::lang::XLSUM_SEEN.to_vec();
    }
    let rows = distance_report(&a.target, &pool, &rule, &table)?;
    if select_related(&a.target, &pool, &rule, &table)?.fallback {
        eprintln!(
            "warning: no language in the pool is within syntactic < {} and geographic < {} of {}; falling back to the syntactically nearest",
            a.max_syn, a.max_geo, a.target
        );
    }
    match a.format {
        FormatArg::Csv => {
            println!("code,syntactic,geographic,selected");
            for r in &rows {
                println!("{},{},{},{}", r.code, r.syntactic, r.geographic, r.selected);
            }
        }
        FormatArg::Table => {
            println!("{:<6} {:>9} {:>10} {:>8}", "code", "syntactic", "geographic", "selected");
            for r in &rows {
                println!("{:<6} {:>9.4} {:>10.4} {:>8}", r.code, r.syntactic, r.geographic, if r.selected { "yes" } else { "no" });
            }
        }
    }
    Ok(())
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, end, step] = parts.as_slice() else {
        return Err(usage(format!("--sweep-lambda expects start:end:step, got {spec:?}")));
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad number {s:?} in --sweep-lambda")));
    let (start, end, step) = (num(start)?, num(end)?, num(step)?);
    if !(step > 0.0) || end < start {
        return Err(usage("--sweep-lambda needs step > 0 and end >= start"));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    // Each point is start + i·step rounded to 12 decimals so that 0.1 steps
    // land on the decimal grid.
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_base(&a.base)?;
    let data = load_dataset(&a.dataset)?;
    let metric: Metric = a.metric.into();
    let world;
    let language = match (&a.language, metric) {
        (Some(code), _) => {
            world = ToyWorld::new(a.vocab_size, a.world.world)?;
            Some(world.language(code)?)
        }
        (None, Metric::TargetLanguageRate) => return Err(usage("--metric lang-rate needs --language")),
        (None, _) => None,
    };
    let score = |c: Option<&AdapterCheckpoint>| eval::evaluate(&model, c, &data, metric, language);

    if let Some(grid) = &a.sweep_lambda {
        let grid = parse_grid(grid)?;
        let mode: Mode = a.mode.expect("clap enforces --mode").into();
        let template = Recipe::new(mode, Some(1.0), a.operands.space.into())?;
        let mut manifest = Manifest::new("eval", None);
        let ops = LoadedOperands::load(&a.operands, &mut manifest)?;
        let sign = if metric.higher_is_better() { 1.0 } else { -1.0 };
        let result = compose::lambda_sweep(&template, &ops.operands(), &grid, |c| Ok(sign * score(Some(c))?))?;
        println!("lambda,{metric}");
        for (l, s) in &result.table {
            println!("{l},{}", sign * s);
        }
        println!("best lambda: {} ({metric} {})", result.best_lambda, sign * result.best_score);
        return Ok(());
    }

    let path = a.adapter.as_ref().expect("clap enforces --adapter");
    let adapter = load_ckpt(path)?;
    println!("{}", score(Some(&adapter))?);
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> anyhow::Result<()> {
    let c = load_ckpt(&a.ckpt)?;
    let meta = &c.meta;
    println!("kind: {}", c.kind());
    println!("language_tag: {}", meta.language_tag);
    println!("objective: {}", meta.objective.as_str());
    println!("base_model_fingerprint: {}", meta.base_model_fingerprint);
    println!("training_steps: {}", meta.training_steps);
    if let Some(p) = &meta.provenance {
        let lambda = p.lambda.map_or("none".to_string(), |l| l.to_string());
        println!("recipe: {} lambda={lambda} space={}", p.mode, p.space);
        for o in &p.operands {
            println!("  operand {} {}", o.role, o.fingerprint);
        }
    }
    println!("fingerprint: {}", ckpt::checkpoint_fingerprint(&c)?);
    println!("parameter_count: {}", c.parameter_count());
    if let Some(base) = &a.base {
        let model = load_base(base)?;
        let ratio = c.parameter_count() as f64 / model.parameter_count() as f64;
        println!("base_parameter_count: {}", model.parameter_count());
        println!("parameter_ratio: {ratio:.6}");
    }
    println!("site,factor_shapes,factor_norms,delta_norm");
    for (site, m) in c.modules() {
        let shapes: Vec<String> = m.factor_shapes().iter().map(|(r, c)| format!("{r}x{c}")).collect();
        let norms: Vec<String> = m.factors().iter().map(|f| format!("{:.6}", f.frobenius_norm())).collect();
        println!("{site},{},{},{:.6}", shapes.join(" "), norms.join(" "), m.materialize_delta()?.frobenius_norm());
    }
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> anyhow::Result<()> {
    let model = load_base(&a.base)?;
    let adapter = load_ckpt(&a.adapter)?;
    let merged = model.merge(&adapter)?;
    merged.write(&a.out)?;
    let mut manifest = Manifest::new("merge", None);
    manifest.input(&a.base)?;
    manifest.input(&a.adapter)?;
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out, ".manifest"))?;
    println!("{}", merged.fingerprint());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out).map_err(Error::Io)?;
    let mut config = ToyConfig::new(a.seed.seed);
    config.steps = a.steps;
    config.learning_rate = a.lr;
    config.space = a.space.into();
    let mut manifest = Manifest::new("pipeline", Some(a.seed.seed));

    let setup = ToySetup::new(config.clone())?;
    let base_path = a.out.join("base.bin");
    setup.model.write(&base_path)?;
    manifest.output(&base_path)?;
    let table_path = a.out.join("toy_distances.csv");
    write_atomic(&table_path, setup.world.distance_table().to_csv().as_bytes())?;
    manifest.output(&table_path)?;

    let transfer = experiment::run_transfer(config.clone())?;
    let averaging = experiment::run_task_averaging(config)?;
    for (name, c) in transfer.adapters.iter().chain(&averaging.adapters) {
        let p = a.out.join(format!("{name}.ckpt"));
        write_checkpoint(c, &p)?;
        manifest.output(&p)?;
    }

    let mut csv = String::from("experiment,method,lambda,target_xent,target_language_rate\n");
    let mut row = |exp: &str, method: &str, lambda: Option<f64>, xent: f64, rate: f64| {
        let l = lambda.map_or(String::new(), |l| l.to_string());
        writeln!(csv, "{exp},{method},{l},{xent:.6},{rate:.6}")
    };
    row("transfer", "task_only", None, transfer.xent_task_only, transfer.rate_task_only)?;
    row("transfer", "add", Some(transfer.lambda_add), transfer.xent_add, transfer.rate_add)?;
    row("transfer", "add_subtract", Some(transfer.lambda_add_subtract), transfer.xent_add_subtract, transfer.rate_add_subtract)?;
    row("averaging", "task_add_all", None, averaging.xent_all, averaging.rate_all)?;
    row("averaging", "task_add_related", None, averaging.xent_related, averaging.rate_related)?;
    let cmp_path = a.out.join("comparison.csv");
    write_atomic(&cmp_path, csv.as_bytes())?;
    manifest.output(&cmp_path)?;
    manifest.write(&a.out.join("manifest.txt"))?;
    print!("{csv}");
    println!("related to {}: {}", experiment::TARGET, averaging.selected.join(","));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated(_)
                | Error::Consistency(_)
                | Error::Parse(_) => EXIT_IO,
                Error::Incompatible(_) | Error::ShapeMismatch { .. } => EXIT_INCOMPATIBLE,
                Error::InvalidArgument(_) | Error::UnknownLanguage(_) | Error::NonFinite(_) => EXIT_USAGE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitBase(a) => cmd_init_base(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Select(a) => cmd_select(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use trainperf::dataset::{
    default_batch_sizes, generate_plan, load_dataset, materialize_variant, test_levels, train_levels, write_dataset,
    Attribute, NetworkLibrary,
};
use trainperf::features::{extract_features, FeatureMode, FeatureRowKey, FeatureSchema, WinogradLayout};
use trainperf::forest::{ForestConfig, MaxFeatures};
use trainperf::network::{parse_network, prune_network, to_json, zoo, NetworkSpec, PruneConfig, PruneStrategy};
use trainperf::predictor::{evaluate, predict_attributes, train_models, AttributeModelSet, AttributePredictor};
use trainperf::search::{estimate_search_cost, evolve, Constraints, EsConfig, Knob, ParameterCount, SearchSpace};
use trainperf::synthetic::SyntheticDevice;

#[derive(Parser)]
#[command(name = "trainperf", version, about = "Predict CNN training memory and latency from analytical features")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Progress diagnostics on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Feature vectors of a network at one or more batch sizes.
    Features(FeaturesArgs),
    /// Profiling plan for the measurement harness.
    Plan(PlanArgs),
    /// Prune a network and print the resulting network JSON.
    Prune(PruneArgs),
    /// Fit a forest for one attribute.
    Train(TrainArgs),
    /// Predict attributes of a network.
    Predict(PredictArgs),
    /// Percentage errors of models on a test dataset.
    Evaluate(EvaluateArgs),
    /// Constrained evolutionary search over a sub-network space.
    Search(SearchArgs),
    /// Labelled synthetic dataset (test data, not a real device).
    Synth(SynthArgs),
}

/// Networks are file paths, or `zoo:NAME` for a bundled network.
#[derive(Args)]
struct NetworkList {
    #[arg(long = "network", required = true, value_name = "NETWORK")]
    networks: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Training,
    Inference,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Summed,
    Split,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Network file or `zoo:NAME`.
    network: String,
    #[arg(long, required = true, value_delimiter = ',')]
    bs: Vec<u32>,
    #[arg(long, value_enum, default_value_t = Mode::Training)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Layout::Summed)]
    winograd: Layout,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("levels").required(true).multiple(true).args(["train_levels", "test_levels"])))]
struct PlanArgs {
    #[command(flatten)]
    networks: NetworkList,
    /// `default` or a comma-separated list.
    #[arg(long)]
    train_levels: Option<String>,
    /// `default` or a comma-separated list.
    #[arg(long)]
    test_levels: Option<String>,
    /// `default` or a comma-separated list.
    #[arg(long, default_value = "default")]
    batch_sizes: String,
    #[arg(long, value_delimiter = ',', default_value = "random")]
    strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Also write each pruned variant as `<variant>.json` here.
    #[arg(long)]
    variants_dir: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    network: String,
    /// Percent of filters removed, in [0, 100).
    #[arg(long)]
    level: f64,
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_samples_leaf: usize,
    /// `all`, `sqrt`, or a fraction in (0, 1].
    #[arg(long, default_value = "all")]
    max_features: String,
    #[arg(long)]
    no_bootstrap: bool,
    /// Fit the logarithm of the target.
    #[arg(long)]
    log_target: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    networks: NetworkList,
    /// Γ, Φ, γ, φ or a dataset column name.
    #[arg(long)]
    attr: String,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct Predictors {
    #[arg(long = "model", value_name = "FILE", required_unless_present = "synthetic")]
    models: Vec<PathBuf>,
    /// Use the noise-free synthetic device instead of model files.
    #[arg(long, conflicts_with = "models")]
    synthetic: bool,
}

#[derive(Args)]
struct PredictArgs {
    network: String,
    #[command(flatten)]
    predictors: Predictors,
    #[arg(long)]
    bs: u32,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long = "model", value_name = "FILE", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    networks: NetworkList,
    /// Write per-record errors as CSV.
    #[arg(long)]
    errors_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Search space JSON: `{"network": ..., "knobs": [...]}`.
    space: PathBuf,
    #[command(flatten)]
    predictors: Predictors,
    #[arg(long)]
    max_gamma_mb: Option<f64>,
    #[arg(long)]
    max_small_gamma_mb: Option<f64>,
    #[arg(long)]
    max_small_phi_ms: Option<f64>,
    /// Batch size at which training memory is constrained.
    #[arg(long, default_value_t = 32)]
    training_bs: u32,
    #[arg(long, default_value_t = 100)]
    population: usize,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    mutation_rate: f64,
    #[arg(long, default_value_t = 0.25)]
    parent_fraction: f64,
    /// Per-iteration JSON-lines log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    networks: NetworkList,
    /// `train`, `test`, or a comma-separated list.
    #[arg(long, default_value = "train")]
    levels: String,
    /// `default` or a comma-separated list.
    #[arg(long, default_value = "default")]
    batch_sizes: String,
    #[arg(long, value_delimiter = ',', default_value = "random")]
    strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.01)]
    noise_gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_phi: f64,
    /// Leave the inference columns empty.
    #[arg(long)]
    no_inference: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

struct Ctx {
    seed: u64,
    verbose: bool,
    format: Format,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let ctx = Ctx { seed: cli.seed, verbose: cli.verbose, format: cli.format };
    let result = match cli.command {
        Command::Features(a) => features(&ctx, a),
        Command::Plan(a) => plan(&ctx, a),
        Command::Prune(a) => prune(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Search(a) => search(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if ctx.format == Format::Json {
                eprintln!("{}", json!({ "error": format!("{e:#}") }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn load_network(arg: &str) -> Result<NetworkSpec> {
    if let Some(name) = arg.strip_prefix("zoo:") {
        return zoo::bundled(name).with_context(|| {
            format!("no bundled network {name:?} (have: {})", zoo::bundled_names().collect::<Vec<_>>().join(", "))
        });
    }
    let text = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
    parse_network(&text).with_context(|| format!("parsing {arg}"))
}

fn library(list: &NetworkList) -> Result<NetworkLibrary> {
    let nets = list.networks.iter().map(|n| load_network(n)).collect::<Result<Vec<_>>>()?;
    Ok(NetworkLibrary::new(nets)?)
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn json_bytes(value: &Value) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serialises");
    text.push('\n');
    text.into_bytes()
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} {s:?}: {e}")))
        .collect()
}

fn batch_sizes(text: &str) -> Result<Vec<u32>> {
    if text == "default" {
        Ok(default_batch_sizes())
    } else {
        parse_list(text, "batch size")
    }
}

fn features(ctx: &Ctx, a: FeaturesArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let mode = match a.mode {
        Mode::Training => FeatureMode::Training,
        Mode::Inference => FeatureMode::InferenceOnly,
    };
    let layout = match a.winograd {
        Layout::Summed => WinogradLayout::Summed,
        Layout::Split => WinogradLayout::Split,
    };
    let schema = FeatureSchema { mode, layout };
    let key = FeatureRowKey { network: net.name().to_string(), pruning_level: 0, strategy: "none".into(), seed: ctx.seed };
    let rows = a
        .bs
        .iter()
        .map(|&bs| Ok((key.clone(), extract_features::<f64>(&net, bs, schema)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = match ctx.format {
        Format::Text => {
            let mut buf = Vec::new();
            trainperf::features::write_feature_csv(&mut buf, schema, &rows)?;
            buf
        }
        Format::Json => json_bytes(&json!({
            "network": net.name(),
            "schema": schema.tag(),
            "columns": schema.names(),
            "rows": rows.iter().map(|(_, fv)| json!({ "bs": fv.bs(), "values": fv.values() })).collect::<Vec<_>>(),
        })),
    };
    emit(a.output.as_deref(), &bytes)
}

fn plan(ctx: &Ctx, a: PlanArgs) -> Result<()> {
    let levels_of = |arg: &Option<String>, default: fn() -> Vec<u32>| -> Result<Vec<u32>> {
        match arg.as_deref() {
            None => Ok(Vec::new()),
            Some("default") => Ok(default()),
            Some(list) => parse_list(list, "pruning level"),
        }
    };
    let mut levels = levels_of(&a.train_levels, train_levels)?;
    levels.extend(levels_of(&a.test_levels, test_levels)?);
    let nets = a.networks.networks.iter().map(|n| load_network(n)).collect::<Result<Vec<_>>>()?;
    let plan = generate_plan(&nets, &levels, &a.strategies, &a.seeds, &batch_sizes(&a.batch_sizes)?)?;
    ctx.note(format!("{} plan entries, {} variants", plan.len(), plan.variants().len()));

    if let Some(dir) = &a.variants_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for key in plan.variants() {
            let base = nets.iter().find(|n| n.name() == key.network).expect("plan networks come from nets");
            let variant = materialize_variant(base, &key)?;
            let path = dir.join(format!("{}.json", key.variant_id()));
            fs::write(&path, to_json(&variant)).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let bytes = match ctx.format {
        Format::Text => {
            let mut buf = Vec::new();
            plan.write_csv(&mut buf)?;
            buf
        }
        Format::Json => json_bytes(&json!({
            "entries": plan.entries().iter().map(|k| json!({
                "network": k.network, "pruning_level": k.pruning_level, "strategy": k.strategy,
                "seed": k.seed, "bs": k.bs, "variant": k.variant_id(),
            })).collect::<Vec<_>>(),
        })),
    };
    emit(a.output.as_deref(), &bytes)
}

fn prune(ctx: &Ctx, a: PruneArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let strategy = PruneStrategy::from_tag(&a.strategy, &net)?;
    let pruned = prune_network(&net, &PruneConfig { level: a.level, strategy, seed: ctx.seed })?;
    ctx.note(format!("weights {} -> {}", net.weight_count(), pruned.weight_count()));
    let mut text = to_json(&pruned);
    text.push('\n');
    emit(a.output.as_deref(), text.as_bytes())
}

fn forest_config(ctx: &Ctx, f: &ForestArgs) -> Result<ForestConfig> {
    let features_per_split = match f.max_features.as_str() {
        "all" => MaxFeatures::All,
        "sqrt" => MaxFeatures::Sqrt,
        other => MaxFeatures::Fraction(other.parse().with_context(|| format!("bad --max-features {other:?}"))?),
    };
    let cfg = ForestConfig {
        n_trees: f.trees,
        max_depth: f.max_depth,
        min_samples_leaf: f.min_samples_leaf,
        features_per_split,
        bootstrap: !f.no_bootstrap,
        seed: ctx.seed,
        log_target: f.log_target,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let attribute: Attribute = a.attr.parse().map_err(anyhow::Error::msg)?;
    let config = forest_config(ctx, &a.forest)?;
    let lib = library(&a.networks)?;
    let records = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    ctx.note(format!("{} records, fitting {} trees for {attribute}", records.len(), config.n_trees));
    let models = train_models(&records, &lib, &[attribute], &config)?;
    let forest = models.get(attribute).expect("trained attribute present");
    forest.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;

    let mut importance: Vec<(String, f64)> = forest.feature_importance().into_iter().collect();
    importance.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    importance.truncate(5);
    let (lo, hi) = forest.target_range();
    match ctx.format {
        Format::Text => {
            let mut s = format!("{} -> {}\ntarget range {lo} .. {hi}\ntop features:\n", attribute, a.output.display());
            for (name, v) in &importance {
                s += &format!("  {name}\t{v:.4}\n");
            }
            emit(None, s.as_bytes())
        }
        Format::Json => emit(
            None,
            &json_bytes(&json!({
                "attribute": attribute.column(),
                "model": a.output.display().to_string(),
                "target_range": [lo, hi],
                "top_features": importance,
            })),
        ),
    }
}

fn predictor(p: &Predictors) -> Result<Box<dyn AttributePredictor>> {
    if p.synthetic {
        Ok(Box::new(SyntheticDevice::default()))
    } else {
        Ok(Box::new(AttributeModelSet::load_files(&p.models)?))
    }
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Result<()> {
    let net = load_network(&a.network)?;
    let predictor = predictor(&a.predictors)?;
    let values = predict_attributes(predictor.as_ref(), &net, a.bs)?;
    match ctx.format {
        Format::Text => {
            let s: String = values.iter().map(|(k, v)| format!("{}\t{v}\n", k.column())).collect();
            emit(None, s.as_bytes())
        }
        Format::Json => {
            let map: BTreeMap<&str, f64> = values.iter().map(|(k, v)| (k.column(), *v)).collect();
            emit(None, &json_bytes(&json!({ "network": net.name(), "bs": a.bs, "predictions": map })))
        }
    }
}

fn evaluate_cmd(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let models = AttributeModelSet::load_files(&a.models)?;
    let lib = library(&a.networks)?;
    let records = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let report = evaluate(&models, &records, &lib)?;
    if let Some(path) = &a.errors_csv {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        report.write_errors_csv(file)?;
    }
    match ctx.format {
        Format::Json => emit(None, &json_bytes(&report.summary_json())),
        Format::Text => {
            let mut s = String::new();
            for (attribute, r) in &report.attributes {
                s += &format!("{attribute}\tmean APE {:.3}%\t({} records)\n", r.mean_ape, r.count);
                for (level, v) in &r.by_level {
                    s += &format!("  level {level:>3}\t{v:.3}%\n");
                }
            }
            emit(None, s.as_bytes())
        }
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    /// Network file, relative to the space file, or `zoo:NAME`.
    network: String,
    knobs: Vec<Knob>,
}

fn search(ctx: &Ctx, a: SearchArgs) -> Result<()> {
    let text = fs::read_to_string(&a.space).with_context(|| format!("reading {}", a.space.display()))?;
    let doc: SpaceFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.space.display()))?;
    let network = if doc.network.starts_with("zoo:") {
        doc.network.clone()
    } else {
        a.space.parent().unwrap_or(Path::new("")).join(&doc.network).display().to_string()
    };
    let space = SearchSpace::new(load_network(&network)?, doc.knobs)?;
    let predictor = predictor(&a.predictors)?;
    let constraints = Constraints {
        max_gamma_mb: a.max_gamma_mb,
        max_small_gamma_mb: a.max_small_gamma_mb,
        max_small_phi_ms: a.max_small_phi_ms,
        training_bs: a.training_bs,
    };
    let config = EsConfig {
        population: a.population,
        iterations: a.iterations,
        mutation_rate: a.mutation_rate,
        parent_fraction: a.parent_fraction,
        seed: ctx.seed,
        ..EsConfig::default()
    };
    ctx.note(format!("space of {} candidates", space.size()));
    let outcome = evolve(&space, &constraints, predictor.as_ref(), &ParameterCount, &config)?;
    if let Some(path) = &a.log {
        let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        outcome.write_log(io::BufWriter::new(file))?;
    }
    let net = space.decode(&outcome.best.encoding)?;
    let predictions = predict_attributes(predictor.as_ref(), &net, a.training_bs)?;
    let choices: BTreeMap<&str, usize> =
        space.knobs().iter().zip(&outcome.best.encoding).map(|(k, &c)| (k.name(), c)).collect();
    match ctx.format {
        Format::Json => emit(
            None,
            &json_bytes(&json!({
                "encoding": outcome.best.encoding,
                "choices": choices,
                "fitness": outcome.best.fitness,
                "fitness_kind": "weight parameter count (proxy, not accuracy)",
                "evaluated": outcome.evaluated_total,
                "rejected": outcome.rejected_total,
                "predictions_at_training_bs": predictions.iter().map(|(k, v)| (k.column(), *v)).collect::<BTreeMap<_, _>>(),
                "network": serde_json::from_str::<Value>(&to_json(&net))?,
            })),
        ),
        Format::Text => {
            let mut s = format!(
                "best {:?}\nweight parameters {}\nevaluated {} candidates ({} rejected), ~{:.0} s at 0.1 s each\n",
                outcome.best.encoding,
                outcome.best.fitness,
                outcome.evaluated_total,
                outcome.rejected_total,
                estimate_search_cost(outcome.evaluated_total, 0.1)
            );
            for (name, c) in choices {
                s += &format!("  {name} = choice {c}\n");
            }
            emit(None, s.as_bytes())
        }
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let levels = match a.levels.as_str() {
        "train" => train_levels(),
        "test" => test_levels(),
        list => parse_list(list, "pruning level")?,
    };
    let nets = a.networks.networks.iter().map(|n| load_network(n)).collect::<Result<Vec<_>>>()?;
    let lib = NetworkLibrary::new(nets.clone())?;
    let plan = generate_plan(&nets, &levels, &a.strategies, &a.seeds, &batch_sizes(&a.batch_sizes)?)?;
    let device = SyntheticDevice { seed: ctx.seed, inference: !a.no_inference, ..SyntheticDevice::default() }
        .with_noise(Attribute::Gamma, a.noise_gamma)
        .with_noise(Attribute::Phi, a.noise_phi);
    ctx.note(format!("synthesising {} records", plan.len()));
    let records = device.run_plan(&plan, &lib)?;
    let bytes = match ctx.format {
        Format::Text => {
            let mut buf = Vec::new();
            write_dataset(&mut buf, &records)?;
            buf
        }
        Format::Json => json_bytes(&json!({ "synthetic": true, "records": records })),
    };
    emit(a.output.as_deref(), &bytes)
}

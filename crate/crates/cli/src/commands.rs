use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use xpert_core::analysis::{grassmann_distance, projection_energy, propagation_demo, relative_performance, MetricSet};
use xpert_core::masking::{global_prune, rowwise_prune_with, sparsity_of};
use xpert_core::pbs::{pbs_correct_with, PbsOptions};
use xpert_core::scoring::score_layer;
use xpert_core::trainer::{efficientxpert_run_output, wanda_baseline_run_output, RunOutput};
use xpert_core::{forward, Criterion, Parallelism, RunRecord, ScoreMatrix};

use crate::config::{toolkit_version, Method, PhaseTiming, RunConfig, RunManifest};
use crate::container::{Container, Tensor};
use crate::model_io::{model_from_container, model_to_container, per_layer, tensor_name};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "xpert", version, about = "Propagation-aware pruning with closed-form adapter correction")]
pub struct Cli {
    /// Worker threads; 1 is the bitwise reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Foresight,
    Wanda,
    Magnitude,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Foresight => Criterion::Foresight,
            CriterionArg::Wanda => Criterion::Wanda,
            CriterionArg::Magnitude => Criterion::Magnitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BudgetArg {
    Row,
    Global,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-layer example where equal local losses hide very different downstream losses.
    Demo,
    /// Generate a toy student model and calibration batch from a config.
    Toy(ToyArgs),
    /// Score every prunable layer of a model.
    Score(ScoreArgs),
    /// Turn scores into binary masks.
    Prune(PruneArgs),
    /// Closed-form adapter correction for a model and mask.
    Pbs(PbsArgs),
    /// Full pruning run (or the Wanda baseline) from a config file.
    Run(RunArgs),
    /// Subspace and relative-performance analytics.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `student.xptc` and `calibration.xptc`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Container with a `calibration` tensor (tokens × input width).
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long, value_enum, default_value_t = CriterionArg::Foresight)]
    pub criterion: CriterionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[arg(long, value_enum, default_value_t = BudgetArg::Row)]
    pub budget: BudgetArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PbsArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = xpert_core::pbs::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Solve against the raw `A` instead of `scale · A`.
    #[arg(long)]
    pub unscaled: bool,
    /// Output container of `layer.<i>.delta_b` updates.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the corrected model, with masks attached.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run with the config recorded in an earlier manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub ema: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Sets both the training and the task seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_pbs: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Distance between the adapter subspaces of two model containers.
    Grassmann {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Share of adapter energy inside the base weight's top right-singular span.
    Projection {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Relative performance from two JSON files mapping metric group to values.
    Relperf {
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        dense: PathBuf,
    },
}

/// Text and JSON renderings of one command's result.
struct Output {
    text: String,
    json: serde_json::Value,
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let par = if cli.threads == 1 {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cli.threads)))?;
    let result = pool.install(|| dispatch(cli, par))?;
    let rendered = match cli.format {
        Format::Text => result.text,
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&result.json).expect("json value")),
    };
    out.write_all(rendered.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn dispatch(cli: &Cli, par: Parallelism) -> Result<Output, CliError> {
    match &cli.command {
        Command::Demo => demo(),
        Command::Toy(a) => toy(a),
        Command::Score(a) => score(a, par),
        Command::Prune(a) => prune(a, par),
        Command::Pbs(a) => pbs(a, par),
        Command::Run(a) => run(a, par, cli.threads),
        Command::Analyze { what } => analyze(what),
    }
}

fn demo() -> Result<Output, CliError> {
    let report = propagation_demo();
    Ok(Output {
        text: report.to_text(),
        json: serde_json::to_value(&report).expect("report serialises"),
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn toy(args: &ToyArgs) -> Result<Output, CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    let problem = config.generate()?;
    ensure_dir(&args.out)?;
    let student = args.out.join("student.xptc");
    let calibration = args.out.join("calibration.xptc");
    model_to_container(&problem.student).write(&student)?;
    let mut calib = Container::new();
    calib.insert("calibration", Tensor::f64(problem.data.calibration.clone()));
    calib.write(&calibration)?;
    let layers = problem.student.num_layers();
    Ok(Output {
        text: format!("wrote {} ({layers} layers) and {}\n", student.display(), calibration.display()),
        json: json!({ "student": student, "calibration": calibration, "layers": layers }),
    })
}

fn score(args: &ScoreArgs, par: Parallelism) -> Result<Output, CliError> {
    let model = model_from_container(&Container::read(&args.weights)?)?;
    let calibration = Container::read(&args.calibration)?.get("calibration")?.clone();
    let criterion: Criterion = args.criterion.into();
    let (_, stats) = forward(&model, &calibration)?;
    let mut c = Container::new();
    c.metadata.insert("criterion".into(), format!("{criterion:?}").to_lowercase());
    let mut text = String::new();
    let mut layers = Vec::new();
    for l in model.prunable_layers() {
        let scores = score_layer(&model, l, &stats, criterion, par).map_err(|e| e.context(format!("layer {l}")))?;
        let (m, n) = scores.shape();
        let _ = writeln!(text, "layer {l}: {m}x{n} {} scores", c.metadata["criterion"]);
        layers.push(json!({ "layer": l, "rows": m, "cols": n }));
        c.insert(tensor_name(l, "scores"), Tensor::f64(scores.into_matrix()));
    }
    c.write(&args.out)?;
    Ok(Output {
        text,
        json: json!({ "criterion": c.metadata["criterion"], "layers": layers, "out": args.out }),
    })
}

fn parse_criterion(name: Option<&String>) -> Criterion {
    match name.map(String::as_str) {
        Some("wanda") => Criterion::Wanda,
        Some("magnitude") => Criterion::Magnitude,
        _ => Criterion::Foresight,
    }
}

fn prune(args: &PruneArgs, par: Parallelism) -> Result<Output, CliError> {
    let input = Container::read(&args.scores)?;
    let criterion = parse_criterion(input.metadata.get("criterion"));
    let scores = per_layer(&input, "scores")?;
    if scores.is_empty() {
        return Err(CliError::Usage(format!("{} holds no layer.<i>.scores tensors", args.scores.display())));
    }
    let mut c = Container::new();
    let mut text = String::new();
    let mut layers = Vec::new();
    for (l, s) in scores {
        let s = ScoreMatrix::new(s, criterion).map_err(|e| e.context(format!("layer {l}")))?;
        let mask = match args.budget {
            BudgetArg::Row => rowwise_prune_with(&s, args.sparsity, par),
            BudgetArg::Global => global_prune(&s, args.sparsity),
        }
        .map_err(|e| e.context(format!("layer {l}")))?;
        let sparsity = sparsity_of(&mask)?;
        let _ = writeln!(text, "layer {l}: sparsity {sparsity:.4}");
        layers.push(json!({ "layer": l, "sparsity": sparsity }));
        c.insert(tensor_name(l, "mask"), Tensor::mask(mask));
    }
    c.write(&args.out)?;
    Ok(Output {
        text,
        json: json!({ "layers": layers, "out": args.out }),
    })
}

fn pbs(args: &PbsArgs, par: Parallelism) -> Result<Output, CliError> {
    let mut model = model_from_container(&Container::read(&args.weights)?)?;
    let masks = per_layer(&Container::read(&args.mask)?, "mask")?;
    if masks.is_empty() {
        return Err(CliError::Usage(format!("{} holds no layer.<i>.mask tensors", args.mask.display())));
    }
    let options = PbsOptions {
        lambda: args.lambda,
        scale_adapter: !args.unscaled,
    };
    let mut deltas = Container::new();
    let mut text = String::new();
    let mut reports = BTreeMap::new();
    for (l, mask) in masks {
        if l >= model.num_layers() {
            return Err(CliError::Core(xpert_core::XpertError::InvalidModel(format!(
                "mask for layer {l} but the model has {} layers",
                model.num_layers()
            ))));
        }
        let (delta, report) =
            pbs_correct_with(model.layer(l), &mask, options, par).map_err(|e| e.context(format!("layer {l}")))?;
        let _ = writeln!(text, "layer {l}:");
        text.push_str(&report.to_text());
        let layer = model.layer_mut(l);
        let corrected = layer.adapter_b().add(&delta)?;
        layer.set_adapter_b(corrected)?;
        layer.set_mask(mask)?;
        deltas.insert(tensor_name(l, "delta_b"), Tensor::f64(delta));
        reports.insert(l, report);
    }
    deltas.write(&args.out)?;
    if let Some(path) = &args.model_out {
        model_to_container(&model).write(path)?;
    }
    Ok(Output {
        text,
        json: json!({ "lambda": args.lambda, "reports": reports, "out": args.out }),
    })
}

fn apply_overrides(config: &mut RunConfig, args: &RunArgs) {
    if let Some(m) = args.method {
        config.method = m;
    }
    if let Some(s) = args.sparsity {
        config.prune.sparsity = s;
    }
    if let Some(c) = args.criterion {
        config.prune.criterion = c.into();
    }
    if let Some(l) = args.lambda {
        config.prune.lambda = l;
    }
    if let Some(e) = args.ema {
        config.prune.ema_rate = e;
    }
    if let Some(t) = args.epochs {
        config.prune.epochs = t;
    }
    if let Some(lr) = args.learning_rate {
        config.prune.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if args.no_pbs {
        config.prune.pbs_enabled = false;
    }
}

pub fn record_text(record: &RunRecord) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "method {} ({:?})", record.method, record.criterion);
    let _ = writeln!(
        t,
        "{:>5} {:>12} {:>8} {:>6} {:>14} {:>14} {:>12}",
        "epoch", "train_loss", "churn", "layer", "violation", "after_pbs", "over_rows"
    );
    for e in &record.epochs {
        for (k, l) in e.layers.iter().enumerate() {
            let (epoch, loss, churn) = if k == 0 {
                (e.epoch.to_string(), format!("{:.6}", e.train_loss), format!("{:.4}", e.mask_churn))
            } else {
                (String::new(), String::new(), String::new())
            };
            let after = l.residual_after_pbs.map_or("-".to_string(), |v| format!("{v:.6e}"));
            let _ = writeln!(
                t,
                "{epoch:>5} {loss:>12} {churn:>8} {:>6} {:>14.6e} {after:>14} {:>12}",
                l.layer, l.violation_mass, l.over_constrained_rows
            );
        }
    }
    for (l, s) in &record.final_sparsity {
        let _ = writeln!(t, "layer {l}: final sparsity {s:.4}");
    }
    let _ = writeln!(t, "held-out loss {:.6} (unpruned merge {:.6})", record.heldout.loss, record.dense_heldout.loss);
    if let (Some(a), Some(d)) = (record.heldout.accuracy, record.dense_heldout.accuracy) {
        let _ = writeln!(t, "held-out accuracy {a:.4} (unpruned merge {d:.4})");
    }
    t
}

fn run(args: &RunArgs, par: Parallelism, threads: usize) -> Result<Output, CliError> {
    let (mut config, input) = match (&args.manifest, &args.config) {
        (Some(m), _) => (RunManifest::load(m)?.config, Some(m.display().to_string())),
        (None, c) => (load_config(c.as_deref())?, c.as_ref().map(|p| p.display().to_string())),
    };
    apply_overrides(&mut config, args);
    config.validate()?;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |phase: &str, timings: &mut Vec<PhaseTiming>| {
        timings.push(PhaseTiming {
            phase: phase.to_string(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
    };

    let problem = config.generate()?;
    lap("generate", &mut timings);
    let RunOutput { merged, adapted, record } = match config.method {
        Method::Efficientxpert => efficientxpert_run_output(&problem.student, &problem.data, &config.prune, par)?,
        Method::WandaBaseline => wanda_baseline_run_output(&problem.student, &problem.data, &config.prune, par)?,
    };
    lap("train", &mut timings);

    ensure_dir(&args.out)?;
    let paths = ["model.xptc", "adapters.xptc", "record.json"].map(|f| args.out.join(f));
    model_to_container(&merged).write(&paths[0])?;
    model_to_container(&adapted).write(&paths[1])?;
    let record_json = serde_json::to_string_pretty(&record).expect("record serialises");
    std::fs::write(&paths[2], format!("{record_json}\n")).map_err(|e| CliError::io(&paths[2], e))?;
    lap("write", &mut timings);

    let manifest = RunManifest {
        toolkit: toolkit_version(),
        seed: config.prune.seed,
        config,
        input,
        outputs: paths.iter().map(|p| p.display().to_string()).collect(),
        threads,
        timings,
    };
    let manifest_path = args.out.join("manifest.json");
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&manifest_path, format!("{manifest_json}\n")).map_err(|e| CliError::io(&manifest_path, e))?;

    let mut text = record_text(&record);
    let _ = writeln!(text, "outputs in {}", args.out.display());
    Ok(Output {
        text,
        json: json!({ "record": record, "manifest": manifest_path }),
    })
}

fn selected(layers: Vec<usize>, pick: Option<usize>) -> Result<Vec<usize>, CliError> {
    match pick {
        None => Ok(layers),
        Some(l) if layers.contains(&l) => Ok(vec![l]),
        Some(l) => Err(CliError::Usage(format!("layer {l} not found (have {layers:?})"))),
    }
}

fn analyze(what: &AnalyzeCommand) -> Result<Output, CliError> {
    let mut text = String::new();
    let json = match what {
        AnalyzeCommand::Grassmann { a, b, rank, layer } => {
            let (ma, mb) = (
                model_from_container(&Container::read(a)?)?,
                model_from_container(&Container::read(b)?)?,
            );
            if ma.num_layers() != mb.num_layers() {
                return Err(CliError::Usage(format!(
                    "models have {} and {} layers",
                    ma.num_layers(),
                    mb.num_layers()
                )));
            }
            let mut rows = Vec::new();
            for l in selected((0..ma.num_layers()).collect(), *layer)? {
                let d = grassmann_distance(&ma.layer(l).adapter_product(), &mb.layer(l).adapter_product(), *rank)
                    .map_err(|e| e.context(format!("layer {l}")))?;
                let _ = writeln!(text, "layer {l}: grassmann distance {d:.6}");
                rows.push(json!({ "layer": l, "distance": d }));
            }
            json!({ "rank": rank, "layers": rows })
        }
        AnalyzeCommand::Projection { weights, rank, layer } => {
            let model = model_from_container(&Container::read(weights)?)?;
            let mut rows = Vec::new();
            for l in selected((0..model.num_layers()).collect(), *layer)? {
                let lay = model.layer(l);
                let e = projection_energy(&lay.adapter_product(), lay.base_w(), *rank)
                    .map_err(|e| e.context(format!("layer {l}")))?;
                let _ = writeln!(text, "layer {l}: projection energy {:.6}", e.energy);
                if let Some(w) = &e.warning {
                    let _ = writeln!(text, "  warning: {w}");
                }
                rows.push(json!({ "layer": l, "energy": e.energy, "warning": e.warning }));
            }
            json!({ "rank": rank, "layers": rows })
        }
        AnalyzeCommand::Relperf { pruned, dense } => {
            let read = |p: &Path| -> Result<MetricSet, CliError> {
                let s = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&s).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            };
            let rel = relative_performance(&read(pruned)?, &read(dense)?)?;
            let _ = writeln!(text, "relative performance {rel:.2}%");
            json!({ "relative_performance": rel })
        }
    };
    Ok(Output { text, json })
}

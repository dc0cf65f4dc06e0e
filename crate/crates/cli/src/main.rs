use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use imsty::data::{Domain, DomainBatch};
use imsty::experiment::{self, DataConfig, DatasetSpec, ExperimentConfig};
use imsty::models::{zoo, LayerGraph};
use imsty::profiler;
use imsty::teacher::{Method, Task};

/// Exit code for bad input: unreadable or invalid configs, specs and graphs.
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(name = "imsty", version, about = "Domain adaptation by feature-statistic swapping in a mean teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Pose,
}

impl TaskArg {
    fn task(self) -> Task {
        match self {
            TaskArg::Classification => Task::Classification { classes: 10 },
            TaskArg::Pose => Task::Pose { joints: 4, width: 16 },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    SourceOnly,
    MeanTeacherNoStyle,
    Imsty,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::SourceOnly => Method::SourceOnly,
            MethodArg::MeanTeacherNoStyle => Method::MeanTeacherNoStyle,
            MethodArg::Imsty => Method::Imsty,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Source,
    Target,
    Eval,
}

/// Config layering shared by every subcommand: file, then flags, then
/// `--set` overrides.
#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config or run manifest (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> imsty::Result<ExperimentConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| imsty::Error::Config {
                field: "--config".into(),
                msg: format!("{}: {e}", path.display()),
            })?,
            None => "{}".to_string(),
        };
        let mut overrides = Vec::new();
        if let Some(t) = self.task {
            overrides.push(format!("task={}", serde_json::to_string(&t.task())?));
        }
        if let Some(m) = self.method {
            overrides.push(format!("method=\"{}\"", Method::from(m).as_str()));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        overrides.extend(self.set.iter().cloned());
        ExperimentConfig::from_json(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one method and write history, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `runs/<method>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A single dataset spec (JSON); replaces the configured splits.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
        #[arg(long, default_value_t = 0.05)]
        pck_threshold: f64,
        /// Directory for `metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and MAC counts of a built-in or text layer graph.
    Profile {
        /// Built-in graph name or path to a layer-graph text file.
        graph: String,
        /// Square input resolution to profile at.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Write tap features of source and target samples as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A single dataset spec (JSON) instead of the configured pair.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep every spatial position instead of channel means.
        #[arg(long)]
        full: bool,
    },
    /// Materialize the configured datasets with a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.downcast_ref::<imsty::Error>().is_some_and(imsty::Error::is_usage));
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("IMSTY_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).with_context(|| format!("IMSTY_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { cfg, out, quiet } => {
            let cfg = cfg.load()?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.method.as_str(), cfg.train.seed)));
            let metric = cfg.task.metric_name();
            let manifest = experiment::train(&cfg, &out, |row| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3} {:<10} loss {:.5} (sup {:.5} unsup {:.5}) beta {:.4} alpha {:.3} {metric} {:.4}",
                        row.epoch,
                        row.phase.as_str(),
                        row.loss_total,
                        row.loss_sup,
                        row.loss_unsup,
                        row.beta,
                        row.alpha_mean,
                        row.target_metric
                    );
                }
            })?;
            for (name, v) in &manifest.final_metrics {
                println!("{name} {v:.4}");
            }
            println!("checksum {}", manifest.model_checksum);
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            cfg,
            data,
            split,
            pck_threshold,
            out,
        } => {
            let net = experiment::load_network(&checkpoint)?;
            let task = experiment::infer_task(&net)?;
            let set = load_split(&cfg, data.as_deref(), split, &task)?;
            let report = experiment::evaluate_checkpoint(&net, &set, pck_threshold)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                experiment::write_atomic(&dir.join("metrics.csv"), report.to_csv().as_bytes())?;
            }
        }
        Command::Profile {
            graph,
            resolution,
            batch,
            csv,
        } => {
            let mut g = load_graph(&graph)?;
            if let Some(r) = resolution {
                g = profiler::at_resolution(&g, r)?;
            }
            let report = profiler::cost_report(&g, batch)?;
            print!("{}", if csv { report.to_csv() } else { report.to_text() });
        }
        Command::ExportFeatures {
            checkpoint,
            cfg,
            data,
            out,
            full,
        } => {
            let net = experiment::load_network(&checkpoint)?;
            let task = experiment::infer_task(&net)?;
            let sets = match data {
                Some(path) => vec![read_spec(&path)?.build(&task, Domain::Target)?],
                None => {
                    let d = data_config(&cfg, &task)?;
                    vec![d.source.build(&task, Domain::Source)?, d.target.build(&task, Domain::Target)?]
                }
            };
            let refs: Vec<&DomainBatch> = sets.iter().collect();
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let rows = profiler::export_features_to(&net, &refs, &out, full)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let manifest = experiment::gen_data(&cfg, &out)?;
            for s in &manifest.sets {
                println!("{:<7} {:>6} samples  {}", s.name, s.count, out.join(&s.dir).display());
            }
        }
    }
    Ok(())
}

/// The configured data with the task taken from the checkpoint.
fn data_config(args: &ConfigArgs, task: &Task) -> imsty::Result<DataConfig> {
    let mut cfg = args.load()?;
    if args.config.is_none() && args.task.is_none() {
        cfg.task = *task;
    }
    if cfg.task != *task {
        return Err(imsty::Error::Config {
            field: "task".into(),
            msg: format!("config is for {:?} but the checkpoint is {:?}", cfg.task, task),
        });
    }
    Ok(cfg.data())
}

fn load_split(args: &ConfigArgs, data: Option<&Path>, split: Split, task: &Task) -> anyhow::Result<DomainBatch> {
    if let Some(path) = data {
        return Ok(read_spec(path)?.build(task, Domain::Target)?);
    }
    let d = data_config(args, task)?;
    let batch = match split {
        Split::Source => d.source.build(task, Domain::Source)?,
        Split::Target => d.target.build(task, Domain::Target)?,
        Split::Eval => match &d.eval {
            Some(e) => e.build(task, Domain::Target)?,
            None => bail!("config has no eval set; pick --split source or target"),
        },
    };
    Ok(batch)
}

fn read_spec(path: &Path) -> imsty::Result<DatasetSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| imsty::Error::Config {
        field: "--data".into(),
        msg: format!("{}: {e}", path.display()),
    })?;
    let spec: DatasetSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

/// A built-in name, else a layer-graph file. Unreadable files are usage
/// errors like unparsable ones.
fn load_graph(name: &str) -> imsty::Result<LayerGraph> {
    if zoo::BUILTIN_NAMES.contains(&name) {
        return zoo::builtin(name);
    }
    let text = std::fs::read_to_string(name).map_err(|e| imsty::Error::Config {
        field: "graph".into(),
        msg: format!("`{name}` is neither a built-in ({}) nor a readable file: {e}", zoo::BUILTIN_NAMES.join(", ")),
    })?;
    LayerGraph::parse(&text)
}

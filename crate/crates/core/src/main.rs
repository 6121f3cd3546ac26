use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use afl_core::analysis::{greedy_select, interpolate_pair, mbc_cluster};
use afl_core::fusion::{lp_minimax_weights, merge_fullrank, merge_lowrank, EnsembleLevel, ErrorMatrix, SimplexWeights, WeightMode};
use afl_core::harness::{run_experiment, Cache, Experiment, ExperimentConfig, MethodName, Results, RESULTS_FILE};
use afl_core::routing::HcInit;
use afl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "afl", version, about = "Ensemble, merge and route low-rank adapter experts over a tiny causal LM")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; also holds the artifact cache unless AFL_CACHE_DIR is set.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MergeWeights {
    Uniform,
    GlobalSgd,
    LayerSgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnsembleWeights {
    Uniform,
    Sgd,
    Lp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Probability,
    Logit,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HcStart {
    Plain,
    Arrow,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate every task's train/val/test splits into <out>/tasks/.
    GenTasks,
    /// Pre-train the base model on the task mixture; writes <out>/base.afl.
    TrainBase,
    /// Train one expert per task; writes the library to <out>/experts/.
    TrainExperts,
    /// Train one expert on the task mixture; writes <out>/shared.afl.
    TrainShared,
    /// Merge the experts into one adapter.
    Merge {
        #[arg(long, value_enum, default_value = "uniform")]
        weights: MergeWeights,
        /// Merge dense updates instead of factors (uniform weights only).
        #[arg(long)]
        full_rank: bool,
    },
    /// Ensemble coefficients; writes <out>/ensemble_weights.json.
    Ensemble {
        #[arg(long, value_enum, default_value = "uniform")]
        weights: EnsembleWeights,
        #[arg(long, value_enum, default_value = "probability")]
        level: Level,
    },
    /// Train a per-site router over the experts; writes <out>/router.afl.
    Route,
    /// Zero-shot Arrow router; writes <out>/arrow_router.afl.
    ArrowInit {
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Hierarchical-cluster routing; writes <out>/hc/.
    HcRoute {
        #[arg(long, value_enum, default_value = "plain")]
        init: HcStart,
    },
    /// Minimax ensemble weights from an expert-by-task loss matrix.
    LpWeights {
        /// CSV with header `expert,<task>...`; computed from validation data when omitted.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Distill the best ensemble into one adapter; writes <out>/distilled.afl.
    Distill,
    /// Evaluate methods on the test split; writes <out>/eval/<method>.json.
    Eval {
        /// Method name; repeat for several. Defaults to the configured list.
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Linear interpolation between two experts; writes <out>/interp_<a>_<b>.csv.
    Interpolate {
        #[arg(long)]
        e1: usize,
        #[arg(long)]
        e2: usize,
        /// Number of evenly spaced weights including 0 and 1.
        #[arg(long)]
        points: Option<usize>,
    },
    /// Cluster experts by parameter similarity; writes <out>/clusters.json.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Greedy expert selection under task-level routing; writes <out>/selection.{csv,json}.
    SelectGreedy {
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Top-k calibration deltas of the Arrow and trained routers; writes <out>/calibration.json.
    Calibrate,
    /// Full experiment; writes <out>/results.json and CSVs.
    Run,
    /// Markdown summary of a results file; writes <out>/report.md.
    Report {
        /// Defaults to <out>/results.json.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Failure::Usage("this subcommand requires --config <FILE>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn experiment(common: &Common) -> std::result::Result<Experiment, Failure> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out).map_err(Error::from)?;
    Ok(Experiment::new(cfg, Cache::for_output(&common.out))?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn parse_method(name: &str) -> std::result::Result<MethodName, Failure> {
    MethodName::ALL.into_iter().find(|m| m.as_str() == name).ok_or_else(|| {
        let known: Vec<&str> = MethodName::ALL.iter().map(|m| m.as_str()).collect();
        Failure::Usage(format!("unknown method `{name}`; known methods: {}", known.join(", ")))
    })
}

fn error_matrix(common: &Common, path: &Option<PathBuf>) -> std::result::Result<ErrorMatrix, Failure> {
    match path {
        Some(p) => Ok(ErrorMatrix::read_csv(p)?),
        None => Ok(experiment(common)?.val_matrix()?.clone()),
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let common = &cli.common;
    let out = &common.out;
    match cli.command {
        Command::GenTasks => {
            let exp = experiment(common)?;
            exp.save_datasets(&out.join("tasks"))?;
        }
        Command::TrainBase => {
            let exp = experiment(common)?;
            let b = exp.base()?;
            b.value.save(&out.join("base.afl"))?;
            write_json(&out.join("base_train.json"), &b.meta)?;
        }
        Command::TrainExperts => {
            let exp = experiment(common)?;
            let lib = exp.library()?;
            lib.value.save(&out.join("experts"))?;
            write_json(&out.join("experts_train.json"), &lib.meta)?;
        }
        Command::TrainShared => {
            let exp = experiment(common)?;
            let s = exp.shared()?;
            s.value.save(&out.join("shared.afl"))?;
            write_json(&out.join("shared_train.json"), &s.meta)?;
        }
        Command::Merge { weights, full_rank } => {
            let exp = experiment(common)?;
            let lib = exp.agnostic()?;
            let w = match weights {
                MergeWeights::Uniform => SimplexWeights::uniform(lib.len(), WeightMode::Global, 1)?,
                MergeWeights::GlobalSgd => exp.sgd_merge(WeightMode::Global)?.clone(),
                MergeWeights::LayerSgd => exp.sgd_merge(WeightMode::PerLayer)?.clone(),
            };
            w.save(&out.join("merge_weights.json"))?;
            if full_rank {
                if !matches!(weights, MergeWeights::Uniform) {
                    return Err(Failure::Usage("--full-rank is only defined for uniform weights".into()));
                }
                merge_fullrank(lib, &w)?.save(&out.join("merged_dense.afl"))?;
            } else {
                merge_lowrank(lib, &w)?.save(&out.join("merged.afl"))?;
            }
        }
        Command::Ensemble { weights, level } => {
            let exp = experiment(common)?;
            let level = match level {
                Level::Probability => EnsembleLevel::Probability,
                Level::Logit => EnsembleLevel::Logit,
            };
            let w = match weights {
                EnsembleWeights::Uniform => exp.uniform_ensemble(level)?.weights,
                EnsembleWeights::Sgd => exp.sgd_ensemble()?.weights,
                EnsembleWeights::Lp => SimplexWeights::global(&exp.lp()?.lambda)?,
            };
            w.save(&out.join("ensemble_weights.json"))?;
        }
        Command::Route => {
            let exp = experiment(common)?;
            let fp = exp.base()?.value.fingerprint();
            exp.sgd_router()?.save(&out.join("router.afl"), fp)?;
        }
        Command::ArrowInit { top_k } => {
            let exp = experiment(common)?;
            let fp = exp.base()?.value.fingerprint();
            let n = exp.agnostic()?.len();
            if top_k.is_some_and(|k| k == 0 || k > n) {
                return Err(Failure::Usage(format!("--top-k must lie in 1..={n}")));
            }
            exp.arrow_router()?.with_top_k(top_k).save(&out.join("arrow_router.afl"), fp)?;
        }
        Command::HcRoute { init } => {
            let exp = experiment(common)?;
            let fp = exp.base()?.value.fingerprint();
            let init = match init {
                HcStart::Plain => HcInit::Plain,
                HcStart::Arrow => HcInit::Arrow,
            };
            exp.hc(init)?.save(&out.join("hc"), fp)?;
        }
        Command::LpWeights { matrix } => {
            let m = error_matrix(common, &matrix)?;
            let sol = lp_minimax_weights(&m)?;
            write_json(
                &out.join("lp_weights.json"),
                &serde_json::json!({
                    "experts": m.experts,
                    "lambda": sol.lambda,
                    "value": sol.value,
                    "support": sol.support,
                }),
            )?;
        }
        Command::Distill => {
            let exp = experiment(common)?;
            exp.distilled()?.save(&out.join("distilled.afl"))?;
        }
        Command::Eval { methods } => {
            let exp = experiment(common)?;
            let list = if methods.is_empty() {
                exp.config.methods.clone()
            } else {
                methods.iter().map(|m| parse_method(m)).collect::<std::result::Result<_, _>>()?
            };
            for m in list {
                let r = exp.evaluate(m)?;
                log::info!("{} = {:.4} ± {:.4}", r.method, r.mean, r.stderr);
                write_json(&out.join("eval").join(format!("{}.json", m.as_str())), &r)?;
            }
        }
        Command::Interpolate { e1, e2, points } => {
            let exp = experiment(common)?;
            let ds = exp.datasets()?;
            let lib = exp.agnostic()?;
            for e in [e1, e2] {
                if e >= lib.len() || e >= ds.len() {
                    return Err(Failure::Usage(format!("expert index {e} outside 0..{}", lib.len().min(ds.len()))));
                }
            }
            let n = points.unwrap_or(exp.config.analysis.interp_points);
            if n < 2 {
                return Err(Failure::Usage("--points must be at least 2".into()));
            }
            let alphas: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let (a, b) = (&ds[e1], &ds[e2]);
            let s = interpolate_pair(
                &exp.base()?.value,
                (&lib.names()[e1], &lib.names()[e2]),
                lib.get(e1),
                lib.get(e2),
                &alphas,
                &a.test,
                &b.test,
            )?;
            let path = out.join(format!("interp_{}_{}.csv", lib.names()[e1], lib.names()[e2]));
            s.write_csv(&path)?;
            log::info!("wrote {}", path.display());
        }
        Command::Cluster { k } => {
            let exp = experiment(common)?;
            let c = match k {
                None => exp.clusters()?.clone(),
                Some(k) => mbc_cluster(exp.agnostic()?, k, exp.config.analysis.cosine_basis)?,
            };
            write_json(&out.join("clusters.json"), &c)?;
        }
        Command::SelectGreedy { matrix, k_max } => {
            let m = error_matrix(common, &matrix)?;
            let curve = greedy_select(&m.values, k_max.unwrap_or(m.experts.len()))?;
            std::fs::create_dir_all(out).map_err(Error::from)?;
            curve.write_csv(&out.join("selection.csv"), None)?;
            curve.save(&out.join("selection.json"))?;
        }
        Command::Calibrate => {
            let exp = experiment(common)?;
            write_json(&out.join("calibration.json"), &exp.calibration()?)?;
        }
        Command::Run => {
            let exp = experiment(common)?;
            let r = run_experiment(&exp, out)?;
            log::info!(
                "wrote {} ({} methods; cache hits {}, misses {})",
                out.join(RESULTS_FILE).display(),
                r.methods.len(),
                exp.cache.hits(),
                exp.cache.misses()
            );
        }
        Command::Report { results } => {
            let path = results.unwrap_or_else(|| out.join(RESULTS_FILE));
            let r = Results::load(&path)?;
            std::fs::create_dir_all(out).map_err(Error::from)?;
            std::fs::write(out.join("report.md"), r.report()).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            use clap::CommandFactory;
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

//! The full experiment run and its `results.json`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{greedy_select, interpolate_pair, rank_check, ClusterAssignment, EvalReport, InterpolationSweep};
use crate::error::{Error, Result};
use crate::fusion::{worst_case, ErrorMatrix, MinimaxSolution};
use crate::harness::config::{MethodName, SCHEMA_VERSION};
use crate::harness::experiment::{Calibration, Experiment};
use crate::harness::stages::TrainDiag;

pub const RESULTS_FILE: &str = "results.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    pub mean_loss: f64,
    pub stderr: f64,
    pub per_task: BTreeMap<String, f64>,
}

impl From<&EvalReport> for MethodResult {
    fn from(r: &EvalReport) -> Self {
        Self {
            name: r.method.clone(),
            mean_loss: r.mean,
            stderr: r.stderr,
            per_task: r.tasks.iter().cloned().zip(r.per_task.iter().copied()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub tasks: (String, String),
    pub alphas: Vec<f64>,
    pub combined: Vec<f64>,
    pub task1: Vec<f64>,
    pub task2: Vec<f64>,
    pub oracle_ref: f64,
    pub min_combined: f64,
    /// `min_combined − oracle_ref`; non-negative when the oracle beats every merge.
    pub margin: f64,
}

impl From<&InterpolationSweep> for SweepResult {
    fn from(s: &InterpolationSweep) -> Self {
        Self {
            tasks: s.experts.clone(),
            alphas: s.alphas.clone(),
            combined: s.combined.clone(),
            task1: s.task1.clone(),
            task2: s.task2.clone(),
            oracle_ref: s.oracle_ref,
            min_combined: s.min_combined(),
            margin: s.min_combined() - s.oracle_ref,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyCurve {
    pub selected: Vec<String>,
    pub validation: Vec<f64>,
    pub test: Vec<f64>,
    pub full_oracle_validation: f64,
    /// Smallest `k` whose validation value equals the full-library value.
    pub k_recovering_oracle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpResult {
    pub lambda: BTreeMap<String, f64>,
    pub value: f64,
    pub support: Vec<String>,
    pub uniform_worst_case: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub not_best_on_own_task: usize,
    pub experts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy: Option<GreedyCurve>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Calibration>,
}

/// Gaps behind the qualitative orderings; positive means the ordering holds strictly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Best of the compared non-oracle methods minus the oracle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_lead: Option<f64>,
    /// Uniform merging minus the worst of the other compared methods.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform_merge_deficit: Option<f64>,
    /// Uniform ensembling minus SGD routing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing_over_ensemble: Option<f64>,
    /// Arrow calibration delta minus the trained router's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_gap: Option<f64>,
    /// Interpolation pairs whose oracle reference is at most the curve minimum.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interpolation_pairs_oracle_wins: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub methods: Vec<MethodResult>,
    pub sweeps: Vec<SweepResult>,
    pub curves: Curves,
    pub deltas: Deltas,
    pub margins: Margins,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp: Option<LpResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_check: Option<RankCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<ClusterAssignment>,
    pub training: BTreeMap<String, TrainDiag>,
}

impl Results {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let r: Self = serde_json::from_str(&text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion(r.schema_version));
        }
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Markdown summary table.
    pub fn report(&self) -> String {
        let mut s = format!("# Results (config {})\n\n| method | mean loss | stderr |\n|---|---|---|\n", self.config_hash);
        let mut ms: Vec<&MethodResult> = self.methods.iter().collect();
        ms.sort_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss));
        for m in ms {
            s.push_str(&format!("| {} | {:.4} | {:.4} |\n", m.name, m.mean_loss, m.stderr));
        }
        if let Some(c) = &self.deltas.calibration {
            s.push_str(&format!(
                "\nTop-{} vs top-{} loss delta: Arrow {:.4}, SGD routing {:.4}\n",
                c.k_small, c.k_large, c.arrow, c.sgd_routing
            ));
        }
        for w in &self.sweeps {
            s.push_str(&format!(
                "\nInterpolation {}/{}: min over alpha {:.4}, oracle {:.4}\n",
                w.tasks.0, w.tasks.1, w.min_combined, w.oracle_ref
            ));
        }
        s
    }
}

/// Writes method summaries, per-task losses and the private/cluster comparison as CSV.
fn write_method_csvs(out: &Path, results: &Results) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("methods.csv"))?;
    w.write_record(["method", "mean_loss", "stderr"])?;
    for m in &results.methods {
        w.write_record([m.name.clone(), format!("{:?}", m.mean_loss), format!("{:?}", m.stderr)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("per_task.csv"))?;
    w.write_record(["method", "task", "loss"])?;
    for m in &results.methods {
        for (t, l) in &m.per_task {
            w.write_record([m.name.clone(), t.clone(), format!("{l:?}")])?;
        }
    }
    w.flush()?;
    let pairs = [
        ("oracle", "oracle", "mbc-oracle"),
        ("uniform-ensemble", "uniform-ensemble", "mbc-uniform-ensemble"),
        ("uniform-merge", "uniform-merge", "mbc-uniform-merge"),
        ("arrow-topk", "arrow-topk", "mbc-arrow"),
    ];
    let rows: Vec<_> = pairs
        .iter()
        .filter_map(|(label, p, c)| Some((label, results.method(p)?, results.method(c)?)))
        .collect();
    if !rows.is_empty() {
        let mut w = csv::Writer::from_path(out.join("private_vs_cluster.csv"))?;
        w.write_record(["approach", "private_mean", "private_stderr", "cluster_mean", "cluster_stderr"])?;
        for (label, p, c) in rows {
            w.write_record([
                label.to_string(),
                format!("{:?}", p.mean_loss),
                format!("{:?}", p.stderr),
                format!("{:?}", c.mean_loss),
                format!("{:?}", c.stderr),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn lp_result(m: &ErrorMatrix, sol: &MinimaxSolution) -> LpResult {
    let n = m.experts.len();
    LpResult {
        lambda: m.experts.iter().cloned().zip(sol.lambda.iter().copied()).collect(),
        value: sol.value,
        support: sol.support.iter().map(|&i| m.experts[i].clone()).collect(),
        uniform_worst_case: worst_case(&m.values, &vec![1.0 / n as f64; n]),
    }
}

fn compute_margins(r: &Results) -> Margins {
    let get = |n: MethodName| r.method(n.as_str()).map(|m| m.mean_loss);
    let five = [
        MethodName::Oracle,
        MethodName::SgdRouting,
        MethodName::SgdEnsemble,
        MethodName::UniformEnsemble,
        MethodName::UniformMerge,
    ];
    let vals: Option<Vec<f64>> = five.iter().map(|&n| get(n)).collect();
    let mut m = Margins::default();
    if let Some(v) = vals {
        m.oracle_lead = Some(v[1..].iter().copied().fold(f64::INFINITY, f64::min) - v[0]);
        m.uniform_merge_deficit = Some(v[4] - v[..4].iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    if let (Some(u), Some(s)) = (get(MethodName::UniformEnsemble), get(MethodName::SgdRouting)) {
        m.routing_over_ensemble = Some(u - s);
    }
    if let Some(c) = &r.deltas.calibration {
        m.calibration_gap = Some(c.arrow - c.sgd_routing);
    }
    if !r.sweeps.is_empty() {
        m.interpolation_pairs_oracle_wins = Some(r.sweeps.iter().filter(|s| s.oracle_ref <= s.min_combined).count());
    }
    m
}

/// Runs every configured method and analysis, writing CSVs as it goes and
/// `results.json` last.
pub fn run_experiment(exp: &Experiment, out: &Path) -> Result<Results> {
    std::fs::create_dir_all(out)?;
    let cfg = &exp.config;
    let started = Instant::now();
    let timed = |what: &str| log::info!("[{:7.1}s] {what}", started.elapsed().as_secs_f64());

    exp.base()?;
    timed("base ready");
    exp.library()?;
    timed("experts ready");

    let mut methods = Vec::new();
    std::fs::create_dir_all(out.join("eval"))?;
    for &m in &cfg.methods {
        let r = exp.evaluate(m)?;
        timed(&format!("{} = {:.4} ± {:.4}", r.method, r.mean, r.stderr));
        std::fs::write(out.join("eval").join(format!("{}.json", m.as_str())), serde_json::to_string_pretty(&r)?)?;
        methods.push(MethodResult::from(&r));
    }

    let base = &exp.base()?.value;
    let lib = exp.agnostic()?;
    let ds = exp.datasets()?;
    let mut sweeps = Vec::new();
    let alphas = cfg.interp_alphas();
    for &(i, j) in &cfg.analysis.interp_pairs {
        let (a, b) = (&ds[i], &ds[j]);
        let s = interpolate_pair(
            base,
            (&a.spec.name, &b.spec.name),
            lib.get(exp.oracle_mapping()?[i]),
            lib.get(exp.oracle_mapping()?[j]),
            &alphas,
            &a.test,
            &b.test,
        )
        .map_err(|e| e.at_step("interpolate"))?;
        s.write_csv(&out.join(format!("interp_{}_{}.csv", a.spec.name, b.spec.name)))?;
        sweeps.push(SweepResult::from(&s));
    }
    timed("interpolation sweeps done");

    let mval = exp.val_matrix()?;
    let mtest = exp.test_matrix()?;
    mval.write_csv(&out.join("error_matrix_val.csv"))?;
    mtest.write_csv(&out.join("error_matrix_test.csv"))?;
    let curve = greedy_select(&mval.values, mval.experts.len()).map_err(|e| e.at_step("select-greedy"))?;
    let test_curve = curve.rescore(&mtest.values);
    curve.write_csv(&out.join("selection.csv"), Some(("test_value", &test_curve)))?;
    let full = *curve.values.last().expect("non-empty curve");
    let greedy = GreedyCurve {
        selected: curve.selected.iter().map(|&i| mval.experts[i].clone()).collect(),
        validation: curve.values.clone(),
        test: test_curve,
        full_oracle_validation: full,
        k_recovering_oracle: curve.values.iter().position(|&v| v == full).map_or(0, |p| p + 1),
    };
    let lp = lp_result(mval, exp.lp()?);
    {
        let mut w = csv::Writer::from_path(out.join("lp_weights.csv"))?;
        w.write_record(["expert", "lambda"])?;
        for (e, l) in &lp.lambda {
            w.write_record([e.clone(), format!("{l:?}")])?;
        }
        w.flush()?;
    }
    let rank = RankCheck {
        not_best_on_own_task: rank_check(&mval.values)?,
        experts: mval.experts.len(),
    };
    timed("selection, LP and rank check done");

    let calibration = exp.calibration().map_err(|e| match e {
        Error::Step { .. } => e,
        other => other.at_step("calibrate"),
    })?;
    timed("calibration done");
    let clusters = exp.clusters()?.clone();
    std::fs::write(out.join("clusters.json"), serde_json::to_string_pretty(&clusters)?)?;

    let mut results = Results {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        methods,
        sweeps,
        curves: Curves { greedy: Some(greedy) },
        deltas: Deltas { calibration: Some(calibration) },
        margins: Margins::default(),
        lp: Some(lp),
        rank_check: Some(rank),
        clusters: Some(clusters),
        training: exp.training_diagnostics(),
    };
    results.margins = compute_margins(&results);
    write_method_csvs(out, &results)?;
    std::fs::write(out.join(RESULTS_FILE), results.to_json()?)?;
    timed("results written");
    Ok(results)
}

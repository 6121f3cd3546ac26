//! Acceptance criteria, one test each. Every test prints a `[PASS]` or `[FAIL]`
//! line with the measured quantity before asserting.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use afl_core::analysis::{combined_loss, full_oracle_value, greedy_select, interpolate_pair};
use afl_core::expert::{ExpertLibrary, LoraAdapter};
use afl_core::fusion::{
    ensemble_predict, lp_minimax_weights, merge_fullrank, merge_lowrank, teacher_targets, worst_case,
    EnsembleLevel, EnsembleObjective, EnsembleSpec, ErrorMatrix, ExpertOutputs, MergeObjective, SimplexLogits,
    SimplexWeights, WeightMode,
};
use afl_core::harness::{ExperimentConfig, Results, CACHE_ENV, RESULTS_FILE};
use afl_core::lm::{target_distributions, AdapterRef, BaseLm, Example, LmConfig};
use afl_core::numerics::{finite_diff_grad, relative_error, svd_top, Matrix, Params, Rng};
use afl_core::routing::{apply_topk, arrow_init, arrow_row, Router, RouterObjective, ScoreMode};
use afl_core::train::{AdapterObjective, Objective, Targets};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn tiny_base(seed: u64) -> BaseLm {
    BaseLm::build(
        LmConfig { vocab: 10, width: 8, layers: 2, heads: 2, ffn: 8, max_len: 12 },
        &mut Rng::new(seed),
    )
    .unwrap()
}

fn random_library(base: &BaseLm, n: usize, rank: usize, std: f64, seed: u64) -> ExpertLibrary {
    let mut rng = Rng::new(seed);
    let entries = (0..n)
        .map(|i| {
            let mut a = LoraAdapter::zeros(base, rank, 4.0 * rank as f64).unwrap();
            for v in a.blocks_mut().into_iter().flatten() {
                *v = std * rng.normal();
            }
            (format!("e{i}"), a)
        })
        .collect();
    ExpertLibrary::new(entries).unwrap()
}

fn random_example(rng: &mut Rng, vocab: usize, max_total: usize) -> Example {
    let n_in = rng.range_inclusive(1, max_total / 2);
    let n_out = rng.range_inclusive(1, max_total - n_in - 1);
    let tok = |rng: &mut Rng| 2 + rng.below(vocab - 2) as u32;
    let input = (0..n_in).map(|_| tok(rng)).collect();
    let target = (0..n_out).map(|_| tok(rng)).collect();
    Example::new(input, target)
}

fn on_simplex(lambda: &[f64]) -> bool {
    lambda.iter().all(|&l| l >= 0.0) && (lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

#[test]
fn simplex_integrity() {
    let start = Instant::now();
    let base = tiny_base(1);
    let lib = random_library(&base, 3, 2, 0.3, 2);
    let mut runner = TestRunner::new(Config::with_cases(1000));
    let strategy = (
        proptest::collection::vec(-40.0f64..40.0, 1..9),
        1usize..9,
        proptest::collection::vec(-5.0f64..5.0, 8),
        any::<u64>(),
    );
    let outcome = runner.run(&strategy, |(logits, k, h, seed)| {
        let n = logits.len();
        // ensembling and merging coefficients, global and per layer
        let g = SimplexWeights::from_logits(WeightMode::Global, Matrix::from_vec(1, n, logits.clone()).unwrap()).unwrap();
        prop_assert!(on_simplex(g.row_for_layer(0)));
        let two: Vec<f64> = logits.iter().chain(logits.iter().rev()).copied().collect();
        let pl = SimplexWeights::from_logits(WeightMode::PerLayer, Matrix::from_vec(2, n, two).unwrap()).unwrap();
        prop_assert!(on_simplex(pl.row_for_layer(0)) && on_simplex(pl.row_for_layer(1)));
        // top-k of those coefficients
        let kk = k.min(n);
        prop_assert!(on_simplex(&apply_topk(g.row_for_layer(0), kk).unwrap()));
        // router coefficients, both score modes, with and without top-k
        let mut rng = Rng::new(seed);
        for score in [ScoreMode::Plain, ScoreMode::Absolute] {
            let mut r = Router::zeros(1, n, 8, score);
            r.sites[0] = Matrix::from_fn(n, 8, |_, _| 3.0 * rng.normal());
            prop_assert!(on_simplex(&r.coeffs(0, &h).unwrap()));
            let r = r.with_top_k(Some(kk));
            prop_assert!(on_simplex(&r.coeffs(0, &h).unwrap()));
        }
        Ok(())
    });
    // coefficients recorded during a routed forward pass
    let mut rng = Rng::new(3);
    let mut routed_ok = true;
    for _ in 0..20 {
        let mut r = Router::zeros(base.num_sites(), 3, 8, ScoreMode::Plain).with_top_k(Some(2));
        for m in &mut r.sites {
            *m = Matrix::from_fn(3, 8, |_, _| rng.normal());
        }
        let ex = random_example(&mut rng, 10, 12);
        let tape = base
            .forward(&ex.to_batch().tokens, AdapterRef::Routed { experts: lib.adapters(), router: &r }, None)
            .unwrap();
        for s in 0..base.num_sites() {
            for t in 0..tape.len() {
                routed_ok &= tape.routing_coeffs(s, t).is_some_and(on_simplex);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = outcome.is_ok() && routed_ok && secs < 10.0;
    verdict("simplex integrity", ok, format!("1000 cases, {outcome:?}, routed tapes ok {routed_ok}, {secs:.2}s"));
}

#[test]
fn topk_identity() {
    let mut rng = Rng::new(5);
    let mut identity = true;
    for _ in 0..1000 {
        let n = rng.range_inclusive(1, 12);
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
        let z: f64 = raw.iter().sum();
        let lambda: Vec<f64> = raw.iter().map(|v| v / z).collect();
        identity &= apply_topk(&lambda, n).unwrap() == lambda;
    }
    let example = apply_topk(&[0.5, 0.3, 0.2], 2).unwrap();
    let ok = identity && example == vec![0.625, 0.375, 0.0];
    verdict("top-k identity", ok, format!("k=N identity {identity}, [0.5,0.3,0.2] k=2 -> {example:?}"));
}

#[test]
fn one_hot_reduction() {
    let base = BaseLm::build(LmConfig::default(), &mut Rng::new(0)).unwrap();
    let lib = random_library(&base, 3, 4, 0.1, 11);
    let n = lib.len();
    let mut rng = Rng::new(12);
    let mut worst: f64 = 0.0;
    let diff = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    };
    for batch in 0..100 {
        let ex = random_example(&mut rng, 29, 30);
        let k = batch % n;
        let want = target_distributions(&base, AdapterRef::Lora(lib.get(k)), &ex).unwrap();
        let w = SimplexWeights::one_hot(n, k).unwrap();
        for level in [EnsembleLevel::Probability, EnsembleLevel::Logit] {
            let spec = EnsembleSpec::new(w.clone(), level).unwrap();
            worst = worst.max(diff(&ensemble_predict(&base, &lib, &spec, &ex).unwrap(), &want));
        }
        let merged = merge_lowrank(&lib, &w).unwrap();
        worst = worst.max(diff(&target_distributions(&base, AdapterRef::Lora(&merged), &ex).unwrap(), &want));
        let dense = merge_fullrank(&lib, &w).unwrap();
        worst = worst.max(diff(&target_distributions(&base, AdapterRef::Dense(&dense), &ex).unwrap(), &want));
        // A zero router with top-1 selects the first expert at every token.
        let experts: Vec<LoraAdapter> = (0..n).map(|i| lib.get((k + i) % n).clone()).collect();
        let router = Router::zeros(base.num_sites(), n, base.config.width, ScoreMode::Plain).with_top_k(Some(1));
        let routed = target_distributions(&base, AdapterRef::Routed { experts: &experts, router: &router }, &ex).unwrap();
        worst = worst.max(diff(&routed, &want));
    }
    verdict("one-hot reduction", worst <= 1e-10, format!("max abs difference over 100 batches {worst:.3e}"));
}

#[test]
fn svd_and_arrow() {
    let mut rng = Rng::new(21);
    let mut recon: f64 = 0.0;
    for _ in 0..10 {
        let a = Matrix::from_fn(48, 4, |_, _| rng.normal());
        let b = Matrix::from_fn(4, 32, |_, _| rng.normal());
        let dw = a.matmul(&b).unwrap();
        let svd = svd_top(&dw, 4).unwrap();
        let mut r = svd.reconstruct();
        r.add_scaled(-1.0, &dw).unwrap();
        recon = recon.max(r.frobenius() / dw.frobenius());
    }

    let base = BaseLm::build(LmConfig::default(), &mut Rng::new(0)).unwrap();
    let lib = random_library(&base, 4, 4, 0.5, 22);
    let router = arrow_init(&lib).unwrap();
    let mut min_cos: f64 = 1.0;
    for (i, ad) in lib.adapters().iter().enumerate() {
        for s in 0..ad.sites.len() {
            let d = ad.sites[s].product();
            let dm = nalgebra::DMatrix::from_row_slice(d.rows(), d.cols(), d.data());
            let eig = (dm.transpose() * &dm).symmetric_eigen();
            let top = eig.eigenvalues.imax();
            let oracle = eig.eigenvectors.column(top);
            let row = router.sites[s].row(i);
            let cos: f64 = row.iter().zip(oracle.iter()).map(|(x, y)| x * y).sum::<f64>().abs();
            min_cos = min_cos.min(cos);
        }
    }

    // positive rescaling of one expert and sign flips of router rows
    let mut scaled = Vec::new();
    for (i, ad) in lib.adapters().iter().enumerate() {
        let mut e = ad.clone();
        let c = [0.3, 1.0, 2.5, 7.0][i];
        for v in e.blocks_mut().into_iter().flatten() {
            *v *= c;
        }
        scaled.push((format!("s{i}"), e));
    }
    let rescaled = arrow_init(&ExpertLibrary::new(scaled).unwrap()).unwrap();
    let mut flipped = router.clone();
    for m in &mut flipped.sites {
        for i in [1, 3] {
            for v in m.row_mut(i) {
                *v = -*v;
            }
        }
    }
    let mut invariance: f64 = 0.0;
    for _ in 0..50 {
        let h: Vec<f64> = (0..base.config.width).map(|_| rng.normal()).collect();
        for s in 0..router.sites.len() {
            let c0 = router.coeffs(s, &h).unwrap();
            for other in [&rescaled, &flipped] {
                let c1 = other.coeffs(s, &h).unwrap();
                invariance = invariance.max(c0.iter().zip(&c1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
        }
    }
    let row_norm_ok = (0..lib.len()).all(|i| {
        let r = arrow_row(lib.get(i), 0).unwrap();
        (r.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12
    });
    let ok = recon <= 1e-6 && min_cos >= 1.0 - 1e-8 && invariance <= 1e-12 && row_norm_ok;
    verdict(
        "svd/arrow correctness",
        ok,
        format!("reconstruction {recon:.2e}, min cosine to Gram oracle {min_cos:.12}, invariance {invariance:.2e}"),
    );
}

fn grad_error<O: Objective>(obj: &O, p: &O::Params, idx: &[usize]) -> f64 {
    let (_, g) = obj.mean_loss_grad(p, idx).unwrap();
    let fd = finite_diff_grad(
        |x| {
            let mut q = p.clone();
            q.set_flat(x).unwrap();
            obj.mean_loss_grad(&q, idx).unwrap().0
        },
        &p.flat(),
    )
    .unwrap();
    relative_error(&g.flat(), &fd)
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let mut errors: Vec<(&str, f64)> = Vec::new();
    for seed in 0..3u64 {
        let base = tiny_base(100 + seed);
        let lib = random_library(&base, 3, 2, 0.3, 200 + seed);
        let mut rng = Rng::new(300 + seed);
        let data: Vec<Example> = (0..3).map(|_| random_example(&mut rng, 10, 12)).collect();
        let idx = [0, 1, 2];
        let logits = |rows: usize, rng: &mut Rng| SimplexLogits {
            mode: if rows == 1 { WeightMode::Global } else { WeightMode::PerLayer },
            logits: Matrix::from_fn(rows, 3, |_, _| rng.normal()),
        };

        let out = ExpertOutputs::compute(&base, &lib, &data).unwrap();
        for (name, level) in [("ensemble/probability", EnsembleLevel::Probability), ("ensemble/logit", EnsembleLevel::Logit)] {
            let obj = EnsembleObjective { train: &out, val: &out, level, l1: 0.0 };
            errors.push((name, grad_error(&obj, &logits(1, &mut rng), &idx)));
        }

        let merge = MergeObjective { base: &base, library: &lib, train: &data, val: &data };
        errors.push(("merge/global", grad_error(&merge, &logits(1, &mut rng), &idx)));
        errors.push(("merge/per-layer", grad_error(&merge, &logits(2, &mut rng), &idx)));

        let routing = RouterObjective { base: &base, experts: lib.adapters(), train: &data, val: &data };
        for (name, score) in [("routing/plain", ScoreMode::Plain), ("routing/absolute", ScoreMode::Absolute)] {
            let mut r = Router::zeros(base.num_sites(), 3, 8, score);
            for m in &mut r.sites {
                *m = Matrix::from_fn(3, 8, |_, _| rng.normal());
            }
            errors.push((name, grad_error(&routing, &r, &idx)));
        }

        let spec = EnsembleSpec::new(SimplexWeights::global(&[0.2, 0.5, 0.3]).unwrap(), EnsembleLevel::Probability).unwrap();
        let q = teacher_targets(&base, &lib, &spec, &data).unwrap();
        let distill = AdapterObjective {
            base: &base,
            train: &data,
            val: &data,
            targets: Targets::Soft { train: q.clone(), val: q },
            dropout: 0.0,
        };
        errors.push(("distillation", grad_error(&distill, lib.get(1), &idx)));
    }
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let worst_name = errors.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|e| e.0).unwrap_or("");
    verdict(
        "gradient checks",
        worst <= 1e-4 && secs < 60.0,
        format!("{} checks, worst relative error {worst:.2e} ({worst_name}), {secs:.1}s", errors.len()),
    );
}

#[test]
fn lp_matches_grid_search() {
    let mut rng = Rng::new(31);
    let mut worst_gap: f64 = 0.0;
    let mut worst_violation: f64 = 0.0;
    for _ in 0..20 {
        let m = Matrix::from_fn(3, 4, |_, _| rng.uniform() * 3.0);
        let sol = lp_minimax_weights(&ErrorMatrix::new(
            (0..3).map(|i| format!("e{i}")).collect(),
            (0..4).map(|t| format!("t{t}")).collect(),
            m.clone(),
        )
        .unwrap())
        .unwrap();
        let mut grid = f64::INFINITY;
        for i in 0..=50 {
            for j in 0..=(50 - i) {
                let l = [i as f64 * 0.02, j as f64 * 0.02, (50 - i - j) as f64 * 0.02];
                grid = grid.min(worst_case(&m, &l));
            }
        }
        worst_gap = worst_gap.max((sol.value - grid).abs());
        let mut v: f64 = (sol.lambda.iter().sum::<f64>() - 1.0).abs();
        for &l in &sol.lambda {
            v = v.max(-l);
        }
        for t in 0..4 {
            let lhs: f64 = (0..3).map(|i| sol.lambda[i] * m[(i, t)]).sum();
            v = v.max(lhs - sol.value);
        }
        v = v.max(sol.value - grid);
        worst_violation = worst_violation.max(v);
    }
    verdict(
        "lp oracle equivalence",
        worst_gap <= 0.02 && worst_violation <= 1e-9,
        format!("20 matrices, max |lp - grid| {worst_gap:.2e}, max constraint violation {worst_violation:.2e}"),
    );
}

#[test]
fn greedy_selection_consistency() {
    let mut rng = Rng::new(41);
    let (mut monotone, mut terminal) = (true, true);
    for _ in 0..100 {
        let n = rng.range_inclusive(1, 10);
        let t = rng.range_inclusive(1, 12);
        let m = Matrix::from_fn(n, t, |_, _| rng.uniform() * 5.0);
        let curve = greedy_select(&m, n).unwrap();
        monotone &= curve.values.windows(2).all(|w| w[1] <= w[0]);
        terminal &= curve.values.last().copied() == Some(full_oracle_value(&m));
    }
    verdict(
        "greedy/oracle consistency",
        monotone && terminal,
        format!("100 matrices, monotone {monotone}, terminal equals oracle {terminal}"),
    );
}

#[test]
fn interpolation_endpoints() {
    let base = tiny_base(51);
    let lib = random_library(&base, 2, 2, 0.3, 52);
    let mut rng = Rng::new(53);
    let d1: Vec<Example> = (0..4).map(|_| random_example(&mut rng, 10, 12)).collect();
    let d2: Vec<Example> = (0..3).map(|_| random_example(&mut rng, 10, 12)).collect();
    let alphas: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let (e1, e2) = (lib.get(0), lib.get(1));
    let s = interpolate_pair(&base, ("e0", "e1"), e1, e2, &alphas, &d1, &d2).unwrap();
    let last = alphas.len() - 1;
    let ends = s.combined[0] == combined_loss(&base, e1, &[&d1, &d2]).unwrap()
        && s.combined[last] == combined_loss(&base, e2, &[&d1, &d2]).unwrap()
        && s.task1[0] == combined_loss(&base, e1, &[&d1]).unwrap()
        && s.task2[last] == combined_loss(&base, e2, &[&d2]).unwrap();
    let flat = interpolate_pair(&base, ("e0", "e0"), e1, e1, &alphas, &d1, &d2).unwrap();
    let spread = flat.combined.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - flat.combined.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    verdict(
        "interpolation endpoints",
        ends && spread <= 1e-12,
        format!("endpoints bit-identical {ends}, identical-pair spread {spread:.2e}"),
    );
}

fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

/// Runs `afl run` on the reference config with a fresh cache and returns the
/// wall time and the bytes of results.json.
fn cold_reference_run() -> (Duration, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_afl"))
        .arg("--config")
        .arg(reference_config())
        .arg("--out")
        .arg(&out)
        .arg("run")
        .env(CACHE_ENV, dir.path().join("cache"))
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    let elapsed = start.elapsed();
    assert!(status.success(), "reference run failed: {status}");
    (elapsed, std::fs::read(out.join(RESULTS_FILE)).unwrap())
}

struct Reference {
    elapsed: Duration,
    bytes: Vec<u8>,
    results: Results,
}

fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| {
        assert_eq!(ExperimentConfig::load(&reference_config()).unwrap(), ExperimentConfig::default());
        let (elapsed, bytes) = cold_reference_run();
        let results: Results = serde_json::from_slice(&bytes).unwrap();
        Reference { elapsed, bytes, results }
    })
}

fn loss(r: &Results, name: &str) -> f64 {
    r.method(name).unwrap_or_else(|| panic!("results lack `{name}`")).mean_loss
}

#[test]
fn reference_method_ordering() {
    let rf = reference();
    let r = &rf.results;
    let oracle = loss(r, "oracle");
    let routing = loss(r, "sgd-routing");
    let sgd_ens = loss(r, "sgd-ensemble");
    let uni_ens = loss(r, "uniform-ensemble");
    let uni_merge = loss(r, "uniform-merge");
    let others = [routing, sgd_ens, uni_ens, uni_merge];
    let oracle_best = others.iter().all(|&l| oracle < l);
    let merge_worst = [oracle, routing, sgd_ens, uni_ens].iter().all(|&l| uni_merge > l);
    let routing_le = routing <= uni_ens;
    let margins = r.margins.oracle_lead.is_some()
        && r.margins.uniform_merge_deficit.is_some()
        && r.margins.routing_over_ensemble.is_some();
    let secs = rf.elapsed.as_secs_f64();
    verdict(
        "fig. 2 ordering",
        oracle_best && merge_worst && routing_le && margins && secs < 600.0,
        format!(
            "oracle {oracle:.4}, sgd-routing {routing:.4}, sgd-ensemble {sgd_ens:.4}, uniform-ensemble {uni_ens:.4}, \
             uniform-merge {uni_merge:.4}; margins {:?}; run {secs:.0}s",
            r.margins
        ),
    );
}

#[test]
fn reference_interpolation_pairs() {
    let r = &reference().results;
    let wins: Vec<bool> = r.sweeps.iter().map(|s| s.oracle_ref <= s.min_combined).collect();
    let n = wins.iter().filter(|w| **w).count();
    let detail: Vec<String> = r
        .sweeps
        .iter()
        .map(|s| format!("{}+{}: oracle {:.4} vs min {:.4}", s.tasks.0, s.tasks.1, s.oracle_ref, s.min_combined))
        .collect();
    verdict("fig. 3 interpolation", n >= 3, format!("{n}/{} pairs; {}", wins.len(), detail.join("; ")));
}

#[test]
fn reference_calibration() {
    let r = &reference().results;
    let c = r.deltas.calibration.as_ref().expect("calibration missing");
    verdict(
        "calibration",
        c.sgd_routing < c.arrow,
        format!("top-{} vs top-{} delta: sgd routing {:.4}, arrow {:.4}", c.k_small, c.k_large, c.sgd_routing, c.arrow),
    );
}

#[test]
fn determinism() {
    let first = &reference().bytes;
    let (_, second) = cold_reference_run();
    verdict(
        "determinism",
        *first == second,
        format!("two cold reference runs, results.json {} and {} bytes, identical {}", first.len(), second.len(), *first == second),
    );
}

use std::path::Path;

use afl_core::harness::{run_experiment, Cache, Experiment, ExperimentConfig, MethodName, RESULTS_FILE};

fn smoke() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap()
}

#[test]
fn warm_cache_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    let cache_root = dir.path().join("cache");

    let cold = Experiment::new(smoke(), Cache::new(Some(cache_root.clone()))).unwrap();
    run_experiment(&cold, &dir.path().join("a")).unwrap();
    assert_eq!(cold.cache.hits(), 0);

    let warm = Experiment::new(smoke(), Cache::new(Some(cache_root))).unwrap();
    run_experiment(&warm, &dir.path().join("b")).unwrap();
    assert!(warm.cache.hits() > 0);
    assert_eq!(warm.cache.misses(), 0);

    let a = std::fs::read(dir.path().join("a").join(RESULTS_FILE)).unwrap();
    let b = std::fs::read(dir.path().join("b").join(RESULTS_FILE)).unwrap();
    assert_eq!(a, b);
    for csv in ["eval/sgd-routing.json", "methods.csv", "selection.csv", "error_matrix_test.csv", "interp_copy_reverse.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(csv)).unwrap(),
            std::fs::read(dir.path().join("b").join(csv)).unwrap(),
            "{csv}"
        );
    }
}

#[test]
fn uncached_run_matches_cached_run() {
    let dir = tempfile::tempdir().unwrap();
    let cached = Experiment::new(smoke(), Cache::new(Some(dir.path().join("cache")))).unwrap();
    let plain = Experiment::new(smoke(), Cache::disabled()).unwrap();
    for m in [MethodName::SgdRouting, MethodName::DistilledEnsemble, MethodName::ArrowHc] {
        assert_eq!(cached.evaluate(m).unwrap(), plain.evaluate(m).unwrap(), "{}", m.as_str());
    }
}

/// Poisoned task labels may change the oracle but nothing that claims to be
/// task-agnostic.
#[test]
fn agnostic_methods_ignore_labels() {
    let agnostic = [
        MethodName::UniformEnsemble,
        MethodName::SgdEnsemble,
        MethodName::UniformMerge,
        MethodName::GlobalSgdMerge,
        MethodName::ArrowTopk,
        MethodName::SgdRouting,
        MethodName::Hc,
        MethodName::MbcUniformMerge,
    ];
    let clean = Experiment::new(smoke(), Cache::disabled()).unwrap();
    let mut poisoned = Experiment::new(smoke(), Cache::disabled()).unwrap();
    let n = poisoned.library().unwrap().value.len();
    let names: Vec<String> = poisoned.datasets().unwrap().iter().map(|d| d.spec.name.clone()).collect();
    let rotated: Vec<Option<String>> = (0..n).map(|i| Some(names[(i + 1) % n].clone())).collect();
    poisoned.relabel_experts(&rotated).unwrap();

    for m in agnostic {
        assert_eq!(clean.evaluate(m).unwrap(), poisoned.evaluate(m).unwrap(), "{}", m.as_str());
    }
    assert_ne!(
        clean.evaluate(MethodName::Oracle).unwrap().per_task,
        poisoned.evaluate(MethodName::Oracle).unwrap().per_task
    );
}

#[test]
fn smoke_base_fingerprint_is_pinned() {
    let exp = Experiment::new(smoke(), Cache::disabled()).unwrap();
    let fp = exp.base().unwrap().value.fingerprint();
    println!("smoke base fingerprint {fp:#018x}");
    assert_eq!(fp, 0x006e_b673_0bad_648a);
}

#[test]
fn oracle_only_run_has_one_entry() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.methods = vec![MethodName::Oracle];
    let exp = Experiment::new(cfg, Cache::disabled()).unwrap();
    let r = run_experiment(&exp, dir.path()).unwrap();
    assert_eq!(r.methods.len(), 1);
    assert_eq!(r.methods[0].name, "oracle");
    assert!(r.margins.uniform_merge_deficit.is_none());
    assert!(dir.path().join("eval/oracle.json").is_file());
}

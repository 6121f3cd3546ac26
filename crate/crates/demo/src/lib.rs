//! Browser bindings for three small pieces of the core library: routing
//! coefficients with top-k, minimax ensemble weights, and greedy expert selection.
//!
//! Each exported function takes flat numeric arrays and returns a JSON string.
//! The `*_json` functions hold the logic and are callable natively.

use afl_core::analysis::{full_oracle_value, greedy_select};
use afl_core::fusion::{lp_minimax_weights, worst_case, ErrorMatrix};
use afl_core::numerics::Matrix;
use afl_core::routing::{Router, ScoreMode};
use afl_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Routing {
    dense: Vec<f64>,
    topk: Vec<f64>,
}

#[derive(Serialize)]
struct Minimax {
    lambda: Vec<f64>,
    value: f64,
    support: Vec<usize>,
    uniform_worst_case: f64,
}

#[derive(Serialize)]
struct Greedy {
    selected: Vec<usize>,
    values: Vec<f64>,
    oracle: f64,
}

fn matrix(values: &[f64], experts: usize, tasks: usize) -> Result<Matrix> {
    Matrix::from_vec(experts, tasks, values.to_vec())
}

/// Coefficients a one-site router assigns for raw scores `w_i·h`, before and after top-k.
pub fn routing_json(scores: &[f64], k: usize, absolute: bool) -> Result<String> {
    let n = scores.len();
    let mode = if absolute { ScoreMode::Absolute } else { ScoreMode::Plain };
    let mut router = Router::zeros(1, n, n, mode);
    router.sites[0] = Matrix::identity(n);
    let dense = router.coeffs(0, scores)?;
    let topk = router.with_top_k(Some(k)).coeffs(0, scores)?;
    Ok(serde_json::to_string(&Routing { dense, topk })?)
}

/// Minimax weights for a row-major expert-by-task loss matrix.
pub fn minimax_json(values: &[f64], experts: usize, tasks: usize) -> Result<String> {
    let m = matrix(values, experts, tasks)?;
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let sol = lp_minimax_weights(&ErrorMatrix::new(names("e", experts), names("t", tasks), m.clone())?)?;
    let uniform = vec![1.0 / experts as f64; experts];
    Ok(serde_json::to_string(&Minimax {
        uniform_worst_case: worst_case(&m, &uniform),
        lambda: sol.lambda,
        value: sol.value,
        support: sol.support,
    })?)
}

/// Greedy selection curve over every prefix size.
pub fn greedy_json(values: &[f64], experts: usize, tasks: usize) -> Result<String> {
    let m = matrix(values, experts, tasks)?;
    let curve = greedy_select(&m, experts)?;
    Ok(serde_json::to_string(&Greedy {
        oracle: full_oracle_value(&m),
        selected: curve.selected,
        values: curve.values,
    })?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn routing(scores: &[f64], k: usize, absolute: bool) -> std::result::Result<String, JsError> {
    js(routing_json(scores, k, absolute))
}

#[wasm_bindgen]
pub fn minimax(values: &[f64], experts: usize, tasks: usize) -> std::result::Result<String, JsError> {
    js(minimax_json(values, experts, tasks))
}

#[wasm_bindgen]
pub fn greedy(values: &[f64], experts: usize, tasks: usize) -> std::result::Result<String, JsError> {
    js(greedy_json(values, experts, tasks))
}

use afl_demo::{greedy_json, minimax_json, routing_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn routing_keeps_top_k_on_the_simplex() {
    let v = parse(routing_json(&[2.0, -3.0, 0.5, 1.0], 2, true).unwrap());
    let dense = floats(&v["dense"]);
    let topk = floats(&v["topk"]);
    assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(topk.iter().filter(|x| **x > 0.0).count(), 2);
    assert!(topk[1] > 0.0 && topk[0] > 0.0, "absolute scores favour |-3| and 2: {topk:?}");
    assert!((topk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn routing_rejects_bad_k() {
    assert!(routing_json(&[1.0, 2.0], 3, false).is_err());
}

#[test]
fn minimax_on_a_two_by_two() {
    let v = parse(minimax_json(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap());
    let lambda = floats(&v["lambda"]);
    assert!((lambda[0] - 0.5).abs() < 1e-9);
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 1e-9);
    assert!(minimax_json(&[1.0, 2.0, 3.0], 2, 2).is_err());
}

#[test]
fn greedy_reaches_the_oracle() {
    let m = [3.0, 1.0, 2.0, 0.5, 2.5, 2.0, 1.0, 3.0, 0.2];
    let v = parse(greedy_json(&m, 3, 3).unwrap());
    let values = floats(&v["values"]);
    assert_eq!(values.len(), 3);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*values.last().unwrap(), v["oracle"].as_f64().unwrap());
}

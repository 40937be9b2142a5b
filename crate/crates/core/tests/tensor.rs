use std::collections::HashSet;

use batteryttt::tensor::*;
use batteryttt::Result;
use proptest::prelude::*;

type Op = for<'t> fn(&'t Tape, &Binding<'t>) -> Result<Var<'t>>;

/// Deterministic, non-degenerate weights for reducing an op output to a scalar.
fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + (1.7 * i as f64 + 0.4).sin()).collect()
}

fn store(vals: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    let take = |k: usize, n: usize| vals[k..k + n].to_vec();
    s.insert("a", Tensor::matrix(4, 6, take(0, 24)).unwrap(), true).unwrap();
    s.insert("b", Tensor::matrix(4, 6, take(24, 24)).unwrap(), true).unwrap();
    s.insert("r", Tensor::vector(take(48, 6)), true).unwrap();
    s.insert("c", Tensor::scalar(vals[54]), true).unwrap();
    s.insert("m", Tensor::matrix(6, 3, take(55, 18)).unwrap(), true).unwrap();
    s
}

fn reduce<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let w = tape.constant(Tensor::new(y.shape(), weights(y.len()))?);
    Ok(y.mul(&w)?.sum())
}

fn ops() -> Vec<(&'static str, Op)> {
    vec![
        ("add", |_, b| b.get("a")?.add(&b.get("b")?)),
        ("sub", |_, b| b.get("a")?.sub(&b.get("b")?)),
        ("mul", |_, b| b.get("a")?.mul(&b.get("b")?)),
        ("div", |_, b| b.get("a")?.div(&b.get("b")?.offset(2.5))),
        ("add_row", |_, b| b.get("a")?.add_row(&b.get("r")?)),
        ("mul_row", |_, b| b.get("a")?.mul_row(&b.get("r")?)),
        ("add_scalar", |_, b| b.get("a")?.add_scalar(&b.get("c")?)),
        ("mul_scalar", |_, b| b.get("a")?.mul_scalar(&b.get("c")?)),
        ("scale", |_, b| Ok(b.get("a")?.scale(-1.7))),
        ("offset", |_, b| Ok(b.get("a")?.offset(0.3).square())),
        ("matmul", |_, b| b.get("a")?.matmul(&b.get("m")?)),
        ("transpose", |_, b| b.get("a")?.transpose()?.matmul(&b.get("b")?)),
        ("softplus", |_, b| Ok(b.get("a")?.softplus())),
        ("gelu", |_, b| Ok(b.get("a")?.gelu())),
        ("tanh", |_, b| Ok(b.get("a")?.tanh())),
        ("sigmoid", |_, b| Ok(b.get("a")?.sigmoid())),
        ("exp", |_, b| Ok(b.get("a")?.exp())),
        ("square", |_, b| Ok(b.get("a")?.square())),
        ("cumsum", |_, b| Ok(b.get("a")?.cumsum())),
        ("softmax", |_, b| Ok(b.get("a")?.softmax())),
        ("layer_norm", |_, b| Ok(b.get("a")?.layer_norm())),
        ("slice_rows", |_, b| b.get("a")?.slice_rows(1, 2)),
        ("slice", |_, b| b.get("a")?.slice(2, 3)),
        ("concat_rows", |_, b| Var::concat_rows(&[b.get("a")?, b.get("b")?.square()])),
        ("concat", |_, b| Var::concat(&[b.get("a")?, b.get("b")?.tanh()])),
        ("reshape", |_, b| b.get("a")?.reshape(vec![24])?.cumsum().reshape(vec![6, 4])),
        ("sum", |_, b| Ok(b.get("a")?.square().sum())),
        ("mean", |_, b| Ok(b.get("a")?.exp().mean())),
        ("mean_rows", |_, b| b.get("a")?.mean_rows()),
        ("sq_err_mean", |_, b| b.get("r")?.sq_err_mean(&[0.1, -0.2, 0.3, 0.0, 1.0, -1.0], &[1.0, 2.0, 0.5, 1.0, 1.0, 3.0])),
        ("interp", |_, b| b.get("r")?.interp(&[-2.05, -0.55, 0.45, 1.35, 2.05], &[0.0, 1.0, 1.5, 3.5, 4.0])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(vals in prop::collection::vec(-2.0f64..2.0, 73), seed in any::<u64>()) {
        let s = store(&vals);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for (name, op) in ops() {
            let rep = grad_check(|tape, b| reduce(tape, op(tape, b)?), &s, &names, 1e-6, 200, seed).unwrap();
            prop_assert!(rep.max_rel_error < 1e-4, "{name}: {:.3e}", rep.max_rel_error);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_pure(vals in prop::collection::vec(-2.0f64..2.0, 73)) {
        let s = store(&vals);
        let before = s.clone();
        let all: HashSet<String> = s.names().map(str::to_string).collect();
        for (name, op) in ops() {
            let run = || {
                let tape = Tape::new();
                let b = s.bind(&tape, &all);
                let loss = reduce(&tape, op(&tape, &b).unwrap()).unwrap();
                tape.backward(loss).unwrap();
                let mut g: Vec<(String, Vec<u64>)> = b
                    .grads(&tape)
                    .into_iter()
                    .map(|(k, t)| (k, t.data().iter().map(|x| x.to_bits()).collect()))
                    .collect();
                g.sort();
                (loss.item().to_bits(), g)
            };
            prop_assert_eq!(run(), run(), "{}", name);
        }
        prop_assert_eq!(&s, &before);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 24)) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 6, vals).unwrap());
        for row in x.softmax().value().data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn quadratic_check_is_near_exact() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::vector(vec![0.5, -1.5, 2.0]), true).unwrap();
    let rep = grad_check(|_, b| Ok(b.get("w")?.square().sum()), &s, &["w".to_string()], 1e-5, 10, 0).unwrap();
    assert!(rep.max_rel_error < 1e-8, "{}", rep.max_rel_error);
}

#[test]
fn check_samples_at_most_the_requested_coordinates() {
    let s = store(&weights(73));
    let names: Vec<String> = s.names().map(str::to_string).collect();
    let rep = grad_check(|tape, b| reduce(tape, b.get("a")?.matmul(&b.get("m")?)?), &s, &names, 1e-6, 200, 3).unwrap();
    assert_eq!(rep.coordinates, 73);
    let rep = grad_check(|tape, b| reduce(tape, b.get("a")?.exp()), &s, &names, 1e-6, 10, 3).unwrap();
    assert_eq!(rep.coordinates, 10);
    assert!(grad_check(|_, b| Ok(b.get("c")?), &s, &names, 0.0, 10, 3).is_err());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let s = store(&weights(73));
    let tape = Tape::new();
    let b = s.bind(&tape, &HashSet::from(["a".to_string()]));
    let loss = reduce(&tape, b.get("a").unwrap().mul(&b.get("b").unwrap()).unwrap()).unwrap();
    tape.backward(loss).unwrap();
    let g = b.grads(&tape);
    assert!(g.contains_key("a"));
    assert!(!g.contains_key("b"));
}

#[test]
fn store_serialization_is_stable() {
    let s = store(&weights(73));
    let a = s.to_json().unwrap();
    assert_eq!(a, s.clone().to_json().unwrap());
    let back = ParamStore::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
    for p in s.iter() {
        assert_eq!(back.get(&p.name).unwrap(), p.value.as_ref());
    }
    assert!(a.contains(&format!("\"version\":{STORE_VERSION}")));
}

//! Analytic gradients versus central finite differences for every op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabgen_core::numerics::{GradBuffer, Graph, Tensor, Var};

const H: f64 = 1e-5;

/// Relative error with a small absolute floor so that gradients that are
/// zero up to rounding do not divide by ~0.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Reduces an arbitrary output to a scalar with fixed random weights, then
/// compares input gradients with central differences. Returns the max error.
fn check(inputs: &[Tensor], build: &Build, weights_seed: u64, floor: f64) -> f64 {
    let scalar = |g: &mut Graph, vars: &[Var]| {
        let out = build(g, vars);
        let n = g.value(out).numel();
        if n == 1 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = g.mul_const(out, Arc::new(w)).unwrap();
        g.sum(y)
    };
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = scalar(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let root = scalar(&mut g, &vars);
    let grads = g.backward(root, &mut GradBuffer::default()).unwrap();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[j], numeric, floor));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4))
}

const TRIALS: u64 = 100;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-4;

fn run_trials(name: &str, mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let (inputs, build) = case(&mut rng);
        worst = worst.max(check(&inputs, build.as_ref(), trial, FLOOR));
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_grad() {
    run_trials("matmul", |rng| {
        let (m, k, n) = dims(rng);
        (
            vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn elementwise_grads() {
    run_trials("add_mul_scale", |rng| {
        let (m, n, _) = dims(rng);
        (
            vec![
                rand_tensor(rng, &[m, n]),
                rand_tensor(rng, &[m, n]),
                rand_tensor(rng, &[n]),
            ],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let b = g.mul(a, v[0]).unwrap();
                let c = g.add_row(b, v[2]).unwrap();
                g.scale(c, -0.7)
            }),
        )
    });
}

#[test]
fn gelu_grad() {
    run_trials("gelu", |rng| {
        let (m, n, _) = dims(rng);
        (vec![rand_tensor(rng, &[m, n])], Box::new(|g, v| g.gelu(v[0])))
    });
}

#[test]
fn softmax_and_masked_fill_grad() {
    run_trials("softmax", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        let mut mask: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.3)).collect();
        for r in 0..m {
            mask[r * n] = false;
        }
        let mask = Arc::new(mask);
        (
            vec![rand_tensor(rng, &[m, n])],
            Box::new(move |g, v| {
                let x = g.masked_fill(v[0], Arc::clone(&mask), f64::NEG_INFINITY).unwrap();
                g.softmax(x)
            }),
        )
    });
}

#[test]
fn layer_norm_grad() {
    run_trials("layer_norm", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        (
            vec![
                rand_tensor(rng, &[m, n]),
                rand_tensor(rng, &[n]),
                rand_tensor(rng, &[n]),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        )
    });
}

#[test]
fn embedding_and_select_grad() {
    run_trials("embedding", |rng| {
        let (vocab, d, t) = dims(rng);
        let ids: Vec<usize> = (0..t + 1).map(|_| rng.random_range(0..vocab)).collect();
        let rows: Vec<usize> = (0..2).map(|_| rng.random_range(0..ids.len())).collect();
        (
            vec![rand_tensor(rng, &[vocab, d])],
            Box::new(move |g, v| {
                let e = g.embedding(v[0], &ids).unwrap();
                g.select_rows(e, &rows).unwrap()
            }),
        )
    });
}

#[test]
fn gather_grad() {
    run_trials("gather", |rng| {
        let (heads, buckets, rows) = dims(rng);
        let cols = rng.random_range(1..4);
        let index: Vec<u32> = (0..rows * cols)
            .map(|_| {
                if rng.random_bool(0.2) {
                    u32::MAX
                } else {
                    rng.random_range(0..buckets) as u32
                }
            })
            .collect();
        let index = Arc::new(index);
        (
            vec![rand_tensor(rng, &[heads, buckets])],
            Box::new(move |g, v| g.gather(v[0], Arc::clone(&index), rows, cols).unwrap()),
        )
    });
}

#[test]
fn attention_grad() {
    run_trials("attention", |rng| {
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..3);
        let tq = rng.random_range(1..4);
        let tk = rng.random_range(1..4);
        let mut mask: Vec<bool> = (0..tq * tk).map(|_| rng.random_bool(0.7)).collect();
        // Keep at least one visible key per query; rows with none are constant zero.
        for i in 0..tq {
            mask[i * tk] = true;
        }
        (
            vec![
                rand_tensor(rng, &[tq, d]),
                rand_tensor(rng, &[tk, d]),
                rand_tensor(rng, &[tk, d]),
                rand_tensor(rng, &[heads, tq, tk]),
            ],
            Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads, Some(v[3]), Some(&mask)).unwrap()),
        )
    });
}

#[test]
fn cross_entropy_and_mse_grad() {
    run_trials("loss", |rng| {
        let (rows, _, _) = dims(rng);
        let classes = rng.random_range(2..6);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let weights: Vec<f64> = (0..rows).map(|_| rng.random_range(0.1..2.0)).collect();
        let mut mask: Vec<bool> = (0..rows * classes).map(|_| rng.random_bool(0.3)).collect();
        for (r, &t) in targets.iter().enumerate() {
            mask[r * classes + t] = false;
        }
        let mask = Arc::new(mask);
        let target_vals: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
        (
            vec![rand_tensor(rng, &[rows, classes]), rand_tensor(rng, &[rows])],
            Box::new(move |g, v| {
                let l = g.masked_fill(v[0], Arc::clone(&mask), f64::NEG_INFINITY).unwrap();
                let ce = g.cross_entropy(l, &targets, &weights, 0.1).unwrap();
                let m = g.mse(v[1], &target_vals).unwrap();
                let s = g.add(ce, m).unwrap();
                let mean = g.mean(v[1]);
                g.add(s, mean).unwrap()
            }),
        )
    });
}

#[test]
fn three_logit_cross_entropy_is_tight() {
    let logits = Tensor::matrix(1, 3, vec![0.3, -1.1, 0.8]).unwrap();
    let err = check(
        &[logits],
        &|g, v| g.cross_entropy(v[0], &[1], &[1.0], 0.0).unwrap(),
        0,
        1e-12,
    );
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn layer_norm_parameters_on_fixed_input() {
    let x = Tensor::matrix(2, 4, vec![0.5, -1.0, 2.0, 0.1, 1.5, 0.3, -0.7, 0.9]).unwrap();
    let gamma = Tensor::vector(vec![1.0, 0.8, 1.2, 0.9]).unwrap();
    let beta = Tensor::vector(vec![0.1, -0.2, 0.0, 0.3]).unwrap();
    let err = check(
        &[x, gamma, beta],
        &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        3,
        1e-8,
    );
    assert!(err < 1e-5, "{err:e}");
}

//! Central finite-difference gradient checks in f64.

use grsn_core::boxes::BBox;
use grsn_core::data::Object;
use grsn_core::detector::{detection_loss, LossWeights, ModelConfig};
use grsn_core::fusion::{conv1x1, reasoner2_fuse};
use grsn_core::reasoning::{
    flatten, mlp, multi_head_attention, reasoning_forward, scaled_dot_product, BoundReasoning, ReasoningConfig,
};
use grsn_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub op: &'static str,
    pub rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.1 + v } else { v })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projects `f`'s output onto a fixed random direction, then compares the
/// backpropagated gradient of every input with central differences.
/// Returns the worst `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-3)` over inputs.
pub fn check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let probe_shape = {
        let tape = Tape::inference();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").shape()
    };
    let direction = rand_tensor(rng, &probe_shape);
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        let v = out.value();
        v.data().iter().zip(direction.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let loss = out.mul(tape.constant(direction.clone())).expect("mul").sum();
    tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = var.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let plus = objective(&xs);
            xs[i].data_mut()[j] = x0 - STEP;
            let minus = objective(&xs);
            xs[i].data_mut()[j] = x0;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / (norm(analytic.data()) + norm(&numeric)).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

fn bound<'t>(cfg: ReasoningConfig, v: &[Var<'t, f64>]) -> BoundReasoning<'t, f64> {
    BoundReasoning {
        config: cfg,
        w_q: v[0],
        b_q: v[1],
        w_k: v[2],
        b_k: v[3],
        w_v: v[4],
        b_v: v[5],
        w_o: v[6],
        b_o: v[7],
        mlp_w1: v[8],
        mlp_b1: v[9],
        mlp_w2: v[10],
        mlp_b2: v[11],
        ln1_gamma: v[12],
        ln1_beta: v[13],
        ln2_gamma: v[14],
        ln2_beta: v[15],
    }
}

fn reasoning_inputs(rng: &mut ChaCha8Rng, cfg: &ReasoningConfig) -> Vec<Tensor<f64>> {
    let (d, h) = (cfg.d_feature, cfg.d_hidden);
    let shapes: [&[usize]; 16] = [
        &[d, d],
        &[d],
        &[d, d],
        &[d],
        &[d, d],
        &[d],
        &[d, d],
        &[d],
        &[d, h],
        &[h],
        &[h, d],
        &[d],
        &[d],
        &[d],
        &[d],
        &[d],
    ];
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| match i {
            // gammas near one
            12 | 14 => rand_tensor(rng, s).map(|v| 1.0 + 0.5 * v),
            _ => rand_tensor(rng, s),
        })
        .collect()
}

/// Every differentiable op of the crate over randomised shapes and values.
pub fn gradient_suite(seed: u64) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |op: &'static str, rel_err: f64| out.push(CaseResult { op, rel_err });

    for _ in 0..10 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let xs = [rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])];
        push("matmul", check(&mut rng, &xs, |_, v| v[0].matmul(v[1])));
    }
    for _ in 0..6 {
        let (b, m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let xs = [rand_tensor(&mut rng, &[b, m, k]), rand_tensor(&mut rng, &[b, k, n])];
        push("batched matmul", check(&mut rng, &xs, |_, v| v[0].matmul(v[1])));
    }
    for _ in 0..4 {
        let s = [rng.random_range(1..4), rng.random_range(1..5)];
        let xs = [rand_tensor(&mut rng, &s), rand_tensor(&mut rng, &s)];
        push("add", check(&mut rng, &xs, |_, v| v[0].add(v[1])));
        push("sub", check(&mut rng, &xs, |_, v| v[0].sub(v[1])));
        push("mul", check(&mut rng, &xs, |_, v| v[0].mul(v[1])));
        let bias = [rand_tensor(&mut rng, &s), rand_tensor(&mut rng, &s[1..])];
        push("add_bias", check(&mut rng, &bias, |_, v| v[0].add_bias(v[1])));
        let one = [away_from_zero(&mut rng, &s)];
        push("scale", check(&mut rng, &one, |_, v| Ok(v[0].scale(-1.7))));
        push("relu", check(&mut rng, &one, |_, v| Ok(v[0].relu())));
        push("leaky_relu", check(&mut rng, &one, |_, v| Ok(v[0].leaky_relu(0.1))));
        push("sigmoid", check(&mut rng, &one, |_, v| Ok(v[0].sigmoid())));
        push("sum", check(&mut rng, &one, |_, v| Ok(v[0].mul(v[0])?.sum())));
    }
    for _ in 0..8 {
        let s = [rng.random_range(1..4), rng.random_range(2..6)];
        let xs = [rand_tensor(&mut rng, &s).map(|v| 3.0 * v)];
        push("softmax", check(&mut rng, &xs, |_, v| v[0].softmax_last()));
    }
    for _ in 0..8 {
        let (n, d) = (rng.random_range(1..4), rng.random_range(2..6));
        let xs = [
            rand_tensor(&mut rng, &[n, d]),
            rand_tensor(&mut rng, &[d]).map(|v| 1.0 + 0.5 * v),
            rand_tensor(&mut rng, &[d]),
        ];
        push("layer_norm", check(&mut rng, &xs, |_, v| v[0].layer_norm(v[1], v[2], 1e-5)));
    }
    for _ in 0..2 {
        let xs = [rand_tensor(&mut rng, &[2, 3, 4])];
        push("reshape", check(&mut rng, &xs, |_, v| v[0].reshape(&[4, 6])?.mul(v[0].reshape(&[4, 6])?)));
        push("permute", check(&mut rng, &xs, |_, v| v[0].permute(&[2, 0, 1])));
        push("transpose", check(&mut rng, &xs, |_, v| v[0].transpose()));
        push("slice", check(&mut rng, &xs, |_, v| v[0].slice(2, 1, 2)));
        let rows = [rand_tensor(&mut rng, &[4, 3])];
        push("gather_rows", check(&mut rng, &rows, |_, v| v[0].gather_rows(&[2, 0, 2])));
        let pair = [rand_tensor(&mut rng, &[2, 1, 3]), rand_tensor(&mut rng, &[2, 2, 3])];
        push("concat", check(&mut rng, &pair, |t, v| t.concat(&[v[0], v[1]], 1)));
    }
    for case in 0..10 {
        let k = if case % 2 == 0 { 3 } else { 1 };
        let stride = 1 + case % 3 / 2;
        let pad = if k == 3 { case % 2 + (case / 4) % 2 } else { 0 };
        let (b, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
        let xs = [
            rand_tensor(&mut rng, &[b, ci, h, w]),
            rand_tensor(&mut rng, &[co, ci, k, k]),
            rand_tensor(&mut rng, &[co]),
        ];
        push("conv2d", check(&mut rng, &xs, move |_, v| v[0].conv2d(v[1], v[2], stride, pad)));
    }
    for _ in 0..3 {
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let xs = [rand_tensor(&mut rng, &[2, 2, h, w])];
        push("upsample2x", check(&mut rng, &xs, |_, v| v[0].upsample2x()));
    }
    for _ in 0..4 {
        let n = rng.random_range(1..8);
        let xs = [rand_tensor(&mut rng, &[n]).map(|v| 4.0 * v)];
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        push("bce_with_logits", check(&mut rng, &xs, move |_, v| v[0].bce_with_logits(&targets)));
        let c = rng.random_range(2..5);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let logits = [rand_tensor(&mut rng, &[n, c]).map(|v| 3.0 * v)];
        push("cross_entropy", check(&mut rng, &logits, move |_, v| v[0].cross_entropy(&classes)));
    }
    for _ in 0..8 {
        let (g, n, dk) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..4));
        let xs = [
            rand_tensor(&mut rng, &[g, n, dk]),
            rand_tensor(&mut rng, &[g, n, dk]),
            rand_tensor(&mut rng, &[g, n, dk]),
        ];
        push("attention", check(&mut rng, &xs, |_, v| Ok(scaled_dot_product(v[0], v[1], v[2])?.output)));
    }
    for case in 0..6 {
        let heads = 1 + case % 2;
        let cfg = ReasoningConfig::new(4, heads);
        let mut xs = vec![rand_tensor(&mut rng, &[1, 4, 2, 2])];
        xs.extend(reasoning_inputs(&mut rng, &cfg));
        push(
            "multi_head_attention",
            check(&mut rng, &xs, move |_, v| {
                let seq = flatten(v[0])?;
                Ok(multi_head_attention(&seq, &bound(cfg, &v[1..]))?.output.values)
            }),
        );
        push(
            "mlp",
            check(&mut rng, &xs, move |_, v| {
                let seq = flatten(v[0])?;
                Ok(mlp(&seq, &bound(cfg, &v[1..]))?.values)
            }),
        );
    }
    for case in 0..4 {
        let mut cfg = ReasoningConfig::new(4, 1 + case % 2);
        cfg.positional_encoding = case < 2;
        let mut xs = vec![rand_tensor(&mut rng, &[1, 4, 2, 2])];
        xs.extend(reasoning_inputs(&mut rng, &cfg));
        push(
            "reasoning_forward",
            check(&mut rng, &xs, move |_, v| Ok(reasoning_forward(v[0], &bound(cfg, &v[1..]))?.grid)),
        );
    }
    for _ in 0..4 {
        let d = rng.random_range(1..4);
        let xs = [
            rand_tensor(&mut rng, &[1, d, 2, 3]),
            rand_tensor(&mut rng, &[1, d, 2, 3]),
            rand_tensor(&mut rng, &[d, 2 * d]),
            rand_tensor(&mut rng, &[d]),
        ];
        push("reasoner2 fuse", check(&mut rng, &xs, |_, v| reasoner2_fuse(v[0], v[1], v[2], v[3])));
        let single = [xs[0].clone(), rand_tensor(&mut rng, &[d, d]), xs[3].clone()];
        push("conv1x1", check(&mut rng, &single, |_, v| conv1x1(v[0], v[1], v[2])));
    }
    let cfg = ModelConfig::default();
    for _ in 0..6 {
        let n_obj = rng.random_range(0..4);
        let objects: Vec<Object> = (0..n_obj)
            .map(|_| {
                let (w, h) = (rng.random_range(6.0..36.0), rng.random_range(6.0..36.0));
                let (cx, cy) = (rng.random_range(w / 2.0..64.0 - w / 2.0), rng.random_range(h / 2.0..64.0 - h / 2.0));
                Object {
                    bbox: BBox::from_center(cx, cy, w, h),
                    class_id: rng.random_range(0..4),
                }
            })
            .collect();
        let xs = [rand_tensor(&mut rng, &[1, 9, 8, 8]), rand_tensor(&mut rng, &[1, 9, 4, 4])];
        let cfg = cfg.clone();
        push(
            "detection_loss",
            check(&mut rng, &xs, move |_, v| {
                Ok(detection_loss(&[v[0], v[1]], &[&objects], &cfg, &LossWeights::default())?.total)
            }),
        );
    }
    out
}

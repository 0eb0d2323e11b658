//! Attention invariants measured against naive oracles.

use grsn_core::params::ParamStore;
use grsn_core::reasoning::{reasoning_forward, scaled_dot_product, ReasoningConfig, ReasoningLayerParams};
use grsn_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worst `|Σ_j A_ij − 1|` over random attention inputs.
pub fn row_stochastic_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let (g, n, dk) = (1 + c % 3, 2 + c % 7, 1 + c % 5);
        let tape = Tape::<f64>::inference();
        let q = tape.constant(Tensor::uniform(&[g, n, dk], 4.0, &mut rng));
        let k = tape.constant(Tensor::uniform(&[g, n, dk], 4.0, &mut rng));
        let v = tape.constant(Tensor::uniform(&[g, n, dk], 1.0, &mut rng));
        let parts = scaled_dot_product(q, k, v).unwrap();
        let w = parts.weights.value();
        for row in w.data().chunks_exact(n) {
            assert!(row.iter().all(|&x| x >= 0.0));
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// Worst deviation between `scaled_dot_product` and a direct loop
/// evaluation of `softmax(q·k / √d_k)·v`.
pub fn scaling_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let (n, dk) = (2 + c % 5, 1 + c % 6);
        let tape = Tape::<f64>::inference();
        let q = Tensor::uniform(&[1, n, dk], 2.0, &mut rng);
        let k = Tensor::uniform(&[1, n, dk], 2.0, &mut rng);
        let v = Tensor::uniform(&[1, n, dk], 1.0, &mut rng);
        let got = scaled_dot_product(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()))
            .unwrap()
            .output
            .value()
            .clone();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|t| q.at(&[0, i, t]) * k.at(&[0, j, t])).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for t in 0..dk {
                let expect: f64 = (0..n).map(|j| logits[j].exp() / z * v.at(&[0, j, t])).sum();
                worst = worst.max((expect - got.at(&[0, i, t])).abs());
            }
        }
    }
    worst
}

fn permute_cells(grid: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = grid.shape();
    let (d, n) = (s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(s);
    for c in 0..d {
        for (i, &p) in perm.iter().enumerate() {
            out.data_mut()[c * n + p] = grid.data()[c * n + i];
        }
    }
    out
}

/// For `cases` random 3×3 grids, the deviation between
/// `reasoning(permute(x))` and `permute(reasoning(x))`. Returns
/// `(smallest, largest)` over the cases.
pub fn permutation_deviation(seed: u64, cases: usize, positional_encoding: bool) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in 0..cases {
        let mut cfg = ReasoningConfig::new(8, 1 + c % 2);
        cfg.positional_encoding = positional_encoding;
        let mut store = ParamStore::<f64>::new();
        let params = ReasoningLayerParams::new(&mut store, "r", &cfg, seed + c as u64).unwrap();
        let x = Tensor::uniform(&[1, 8, 3, 3], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut rng);
        }
        let run = |input: Tensor<f64>| {
            let tape = Tape::inference();
            let bound = params.bind(&tape, &store, &cfg);
            let out = reasoning_forward(tape.constant(input), &bound).unwrap();
            let v = out.grid.value().clone();
            v
        };
        let a = permute_cells(&run(x.clone()), &perm);
        let b = run(permute_cells(&x, &perm));
        let dev = a.max_abs_diff(&b);
        lo = lo.min(dev);
        hi = hi.max(dev);
    }
    (lo, hi)
}

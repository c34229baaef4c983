use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f32) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f64; p * r];
    for i in 0..p {
        for j in 0..r {
            for k in 0..q {
                out[i * r + j] += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
            }
        }
    }
    out
}

/// Softmax over the unblocked subset of each row, in f64.
fn subset_softmax(logits: &Tensor, blocked: &[bool]) -> Vec<f64> {
    let cols = logits.cols();
    let mut out = vec![0.0f64; logits.numel()];
    for i in 0..logits.rows() {
        let open: Vec<usize> = (0..cols).filter(|&j| !blocked[i * cols + j]).collect();
        if open.is_empty() {
            continue;
        }
        let max = open
            .iter()
            .map(|&j| f64::from(logits.get(i, j)))
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = open.iter().map(|&j| (f64::from(logits.get(i, j)) - max).exp()).sum();
        for &j in &open {
            out[i * cols + j] = (f64::from(logits.get(i, j)) - max).exp() / z;
        }
    }
    out
}

fn mask_from(blocked: &[bool], rows: usize, cols: usize) -> Tensor {
    let data = blocked.iter().map(|&b| if b { BLOCKED } else { 0.0 }).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_identity_and_scalar() {
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
    let two = Tensor::matrix(1, 1, vec![2.0]).unwrap();
    let three = Tensor::matrix(1, 1, vec![3.0]).unwrap();
    assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, 5, 4, 1.0);
    let b = rand_tensor(&mut rng, 4, 3, 1.0);
    let c = matmul(&a, &b).unwrap();
    let oracle = triple_loop(&a, &b);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert!((f64::from(*x) - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &b), Err(crate::Error::Shape(_))));
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(&a), g.constant(&b));
    assert!(g.matmul(va, vb).is_err());
    assert!(g.matmul_t(va, false, vb, true).is_ok());
}

#[test]
fn softmax_masked_worked_examples() {
    let l = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let m = Tensor::zeros(&[1, 2]);
    assert_eq!(softmax_masked(&l, &m).unwrap().probs.data(), &[0.5, 0.5]);

    let l = Tensor::from_rows(&[vec![9.0, 1.0]]).unwrap();
    let m = Tensor::from_rows(&[vec![0.0, BLOCKED]]).unwrap();
    assert_eq!(softmax_masked(&l, &m).unwrap().probs.data(), &[1.0, 0.0]);
}

#[test]
fn softmax_masked_matches_subset_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let l = rand_tensor(&mut rng, 4, 4, 5.0);
        let mut blocked: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.4)).collect();
        for i in 0..4 {
            blocked[i * 4 + i] = false;
        }
        let out = softmax_masked(&l, &mask_from(&blocked, 4, 4)).unwrap();
        let oracle = subset_softmax(&l, &blocked);
        for (x, y) in out.probs.data().iter().zip(&oracle) {
            assert!((f64::from(*x) - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert_eq!(out.fully_blocked_rows, 0);
    }
}

#[test]
fn fully_blocked_row_is_zero_and_flagged() {
    let l = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let m = Tensor::from_rows(&[vec![BLOCKED, BLOCKED], vec![0.0, 0.0]]).unwrap();
    let out = softmax_masked(&l, &m).unwrap();
    assert_eq!(out.fully_blocked_rows, 1);
    assert_eq!(&out.probs.data()[..2], &[0.0, 0.0]);
    assert!(out.probs.data()[2..].iter().all(|v| v.is_finite()));

    let mut g = Graph::<f32>::new();
    let v = g.variable(&l);
    g.softmax_masked(v, &m).unwrap();
    assert_eq!(g.fully_blocked_rows(), 1);
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
    let zero = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
    let x = Tensor::from_rows(&[vec![2.5, 2.5, 2.5]]).unwrap();
    assert_eq!(layer_norm(&x, &one, &zero).unwrap().data(), &[0.0; 3]);

    let one2 = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
    let zero2 = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
    let y = layer_norm(&x, &one2, &zero2).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 1, 64, 4.0);
    let one = Tensor::new(vec![64], vec![1.0; 64]).unwrap();
    let zero = Tensor::new(vec![64], vec![0.0; 64]).unwrap();
    let y = layer_norm(&x, &one, &zero).unwrap();
    let v: Vec<f64> = y.data().iter().map(|&v| f64::from(v)).collect();
    let mean = v.iter().sum::<f64>() / 64.0;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-4, "var {var}");
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f32>::new();
    let v = g.variable(&Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(v), Err(crate::Error::InvalidInput(_))));
}

#[test]
fn gradient_of_sum_wx() {
    // loss = sum(W·x): dW[i][j] = x[j] for every i.
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(), true);
    let x = Tensor::matrix(2, 1, vec![7.0, -2.0]).unwrap();
    let mut g = Graph::<f32>::new();
    let wv = g.param(&params, w);
    let xv = g.constant(&x);
    let y = g.matmul(wv, xv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(w).unwrap(), &[7.0, -2.0, 7.0, -2.0, 7.0, -2.0]);
    grads.accumulate_into(&mut params).unwrap();
    assert_eq!(params.get(w).grad().unwrap().len(), 6);
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut params = ParamSet::new();
    let w = params.insert("w", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap(), false);
    let mut g = Graph::<f32>::new();
    let x = g.variable(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let wv = g.param(&params, w);
    let y = g.matmul(x, wv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(w).is_none());
    assert!(grads.wrt(x).is_some());
    grads.accumulate_into(&mut params).unwrap();
    assert!(!params.get(w).has_grad());
}

#[test]
fn blocked_logit_gets_exactly_zero_gradient() {
    let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
    let mask = Tensor::from_rows(&[vec![0.0, BLOCKED, 0.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![1.5, -3.0, 0.7]]).unwrap();
    let mut g = Graph::<f32>::new();
    let l = g.variable(&logits);
    let p = g.softmax_masked(l, &mask).unwrap();
    let wv = g.constant(&w);
    let y = g.mul(p, wv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let gl = grads.wrt(l).unwrap();
    assert_eq!(gl[1].to_bits(), 0.0f32.to_bits());
    assert!(gl[0] != 0.0 && gl[2] != 0.0);
}

/// Two-layer net exercising every op; returns the loss node and the input leaves.
fn two_layer<S: kernels::Scalar>(g: &mut Graph<S>, leaves: &[Tensor], mask: &Tensor) -> (Var, Vec<Var>) {
    let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t)).collect();
    let (x, w1, w2, scale, shift, row) = (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
    let h = g.matmul(x, w1).unwrap();
    let h = g.layer_norm(h, scale, shift).unwrap();
    let h = g.gelu(h);
    let h = g.add_row(h, row).unwrap();
    let logits = g.matmul_t(h, false, h, true).unwrap();
    let logits = g.scale(logits, 0.5);
    let p = g.softmax_masked(logits, mask).unwrap();
    let mixed = g.matmul(p, h).unwrap();
    let left = g.slice_cols(mixed, 0, 2).unwrap();
    let right = g.slice_cols(mixed, 2, 2).unwrap();
    let right = g.silu(right);
    let both = g.concat_cols(&[right, left]).unwrap();
    let top = g.gather_rows(both, &[2, 0]).unwrap();
    let delta = g.mul_row(top, row).unwrap();
    let both = g.scatter_add_rows(both, delta, &[0, 1]).unwrap();
    let stacked = g.concat_rows(&[both, h]).unwrap();
    let stacked = g.add_scalar(stacked, 0.1);
    let sq = g.mul(stacked, stacked).unwrap();
    let out = g.matmul(sq, w2).unwrap();
    let target: Vec<f32> = (0..out_len(g, out)).map(|i| (i as f32 * 0.37).sin()).collect();
    let loss = g.mse(out, &target).unwrap();
    (loss, vars)
}

fn out_len<S: kernels::Scalar>(g: &Graph<S>, v: Var) -> usize {
    let (r, c) = g.dims(v);
    r * c
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let leaves = vec![
        rand_tensor(&mut rng, 3, 5, 1.0),
        rand_tensor(&mut rng, 5, 4, 0.8),
        rand_tensor(&mut rng, 4, 2, 0.8),
        rand_tensor(&mut rng, 1, 4, 1.5),
        rand_tensor(&mut rng, 1, 4, 0.5),
        rand_tensor(&mut rng, 1, 4, 0.5),
    ];
    let mask = mask_from(&[false, true, false, false, false, true, true, false, false], 3, 3);

    let mut g = Graph::<f32>::new();
    let (loss, vars) = two_layer(&mut g, &leaves, &mask);
    let grads = g.backward(loss).unwrap();

    let eval = |leaves: &[Tensor]| -> f64 {
        let mut g = Graph::<f64>::new();
        let (loss, _) = two_layer(&mut g, leaves, &mask);
        g.value(loss)[0]
    };
    let h = 1e-3f32;
    let mut checked = 0;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap();
        for e in 0..leaves[li].numel() {
            let mut plus = leaves.clone();
            plus[li].data_mut()[e] += h;
            let mut minus = leaves.clone();
            minus[li].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (f64::from(plus[li].data()[e]) - f64::from(minus[li].data()[e]));
            let a = f64::from(analytic[e]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-3, "leaf {li} elem {e}: analytic {a} fd {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, 15 + 20 + 8 + 12);
}

#[test]
fn backward_is_linear_in_loss_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let leaves = vec![
        rand_tensor(&mut rng, 3, 5, 1.0),
        rand_tensor(&mut rng, 5, 4, 0.8),
        rand_tensor(&mut rng, 4, 2, 0.8),
        rand_tensor(&mut rng, 1, 4, 1.5),
        rand_tensor(&mut rng, 1, 4, 0.5),
        rand_tensor(&mut rng, 1, 4, 0.5),
    ];
    let mask = Tensor::zeros(&[3, 3]);
    let mut g = Graph::<f32>::new();
    let (loss, vars) = two_layer(&mut g, &leaves, &mask);
    let base = g.backward(loss).unwrap();
    let scaled_loss = g.scale(loss, 4.0);
    let scaled = g.backward(scaled_loss).unwrap();
    for v in vars {
        for (a, b) in base.wrt(v).unwrap().iter().zip(scaled.wrt(v).unwrap()) {
            assert!((4.0 * a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #[test]
    fn blocked_logits_never_matter(
        seed in 0u64..10_000,
        rows in 1usize..6,
        cols in 1usize..7,
        junk in prop::collection::vec(-1e4f32..1e4, 42),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, rows, cols, 8.0);
        let blocked: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.5)).collect();
        let mask = mask_from(&blocked, rows, cols);
        let mut perturbed = logits.clone();
        for (i, b) in blocked.iter().enumerate() {
            if *b {
                perturbed.data_mut()[i] = junk[i % junk.len()];
            }
        }
        let upstream = rand_tensor(&mut rng, rows, cols, 1.0);
        let run = |l: &Tensor| {
            let mut g = Graph::<f32>::new();
            let lv = g.variable(l);
            let p = g.softmax_masked(lv, &mask).unwrap();
            let u = g.constant(&upstream);
            let y = g.mul(p, u).unwrap();
            let loss = g.sum(y);
            let grads = g.backward(loss).unwrap();
            (g.tensor(p), grads.wrt(lv).unwrap().to_vec())
        };
        let (p0, g0) = run(&logits);
        let (p1, g1) = run(&perturbed);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(p0.data()), bits(p1.data()));
        prop_assert_eq!(bits(&g0), bits(&g1));
        for (i, b) in blocked.iter().enumerate() {
            if *b {
                prop_assert_eq!(g0[i], 0.0);
            }
        }
    }

    #[test]
    fn unblocked_rows_sum_to_one(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, rows, cols, 20.0);
        let blocked: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.5)).collect();
        let out = softmax_masked(&logits, &mask_from(&blocked, rows, cols)).unwrap();
        for i in 0..rows {
            let open = (0..cols).any(|j| !blocked[i * cols + j]);
            let s: f64 = out.probs.row(i).iter().map(|&v| f64::from(v)).sum();
            if open {
                prop_assert!((s - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
    }
}

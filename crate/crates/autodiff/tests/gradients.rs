use proptest::prelude::*;
use protoprompt_autodiff::{
    finite_difference_check, Adam, AdamConfig, GradCheckConfig, Graph, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Attention-like block touching every differentiable op.
fn composite(g: &mut Graph, v: &[Var]) -> Var {
    let (x, w, gamma, beta, bias) = (v[0], v[1], v[2], v[3], v[4]);
    let n = g.layer_norm(x, gamma, beta);
    let q = g.matmul(n, w);
    let q = g.add_row(q, bias);
    let left = g.slice_cols(q, 0, 2);
    let right = g.slice_cols(q, 2, 4);
    let s = g.matmul_nt(left, right);
    let s = g.scale(s, 0.7);
    let a = g.softmax_rows(s);
    let h = g.matmul(a, q);
    let h = g.gelu(h);
    let h = g.concat_cols(&[h, x]);
    let top = g.slice_rows(h, 0, 1);
    let rest = g.slice_rows(h, 1, 3);
    let h = g.concat_rows(&[rest, top]);
    let h = g.sub(h, h);
    let h2 = g.concat_cols(&[q, x]);
    let h = g.add(h, h2);
    let u = g.l2_normalize_rows(h);
    let m = g.mean_rows(u);
    let p = g.mul(m, m);
    let logits = g.matmul_nt(u, m);
    let logits = g.matmul(logits, p);
    let ce_in = g.slice_cols(logits, 0, 4);
    let ce = g.cross_entropy(ce_in, &[0, 3, 1]);
    let s = g.sum(p);
    g.add(ce, s)
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = vec![
        random(&mut rng, 3, 4),
        random(&mut rng, 4, 4),
        random(&mut rng, 1, 4),
        random(&mut rng, 1, 4),
        random(&mut rng, 1, 4),
    ];
    let report =
        finite_difference_check(composite, &params, &GradCheckConfig::default()).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn adam_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = random(&mut rng, 2, 3);
        let target = random(&mut rng, 2, 3);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        for _ in 0..50 {
            let mut g = Graph::new();
            let pv = g.param(p.clone());
            let t = g.constant(target.clone());
            let d = g.sub(pv, t);
            let sq = g.mul(d, d);
            let l = g.sum(sq);
            let grads = g.backward(l).unwrap();
            let gp = grads.get(pv).unwrap().clone();
            adam.step(&mut [&mut p], &[&gp]).unwrap();
        }
        p
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals));
        let s = g.softmax_rows(x);
        let t = g.value(s);
        for r in 0..3 {
            let row = t.row_slice(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(vals in prop::collection::vec(-10.0f64..10.0, 8)) {
        prop_assume!(vals[..4].iter().any(|v| v.abs() > 1e-3));
        prop_assume!(vals[4..].iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 4, vals));
        let y = g.l2_normalize_rows(x);
        let t = g.value(y);
        for r in 0..2 {
            let n: f64 = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn random_composites_pass_gradient_check(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 4),
            random(&mut rng, 1, 4),
            random(&mut rng, 1, 4),
            random(&mut rng, 1, 4),
        ];
        let report = finite_difference_check(composite, &params, &GradCheckConfig::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-3, "{:?}", report);
    }
}

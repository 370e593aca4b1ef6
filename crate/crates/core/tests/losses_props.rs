mod support;

use everadapt_core::losses::{class_conditional_mmd, entropy_loss, KernelConfig};
use everadapt_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;
use support::{cc_mmd_oracle, mmd_lib, mmd_oracle, random_kernel, rows, uniform};

fn set(max_rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..=max_rows)
}

fn kernel() -> impl Strategy<Value = KernelConfig> {
    prop::collection::vec(0.2..4.0f64, 1..4).prop_map(|b| KernelConfig::new(b).unwrap())
}

fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1..=5usize).prop_flat_map(|d| (set(8, d), set(8, d)))
}

proptest! {
    #[test]
    fn mmd_is_symmetric_and_nonnegative((a, b) in pair(), k in kernel()) {
        let ab = mmd_lib(&a, &b, &k);
        let ba = mmd_lib(&b, &a, &k);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= -1e-10);
        prop_assert!(mmd_lib(&a, &a, &k).abs() < 1e-12);
    }

    #[test]
    fn mmd_matches_double_loop((a, b) in pair(), k in kernel()) {
        let lib = mmd_lib(&a, &b, &k);
        prop_assert!((lib - mmd_oracle(&a, &b, &k.bandwidths)).abs() < 1e-10);
    }

    #[test]
    fn permuted_identical_sets_decompose_by_class(
        seed in any::<u64>(),
        n in 2..9usize,
        min in 1..3usize,
    ) {
        let mut r = support::rng(seed);
        let k = random_kernel(&mut r);
        let feats = uniform(&mut r, &[n, 3], -2.0, 2.0);
        let lab = support::labels(&mut r, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let pf = feats.select_rows(&perm).unwrap();
        let pl: Vec<usize> = perm.iter().map(|&i| lab[i]).collect();
        let mut g = Graph::new();
        let s = g.constant(feats.clone());
        let t = g.constant(pf.clone());
        let v = class_conditional_mmd(&mut g, s, &lab, t, &pl, None, &k, 3, min).unwrap();
        let oracle = cc_mmd_oracle(&rows(&feats), &lab, &rows(&pf), &pl, &vec![true; n], &k.bandwidths, 3, min);
        prop_assert!((g.value(v).item() - oracle).abs() < 1e-10);
        prop_assert!(g.value(v).item().abs() < 1e-10);
    }

    #[test]
    fn entropy_is_bounded_and_descends(logits in prop::collection::vec(-4.0..4.0f64, 3)) {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(vec![1, 3], logits.clone()).unwrap());
        let e = entropy_loss(&mut g, x).unwrap();
        let h = g.value(e).item();
        prop_assert!(h >= -1e-12 && h <= 3f64.ln() + 1e-12);
        g.backward(e).unwrap();
        let grad = g.grad(x).unwrap().to_vec();
        let gn: f64 = grad.iter().map(|v| v * v).sum();
        prop_assume!(gn > 1e-8);
        let stepped: Vec<f64> = logits.iter().zip(&grad).map(|(l, d)| l - 1e-3 * d).collect();
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::new(vec![1, 3], stepped).unwrap());
        let e2 = entropy_loss(&mut g2, x2).unwrap();
        prop_assert!(g2.value(e2).item() < h);
    }
}

#[test]
fn class_conditional_mmd_matches_oracle_on_masked_batches() {
    let mut r = support::rng(11);
    for _ in 0..50 {
        let d = r.random_range(1..=5usize);
        let (ns, nt) = (r.random_range(1..=8usize), r.random_range(1..=8usize));
        let k = random_kernel(&mut r);
        let s = uniform(&mut r, &[ns, d], -2.0, 2.0);
        let t = uniform(&mut r, &[nt, d], -2.0, 2.0);
        let ls = support::labels(&mut r, ns, 3);
        let lt = support::labels(&mut r, nt, 3);
        let keep: Vec<bool> = (0..nt).map(|_| r.random_bool(0.7)).collect();
        let min = r.random_range(1..=2usize);
        let mut g = Graph::new();
        let (a, b) = (g.constant(s.clone()), g.constant(t.clone()));
        let v = class_conditional_mmd(&mut g, a, &ls, b, &lt, Some(&keep), &k, 3, min).unwrap();
        let oracle = cc_mmd_oracle(&rows(&s), &ls, &rows(&t), &lt, &keep, &k.bandwidths, 3, min);
        assert!((g.value(v).item() - oracle).abs() < 1e-10);
    }
}

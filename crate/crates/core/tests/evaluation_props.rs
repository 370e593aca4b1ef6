mod support;

use everadapt_core::evaluation::{acc_metric, adapt_metric, bwt_metric, AdaptMode, ResultMatrix};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..7usize).prop_flat_map(|n| {
        (0..n)
            .map(|i| prop::collection::vec(0.0..=100.0f64, i + 1))
            .collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn metrics_match_spreadsheet_oracle(rows in matrix()) {
        let r = ResultMatrix::from_rows(&rows).unwrap();
        let (acc, bwt, adapt, literal) = support::metric_oracle(&rows);
        prop_assert!((acc_metric(&r).unwrap() - acc).abs() < 1e-12);
        match (bwt_metric(&r).unwrap(), bwt) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (None, None) => {}
            other => prop_assert!(false, "bwt mismatch {other:?}"),
        }
        prop_assert!((adapt_metric(&r, AdaptMode::Corrected).unwrap() - adapt).abs() < 1e-12);
        match literal {
            Some(l) => prop_assert!((adapt_metric(&r, AdaptMode::PaperLiteral).unwrap() - l).abs() < 1e-12),
            None => prop_assert!(adapt_metric(&r, AdaptMode::PaperLiteral).is_err()),
        }
    }

    #[test]
    fn no_forgetting_means_zero_bwt(mut rows in matrix()) {
        let n = rows.len();
        prop_assume!(n >= 2);
        let diag: Vec<f64> = (0..n - 1).map(|i| rows[i][i]).collect();
        rows[n - 1][..n - 1].copy_from_slice(&diag);
        let r = ResultMatrix::from_rows(&rows).unwrap();
        prop_assert_eq!(bwt_metric(&r).unwrap(), Some(0.0));
    }

    #[test]
    fn acc_invariant_under_final_row_permutation(rows in matrix(), seed in any::<u64>()) {
        let n = rows.len();
        let mut last = rows[n - 1].clone();
        rand::seq::SliceRandom::shuffle(last.as_mut_slice(), &mut support::rng(seed));
        let mut permuted = rows.clone();
        permuted[n - 1] = last;
        let a = acc_metric(&ResultMatrix::from_rows(&rows).unwrap()).unwrap();
        let b = acc_metric(&ResultMatrix::from_rows(&permuted).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn worked_example() {
    let r = ResultMatrix::from_rows(&[vec![90.0], vec![85.0, 92.0], vec![80.0, 88.0, 95.0]]).unwrap();
    assert!((acc_metric(&r).unwrap() - 87.666_666_666_666_67).abs() < 1e-12);
    assert!((bwt_metric(&r).unwrap().unwrap() + 7.0).abs() < 1e-12);
    assert!((adapt_metric(&r, AdaptMode::Corrected).unwrap() - 92.333_333_333_333_33).abs() < 1e-12);
    assert!((adapt_metric(&r, AdaptMode::PaperLiteral).unwrap() - 138.5).abs() < 1e-12);
}

#[test]
fn cells_are_written_once() {
    let mut r = ResultMatrix::new(2).unwrap();
    r.set(0, 0, 50.0).unwrap();
    assert!(r.set(0, 0, 60.0).is_err());
    assert!(r.set(0, 1, 60.0).is_err());
    assert!(r.set(1, 0, 101.0).is_err());
}

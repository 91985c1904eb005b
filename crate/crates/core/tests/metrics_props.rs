use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scch_core::metrics::{icc31, mae, Icc};

/// ICC(3,1) from the classical two-way ANOVA table of an n×2 matrix:
/// SSE = SST − SSR − SSC.
pub fn anova_icc(labels: &[f64], preds: &[f64]) -> Option<f64> {
    let n = labels.len();
    let k = 2usize;
    let rows: Vec<[f64; 2]> = labels.iter().zip(preds).map(|(&a, &b)| [a, b]).collect();
    let grand: f64 = rows.iter().flatten().sum::<f64>() / (n * k) as f64;
    let sst: f64 = rows.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ssr: f64 = rows
        .iter()
        .map(|r| k as f64 * ((r[0] + r[1]) / k as f64 - grand).powi(2))
        .sum();
    let ssc: f64 = (0..k)
        .map(|j| {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            n as f64 * (m - grand).powi(2)
        })
        .sum();
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1) as f64;
    let mse = sse / ((n - 1) * (k - 1)) as f64;
    let denom = msr + (k - 1) as f64 * mse;
    (denom > 1e-12).then(|| (msr - mse) / denom)
}

#[test]
fn matches_anova_table() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..=5) as f64).collect();
        let preds: Vec<f64> = labels.iter().map(|l| l + rng.random_range(-2.0..2.0)).collect();
        let want = anova_icc(&labels, &preds).unwrap();
        let got = icc31(&labels, &preds).unwrap().value().unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn independent_pairs_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<f64> = (0..10_000).map(|_| rng.random_range(0..=5) as f64).collect();
    let preds: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..5.0)).collect();
    let v = icc31(&labels, &preds).unwrap().value().unwrap();
    assert!(v.abs() < 0.1, "{v}");
}

fn table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(0.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn icc_symmetric_and_shift_invariant((l, p) in table(), c in -10.0f64..10.0) {
        let a = icc31(&l, &p).unwrap();
        let b = icc31(&p, &l).unwrap();
        let ls: Vec<f64> = l.iter().map(|v| v + c).collect();
        let ps: Vec<f64> = p.iter().map(|v| v + c).collect();
        let s = icc31(&ls, &ps).unwrap();
        match (a, b, s) {
            (Icc::Value(a), Icc::Value(b), Icc::Value(s)) => {
                prop_assert!((a - b).abs() < 1e-9);
                prop_assert!((a - s).abs() < 1e-7);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
            (Icc::Undefined, Icc::Undefined, _) => {}
            other => prop_assert!(false, "inconsistent {:?}", other),
        }
    }

    #[test]
    fn mae_translation_scale_and_order((l, p) in table(), c in -10.0f64..10.0, s in 0.1f64..10.0) {
        let base = mae(&l, &p).unwrap();
        let direct = l.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / l.len() as f64;
        prop_assert_eq!(base, direct);
        let shifted = mae(&l.iter().map(|v| v + c).collect::<Vec<_>>(), &p.iter().map(|v| v + c).collect::<Vec<_>>()).unwrap();
        prop_assert!((shifted - base).abs() < 1e-9);
        let scaled = mae(&l.iter().map(|v| v * s).collect::<Vec<_>>(), &p.iter().map(|v| v * s).collect::<Vec<_>>()).unwrap();
        prop_assert!((scaled - s * base).abs() < 1e-9 * s.max(1.0));
        let (lr, pr): (Vec<f64>, Vec<f64>) = (l.iter().rev().copied().collect(), p.iter().rev().copied().collect());
        prop_assert!((mae(&lr, &pr).unwrap() - base).abs() < 1e-12);
    }
}

use proptest::prelude::*;
use scengan_autodiff::Tensor;
use scengan_core::metrics::{
    autocorrelation, cdf_compare, cross_site_correlation, envelope, interval_coverage, MetricError,
};

/// Direct double loop over the centred series.
fn autocorrelation_oracle(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    let mut out = Vec::new();
    for h in 0..=max_lag {
        let mut s = 0.0;
        for t in 0..n - h {
            s += (x[t] - mean) * (x[t + h] - mean);
        }
        out.push(s / var);
    }
    out
}

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 8..60)
        .prop_filter("non-constant", |v| v.iter().any(|&x| (x - v[0]).abs() > 1e-6))
}

fn sample_tensor(n: usize, k: usize, t: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, n * k * t).prop_map(move |d| Tensor::new(vec![n, k, t], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn autocorrelation_matches_oracle(x in series(), lag in 0usize..6) {
        let got = autocorrelation(&x, lag).unwrap();
        let want = autocorrelation_oracle(&x, lag);
        prop_assert_eq!(got.len(), lag + 1);
        prop_assert!((got[0] - 1.0).abs() < 1e-12);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal(s in sample_tensor(5, 3, 4)) {
        let m = cross_site_correlation(&s).unwrap();
        for i in 0..3 {
            prop_assert_eq!(m[i][i], Some(1.0));
            for j in 0..3 {
                prop_assert_eq!(m[i][j], m[j][i]);
                if let Some(r) = m[i][j] {
                    prop_assert!((-1.0..=1.0).contains(&r));
                }
            }
        }
    }

    #[test]
    fn ks_is_invariant_under_increasing_maps(
        a in prop::collection::vec(-2.0f64..2.0, 1..80),
        b in prop::collection::vec(-2.0f64..2.0, 1..80),
    ) {
        let plain = cdf_compare(&a, &b).unwrap().ks;
        let cube = |v: &[f64]| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
        let mapped = cdf_compare(&cube(&a), &cube(&b)).unwrap().ks;
        prop_assert!((0.0..=1.0).contains(&plain));
        prop_assert_eq!(plain, mapped);
        prop_assert_eq!(cdf_compare(&a, &a).unwrap().ks, 0.0);
    }

    #[test]
    fn coverage_never_drops_when_scenarios_are_added(
        set in prop::collection::vec(sample_tensor(1, 2, 3), 1..10),
        realization in sample_tensor(1, 2, 3),
    ) {
        let mut last = 0.0;
        for n in 1..=set.len() {
            let c = interval_coverage(&set[..n], &realization).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(c >= last);
            last = c;
        }
        prop_assert_eq!(interval_coverage(&set, &set[0]).unwrap(), 1.0);
    }

    #[test]
    fn envelope_bounds_every_member(set in prop::collection::vec(sample_tensor(1, 2, 3), 1..8)) {
        let (lo, hi) = envelope(&set);
        for s in &set {
            for (c, v) in s.data().iter().enumerate() {
                prop_assert!(lo[c] <= *v && *v <= hi[c]);
            }
        }
    }
}

#[test]
fn degenerate_inputs_are_errors() {
    assert_eq!(autocorrelation(&[0.3; 10], 2), Err(MetricError::ConstantSeries));
    assert!(matches!(autocorrelation(&[0.1, 0.2, 0.3], 2), Err(MetricError::TooShort { .. })));
    assert_eq!(cdf_compare(&[], &[1.0]).map(|c| c.ks), Err(MetricError::Empty));
    let s = Tensor::new(vec![1, 1, 2], vec![0.1, 0.2]).unwrap();
    let r = Tensor::new(vec![1, 2, 1], vec![0.1, 0.2]).unwrap();
    assert!(matches!(interval_coverage(&[s], &r), Err(MetricError::Shape(_))));
}

#[test]
fn constant_site_has_undefined_correlation() {
    let s = Tensor::new(vec![2, 2, 2], vec![0.5, 0.5, 0.1, 0.9, 0.5, 0.5, 0.4, 0.2]).unwrap();
    let m = cross_site_correlation(&s).unwrap();
    assert_eq!(m[0], vec![None, None]);
    assert_eq!(m[1][1], Some(1.0));
}

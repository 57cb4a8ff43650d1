mod common;

use cloodbench::detect::{GaussianStats, ShePatterns};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn features(n: usize, dim: usize, seed: u64) -> Vec<DVector<f64>> {
    common::random_inputs(n, dim, seed)
        .into_iter()
        .enumerate()
        .map(|(i, v)| DVector::from_vec(v) + DVector::from_element(dim, (i % 3) as f64))
        .collect()
}

/// Class means and pooled within-class covariance computed directly from all samples.
fn direct_moments(f: &[DVector<f64>], y: &[usize]) -> (Vec<(usize, DVector<f64>)>, DMatrix<f64>) {
    let dim = f[0].len();
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let means: Vec<(usize, DVector<f64>)> = classes
        .iter()
        .map(|&c| {
            let rows: Vec<&DVector<f64>> = f
                .iter()
                .zip(y)
                .filter(|(_, l)| **l == c)
                .map(|(v, _)| v)
                .collect();
            let mut m = DVector::zeros(dim);
            for r in &rows {
                m += *r;
            }
            (c, m / rows.len() as f64)
        })
        .collect();
    let mut s = DMatrix::zeros(dim, dim);
    for (v, l) in f.iter().zip(y) {
        let mu = &means.iter().find(|(c, _)| c == l).unwrap().1;
        let d = v - mu;
        s += &d * d.transpose();
    }
    (means, s / f.len() as f64)
}

#[test]
fn incremental_mahalanobis_equals_batch_over_three_tasks() {
    let dim = 4;
    let f = features(90, dim, 3);
    // the third chunk revisits class 1, exercising the merge of a stored class
    let y: Vec<usize> = (0..90).map(|i| [0, 1, 2, 3, 1, 4][i / 15]).collect();
    let mut inc = GaussianStats::new(dim);
    for chunk in [0..30, 30..60, 60..90] {
        inc.maha_update(&f[chunk.clone()], &y[chunk]).unwrap();
    }
    let batch = GaussianStats::fit_batch(&f, &y).unwrap();
    let (means, cov) = direct_moments(&f, &y);
    for (c, m) in &means {
        assert!((&inc.classes[c].mean - m).amax() < 1e-10);
        assert!((&batch.classes[c].mean - m).amax() < 1e-10);
    }
    assert!((&inc.covariance - &cov).amax() < 1e-10);
    assert!((&batch.covariance - &cov).amax() < 1e-10);
    let prec = cov.try_inverse().unwrap();
    for h in features(5, dim, 8) {
        let oracle = means
            .iter()
            .map(|(_, m)| {
                let d = &h - m;
                (d.transpose() * &prec * &d)[0]
            })
            .fold(f64::INFINITY, f64::min);
        let a = inc.maha_score(&h).unwrap();
        let b = batch.maha_score(&h).unwrap();
        assert!((a - oracle).abs() < 1e-8 * oracle.max(1.0), "{a} vs {oracle}");
        assert!((a - b).abs() < 1e-8 * oracle.max(1.0));
    }
}

#[test]
fn incremental_she_equals_batch_over_three_tasks() {
    let f = features(60, 3, 5);
    let y: Vec<usize> = (0..60).map(|i| (i / 10) % 4).collect();
    let pred: Vec<usize> = y
        .iter()
        .enumerate()
        .map(|(i, &c)| if i % 7 == 0 { (c + 1) % 4 } else { c })
        .collect();
    let mut inc = ShePatterns::default();
    for chunk in [0..20, 20..40, 40..60] {
        inc.she_update(&f[chunk.clone()], &y[chunk.clone()], &pred[chunk])
            .unwrap();
    }
    let batch = ShePatterns::she_fit(&f, &y, &pred).unwrap();
    for c in 0..4 {
        let rows: Vec<&DVector<f64>> = (0..60)
            .filter(|&i| y[i] == c && pred[i] == c)
            .map(|i| &f[i])
            .collect();
        let mut m = DVector::zeros(3);
        for r in &rows {
            m += *r;
        }
        let m = m / rows.len() as f64;
        assert!((&inc.patterns[&c].mean - &m).amax() < 1e-12);
        assert!((&batch.patterns[&c].mean - &m).amax() < 1e-12);
        assert_eq!(inc.patterns[&c].count, rows.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn split_point_does_not_change_mahalanobis(cut in 10usize..50, seed in 0u64..1000) {
        let f = features(60, 3, seed);
        let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut inc = GaussianStats::new(3);
        inc.maha_update(&f[..cut], &y[..cut]).unwrap();
        inc.maha_update(&f[cut..], &y[cut..]).unwrap();
        let batch = GaussianStats::fit_batch(&f, &y).unwrap();
        prop_assert!((&inc.covariance - &batch.covariance).amax() < 1e-10);
        for c in 0..3 {
            prop_assert!((&inc.classes[&c].mean - &batch.classes[&c].mean).amax() < 1e-12);
        }
    }
}

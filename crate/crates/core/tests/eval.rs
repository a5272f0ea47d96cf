mod oracles;

use dum_core::eval::*;
use dum_core::rng;
use numcore::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn auroc_equals_pairwise_count_with_ties() {
    let mut r = rng::stream(0, "auroc");
    for case in 0..200 {
        let (n, m) = (r.random_range(1..40), r.random_range(1..40));
        // few distinct levels so ties are common
        let levels = 1 + case % 7;
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| r.random_range(0..levels) as f64 * 0.5).collect() };
        let id = draw(n);
        let ood = draw(m);
        assert_eq!(auroc(&id, &ood).unwrap(), oracles::auroc_pairwise(&id, &ood));
    }
}

#[test]
fn auroc_edge_cases() {
    assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(auroc(&[1.0; 5], &[1.0; 3]).unwrap(), 0.5);
    assert!(auroc(&[], &[1.0]).is_err());
    assert!(auroc(&[f64::NAN], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn auroc_ignores_monotone_rescaling(
        id in prop::collection::vec(-50i32..50, 1..30),
        ood in prop::collection::vec(-50i32..50, 1..30),
        scale in 0.01f64..100.0,
        shift in -10f64..10.0,
    ) {
        let id: Vec<f64> = id.into_iter().map(f64::from).collect();
        let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
        let base = auroc(&id, &ood).unwrap();
        let f = |v: &f64| (v / 50.0).exp() * scale + shift;
        let moved = auroc(&id.iter().map(f).collect::<Vec<_>>(), &ood.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(base, moved);
        prop_assert_eq!(base, oracles::auroc_pairwise(&id, &ood));
        let flipped = auroc(&ood, &id).unwrap();
        prop_assert!((base + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brier_matches_naive_sum(seed in 0u64..1000, n in 1usize..20, c in 2usize..6) {
        let mut r = rng::stream(seed, "brier");
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| r.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let got = brier(&Tensor::from_rows(&rows), &labels).unwrap();
        let want = oracles::brier_naive(&rows, &labels);
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&got));
    }
}

#[test]
fn brier_rejects_off_simplex_rows() {
    assert!(brier(&Tensor::from_rows(&[vec![0.5, 0.6]]), &[0]).is_err());
    assert!(brier(&Tensor::from_rows(&[vec![0.5, 0.5]]), &[2]).is_err());
    assert_eq!(brier(&Tensor::from_rows(&[vec![1.0, 0.0]]), &[0]).unwrap(), 0.0);
    assert_eq!(brier(&Tensor::from_rows(&[vec![0.0, 1.0]]), &[0]).unwrap(), 2.0);
}

#[test]
fn aggregate_mean_and_sample_std() {
    let reports: Vec<SeedReport> = [0.70, 0.72, 0.74]
        .iter()
        .enumerate()
        .map(|(s, &v)| {
            let mut r = SeedReport::new(s as u64);
            r.push("accuracy", "id_test", v);
            r.push("auroc_epistemic", "ood", 1.0 - v);
            r
        })
        .collect();
    let report = aggregate(&reports).unwrap();
    assert_eq!(report.seeds, vec![0, 1, 2]);
    let acc = report.get("accuracy", "id_test").unwrap();
    assert!((acc.mean - 0.72).abs() < 1e-12);
    assert!((acc.std.unwrap() - 0.02).abs() < 1e-12);
    assert_eq!(acc.format(100.0), "72.00 ± 2.00");

    let single = aggregate(&reports[..1]).unwrap();
    assert_eq!(single.get("accuracy", "id_test").unwrap().std, None);
    assert!(aggregate(&[]).is_err());
}

/// Ratio computed from a full nalgebra eigendecomposition of the projected
/// covariance.
fn collapse_oracle(z: &Tensor, train: &Tensor, labels: &[usize]) -> f64 {
    let zm = oracles::to_matrix(z);
    let tm = oracles::to_matrix(train);
    let mean_of = |c: usize| {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let rows: Vec<_> = idx.iter().map(|&i| tm.row(i)).collect();
        rows.iter().fold(nalgebra::RowDVector::zeros(tm.ncols()), |a, r| a + r) / idx.len() as f64
    };
    let par = (mean_of(1) - mean_of(0)).normalize().transpose();
    let centered = {
        let mean = zm.row_mean();
        nalgebra::DMatrix::from_fn(zm.nrows(), zm.ncols(), |i, j| zm[(i, j)] - mean[j])
    };
    let g = zm.nrows() as f64;
    let proj = &centered * &par;
    let var_par = proj.norm_squared() / g;
    let perp = &centered - &proj * par.transpose();
    let cov = perp.transpose() * &perp / g;
    cov.symmetric_eigen().eigenvalues.max() / var_par
}

#[test]
fn collapse_ratio_matches_eigen_oracle() {
    let mut r = rng::stream(6, "collapse");
    for h in [2, 3, 8, 32] {
        let train = Tensor::randn(&[60, h], &mut r);
        let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
        let mut shifted = train.clone();
        for i in (1..60).step_by(2) {
            shifted.set2(i, 0, shifted.get2(i, 0) + 3.0);
        }
        let mut z = Tensor::randn(&[200, h], &mut r);
        for i in 0..200 {
            for j in 0..h {
                z.set2(i, j, z.get2(i, j) * (1.0 + j as f64 * 0.3));
            }
        }
        let got = collapse_ratio(&z, &shifted, &labels).unwrap();
        let want = collapse_oracle(&z, &shifted, &labels);
        assert!((got - want).abs() < 1e-8 * want, "h {h}: {got} vs {want}");
    }
}

#[test]
fn collapse_ratio_of_a_line_is_zero() {
    let train = Tensor::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0]]);
    let z = Tensor::from_rows(&(0..20).map(|i| vec![i as f64, 0.0]).collect::<Vec<_>>());
    assert_eq!(collapse_ratio(&z, &train, &[0, 1]).unwrap(), 0.0);
    assert!(collapse_ratio(&z, &train, &[0, 0]).is_err());
    assert!(collapse_ratio(&z, &train, &[0, 2]).is_err());
}

//! Checks against independent reference computations.

use lrgan_core::eval::{
    cross_term, embed_and_stats, frechet_distance, frechet_embedder, make_synthetic_dataset,
    sqrt_psd, symmetry_score, DatasetKind, DistributionStats, SyntheticDatasetSpec,
};
use lrgan_core::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi eigenvalues of a symmetric matrix, iterated to machine
/// precision. Written without nalgebra's decomposition so it shares no
/// code with the library.
fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (m[(i, j)] + m[(j, i)])).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn oracle_frechet(a: &DistributionStats, b: &DistributionStats) -> f64 {
    // Tr √(Σ_a Σ_b) through the eigenvalues of the symmetric product.
    let d = a.cov.nrows();
    assert!(
        (0..d).all(|i| (0..d).all(|j| i == j || a.cov[(i, j)] == 0.0)),
        "oracle handles diagonal Σ_a"
    );
    let ra = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| a.cov[(i, i)].max(0.0).sqrt()));
    let m = &ra * &b.cov * &ra;
    let tr: f64 = jacobi_eigenvalues(&m)
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr
}

#[test]
fn diagonal_case_matches_closed_form_and_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let d = rng.random_range(1..8);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let sa = DistributionStats {
            mean: mu.clone(),
            cov: DMatrix::from_diagonal(&DVector::from_iterator(d, a.iter().map(|x| x * x))),
        };
        let sb = DistributionStats {
            mean: mu,
            cov: DMatrix::from_diagonal(&DVector::from_iterator(d, b.iter().map(|x| x * x))),
        };
        let closed: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let got = frechet_distance(&sa, &sb).unwrap();
        assert!((got - closed).abs() <= 1e-8, "{got} vs {closed}");
        assert!((got - oracle_frechet(&sa, &sb)).abs() <= 1e-8);
    }
}

#[test]
fn jacobi_agrees_on_a_full_symmetric_matrix() {
    // Sanity for the oracle itself: eigenvalues of [[2,1],[1,2]] are 1, 3.
    let mut ev = jacobi_eigenvalues(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    ev.sort_by(f64::total_cmp);
    assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let x = DMatrix::from_fn(d, d + 2, |_, _| rng.random_range(-1.0..1.0));
    &x * x.transpose() / (d + 2) as f64
}

#[test]
fn square_root_of_symmetrized_product_squares_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let d = rng.random_range(1..12);
        let (a, b) = (random_psd(&mut rng, d), random_psd(&mut rng, d));
        let m = cross_term(&a, &b);
        let s = sqrt_psd(&m);
        let rel = (&s * &s - &m).norm() / m.norm();
        assert!(rel <= 1e-8, "relative residual {rel:e}");
        // Its trace matches the eigenvalues of Σ_aΣ_b from the oracle.
        let tr_oracle: f64 = jacobi_eigenvalues(&m)
            .iter()
            .map(|l| l.max(0.0).sqrt())
            .sum();
        assert!((s.trace() - tr_oracle).abs() <= 1e-8 * tr_oracle.max(1.0));
    }
}

fn stats_of(images: &[Tensor<f64>]) -> DistributionStats {
    embed_and_stats(images, &frechet_embedder(32).unwrap()).unwrap()
}

fn dataset(kind: DatasetKind, count: usize, seed: u64) -> Vec<Tensor<f64>> {
    make_synthetic_dataset(&SyntheticDatasetSpec::new(kind, count, 32, seed)).unwrap()
}

#[test]
fn dataset_against_itself_is_zero_and_halves_are_symmetric() {
    let d = dataset(DatasetKind::Mirror, 120, 4);
    let s = stats_of(&d);
    assert!(frechet_distance(&s, &s).unwrap() <= 1e-8);
    let (a, b) = (stats_of(&d[..60]), stats_of(&d[60..]));
    let (ab, ba) = (
        frechet_distance(&a, &b).unwrap(),
        frechet_distance(&b, &a).unwrap(),
    );
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-10, "{ab} vs {ba}");
}

#[test]
fn different_kinds_are_farther_than_same_kind_splits() {
    let mut cross = Vec::new();
    let mut same = Vec::new();
    for seed in 0..3 {
        let m = dataset(DatasetKind::Mirror, 160, seed);
        let g = dataset(DatasetKind::GradientBlobs, 80, seed + 100);
        same.push(frechet_distance(&stats_of(&m[..80]), &stats_of(&m[80..])).unwrap());
        cross.push(frechet_distance(&stats_of(&m[..80]), &stats_of(&g)).unwrap());
    }
    same.sort_by(f64::total_cmp);
    cross.sort_by(f64::total_cmp);
    assert!(cross[1] > same[1], "cross {cross:?} same {same:?}");
}

#[test]
fn uniform_noise_scores_two_thirds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::<f64>::from_fn(vec![3, 32, 32], |_| rng.random_range(-1.0..1.0));
    let s = symmetry_score(&img).unwrap();
    assert!((s - 2.0 / 3.0).abs() <= 0.05, "{s}");
}

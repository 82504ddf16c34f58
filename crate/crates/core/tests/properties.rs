use eigmeta::data::SupportSet;
use eigmeta::linalg::{cholesky, gen_eig_max, rayleigh_quotient, spd_solve, sym_eig};
use eigmeta::model::{Architecture, ModelParams};
use eigmeta::objective::{empirical_auc, smoothed_auc, EpisodeScore};
use eigmeta::rng::stream;
use eigmeta::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, &[rows as u64, cols as u64]);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn spd(n: usize, seed: u64) -> Matrix {
    let b = random(n, n, seed);
    b.t_matmul(&b).add(&Matrix::identity(n).scale(0.1))
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.sub(b).max_abs() <= tol * (1.0 + b.max_abs())
}

fn params(j: usize, seed: u64) -> ModelParams {
    let arch = Architecture {
        n_attributes: 3,
        hidden: 8,
        repr_dim: 4,
        embed_dim: j,
    };
    let mut rng = stream(seed, &[0x7a]);
    let mut p = ModelParams::init(arch, &mut rng);
    p.rho = Matrix::scalar(rng.gen_range(-2.0..1.0));
    p.center = (0..j).map(|_| rng.gen_range(-1.0..1.0)).collect();
    p
}

fn support(n_normal: usize, n_anomaly: usize, seed: u64) -> SupportSet {
    let anomalies = random(n_anomaly, 3, seed ^ 0xa).map(|x| 3.0 * x + 2.0);
    SupportSet::new(random(n_normal, 3, seed), anomalies)
}

fn reversed(m: &Matrix) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..m.rows()).rev().map(|i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigendecomposition_reconstructs(n in 1usize..9, seed in any::<u64>()) {
        let a = random(n, n, seed).symmetrized();
        let pairs = sym_eig(&a).unwrap();
        let mut rebuilt = Matrix::zeros(n, n);
        for p in &pairs {
            rebuilt.add_assign(&Matrix::outer(&p.vector, &p.vector).scale(p.value));
        }
        prop_assert!(close(&rebuilt, &a, 1e-10));
        prop_assert!(pairs.windows(2).all(|w| w[0].value <= w[1].value));
        let u = Matrix::from_rows(&pairs.iter().map(|p| p.vector.clone()).collect::<Vec<_>>());
        prop_assert!(close(&u.matmul_t(&u), &Matrix::identity(n), 1e-12));
    }

    #[test]
    fn cholesky_factor_is_lower_and_exact(n in 1usize..9, seed in any::<u64>()) {
        let a = spd(n, seed);
        let l = cholesky(&a).unwrap();
        prop_assert!(l.is_lower_triangular());
        prop_assert!(l.diagonal().iter().all(|&d| d > 0.0));
        prop_assert!(close(&l.matmul_t(&l), &a, 1e-12));
        let b = random(n, 2, seed ^ 1);
        let x = spd_solve(&a, &b).unwrap();
        prop_assert!(close(&a.matmul(&x), &b, 1e-9));
    }

    #[test]
    fn generalized_eigenvector_solves_the_pencil(n in 1usize..7, seed in any::<u64>()) {
        let s_a = random(2, n, seed);
        let s_a = s_a.t_matmul(&s_a);
        let s_n = spd(n, seed ^ 2);
        let top = gen_eig_max(&s_a, &s_n).unwrap();
        let w = Matrix::column_vector(&top.vector);
        let residual = s_a.matmul(&w).sub(&s_n.matmul(&w).scale(top.value));
        prop_assert!(residual.max_abs() <= 1e-9 * (1.0 + s_a.max_abs() + top.value * s_n.max_abs()));
        let norm: f64 = top.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert!((rayleigh_quotient(&s_a, &s_n, &top.vector) - top.value).abs() <= 1e-9 * (1.0 + top.value));
    }

    #[test]
    fn auc_estimates_stay_in_unit_interval(
        a in prop::collection::vec(-50.0f64..50.0, 1..6),
        n in prop::collection::vec(-50.0f64..50.0, 1..6),
    ) {
        let es = EpisodeScore::new(a, n);
        let e = empirical_auc(&es).unwrap();
        let s = smoothed_auc(&es).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((0.0..=1.0).contains(&s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adaptation_ignores_support_order(j in 2usize..6, n_anomaly in 1usize..4, seed in any::<u64>()) {
        let p = params(j, seed);
        let s = support(8, n_anomaly, seed);
        let flipped = SupportSet::new(reversed(&s.normals), reversed(&s.anomalies));
        let a = p.adapt(&s).unwrap();
        let b = p.adapt(&flipped).unwrap();
        let (wa, wb) = (a.w().unwrap(), b.w().unwrap());
        let dot: f64 = wa.iter().zip(wb).map(|(x, y)| x * y).sum();
        prop_assert!(dot.abs() >= 1.0 - 1e-9, "cos {dot}");
    }

    #[test]
    fn normal_scatter_dominates_its_ridge(j in 2usize..6, seed in any::<u64>()) {
        let p = params(j, seed);
        let s = support(6, 2, seed);
        let r = p.encode_task(&s).unwrap();
        let (s_a, s_n) = p.scatter_matrices(&s, &r).unwrap();
        let eta = p.eta();
        let lowest = sym_eig(&s_n).unwrap()[0].value;
        prop_assert!(lowest - eta >= -1e-10 * (1.0 + eta));
        prop_assert!(sym_eig(&s_a).unwrap()[0].value >= -1e-10 * (1.0 + s_a.max_abs()));
    }

    #[test]
    fn scores_are_nonnegative(j in 2usize..6, seed in any::<u64>()) {
        let p = params(j, seed);
        let s = support(6, 2, seed);
        let adapted = p.adapt(&s).unwrap();
        let scores = p.anomaly_score(&random(10, 3, seed ^ 3), &adapted).unwrap();
        prop_assert!(scores.iter().all(|&x| x >= 0.0 && x.is_finite()));
    }
}

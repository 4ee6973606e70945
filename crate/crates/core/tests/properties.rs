use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use statfem_euclid::config::BenchmarkConfig;
use statfem_euclid::euclid::{self, RegressionProblem, VolumetricConstraint};
use statfem_euclid::io;
use statfem_euclid::mesh::{build_plate_with_hole, shape_functions};
use statfem_euclid::metrics::{self, InvariantRanges};
use statfem_euclid::pce::{self, PCExpansion};
use statfem_euclid::statfem::{self, GaussianField, ObservationSet};
use statfem_euclid::{FeatureLibrary, MaterialParams};

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * 1e-2
}

fn random_problem(rng: &mut ChaCha8Rng, rows: usize, noise: f64) -> RegressionProblem {
    let lib = FeatureLibrary::default();
    let a = DMatrix::from_fn(rows, lib.n_phi(), |_, _| rng.random_range(-1.0..1.0));
    let mut k = DVector::zeros(lib.n_phi());
    k[0] = 0.5;
    k[9] = 1.5;
    let p = &a * &k + DVector::from_fn(rows, |_, _| noise * rng.random_range(-1.0..1.0));
    RegressionProblem { a, p, library: lib }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn plate_mesh_invariants(hole in 0.08f64..0.4, refinement in 1usize..4, width in 0.9f64..1.6) {
        let mesh = build_plate_with_hole(width, 1.0, hole.min(0.45 * width.min(1.0)), refinement).unwrap();
        prop_assert!(mesh.validate().is_ok());
        let free = mesh.free_dofs();
        prop_assert_eq!(free.len() + mesh.dirichlet_dofs.len(), mesh.n_gdof());
        prop_assert!(free.iter().all(|d| !mesh.dirichlet_dofs.contains(d)));
        let edges: f64 = mesh.neumann_edges.iter().map(|&(e, k)| mesh.edge_length(e, k)).sum();
        prop_assert!((edges - mesh.height).abs() <= 1e-12 * mesh.height);
        for e in 0..mesh.elements.len() {
            for gp in mesh.gauss_points(e).unwrap() {
                prop_assert!(gp.weight > 0.0);
                let x = mesh.elements[e].iter().zip(gp.n).fold([0.0, 0.0], |acc, (&a, n)| {
                    [acc[0] + n * mesh.nodes[a][0], acc[1] + n * mesh.nodes[a][1]]
                });
                prop_assert!((x[0] - gp.x[0]).abs() < 1e-14 && (x[1] - gp.x[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_functions_partition_unity(xi in -1.0f64..1.0, eta in -1.0f64..1.0) {
        let n = shape_functions(xi, eta);
        prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        prop_assert!(n.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn chaos_covariance_is_psd(seed in any::<u64>(), order in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..=order).map(|_| DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0))).collect();
        let g = pce::pce_moments(&PCExpansion { coeffs });
        let min = g.cov.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-12 * g.cov.trace());
        prop_assert!(g.asymmetry() == 0.0);
    }

    #[test]
    fn extra_sensor_never_adds_variance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let prior = GaussianField::new(DVector::zeros(n), random_spd(n, &mut rng)).unwrap();
        let dofs: Vec<usize> = vec![0, 3, 7];
        let mut more = dofs.clone();
        more.push(10);
        let y = |m: usize| vec![DVector::from_element(m, 0.1)];
        let a = statfem::posterior_update(&prior, &ObservationSet::new(dofs, n, y(3), 0.2).unwrap()).unwrap();
        let b = statfem::posterior_update(&prior, &ObservationSet::new(more, n, y(4), 0.2).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!(b.cov[(i, i)] <= a.cov[(i, i)] + 1e-12);
            prop_assert!(a.cov[(i, i)] <= prior.cov[(i, i)] + 1e-12);
        }
    }

    #[test]
    fn lasso_solutions_satisfy_kkt(seed in any::<u64>(), log_lambda in -3.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = random_problem(&mut rng, 40, 0.05);
        let vc = VolumetricConstraint { r: 3.0 };
        let sol = euclid::solve_constrained_lasso(&prob, 10f64.powf(log_lambda), Some(vc)).unwrap();
        prop_assert!(sol.kkt.complementarity < 1e-7, "{:?}", sol.kkt);
        prop_assert!(sol.kkt.equality_residual < 1e-10);
        prop_assert!(vc.normal(&prob.library).dot(&sol.kappa).abs() < 1e-10);
        prop_assert!(sol.kappa.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn unpenalized_argmin_is_scale_invariant(seed in any::<u64>(), log_s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = random_problem(&mut rng, 30, 0.1);
        let a = euclid::solve_constrained_lasso(&prob, 0.0, None).unwrap().kappa;
        let b = euclid::solve_constrained_lasso(&prob.scaled(10f64.powf(log_s)), 0.0, None).unwrap().kappa;
        prop_assert!((&a - &b).norm() <= 1e-6 * a.norm().max(1.0));
    }

    #[test]
    fn selection_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob = random_problem(&mut rng, 30, 0.02);
        let settings = euclid::EuclidSettings { n_lambda: 60, reference_rmse: 1000.0, ..Default::default() };
        let a = euclid::discover(&prob, &settings);
        let b = euclid::discover(&prob, &settings);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.lambda_star, b.lambda_star);
                prop_assert_eq!(a.kappa_star, b.kappa_star);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "nondeterministic outcome"),
        }
    }

    #[test]
    fn energy_error_is_homogeneous(c in 0.1f64..3.0) {
        let nh = MaterialParams::neo_hookean(FeatureLibrary::default()).unwrap();
        let scaled = MaterialParams::new(nh.library.clone(), &nh.kappa * c).unwrap();
        let r = InvariantRanges { j1: [3.0, 3.3], j2: [3.0, 3.2], j3: [0.9, 1.2] };
        let e = metrics::error_eps_w(&nh, &scaled, &r, 12).unwrap();
        prop_assert!((e.value - (c - 1.0).powi(2)).abs() < 1e-10);
    }

    #[test]
    fn config_toml_round_trip(seed in any::<u64>(), sigma in 0.0f64..1e-2, tau in 1.0f64..500.0, preset in "(sparse3|medium13|dense38)") {
        let mut c = BenchmarkConfig::default();
        c.seed = seed;
        c.noise.sigma_e = sigma;
        c.euclid.tau = tau;
        c.sensors.preset = preset;
        let back = BenchmarkConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn gaussian_field_files_round_trip(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = GaussianField::new(DVector::from_fn(n, |_, _| rng.random_range(-1e3..1e3)), random_spd(n, &mut rng)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = io::write_gaussian_field(dir.path(), "f", &f).unwrap();
        prop_assert_eq!(io::read_gaussian_field(&m).unwrap(), f);
    }
}

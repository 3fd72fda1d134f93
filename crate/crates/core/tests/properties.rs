use hybrid_enkf::dynamics::{propagate_window, step_euler, ModelSpec, StateVector};
use hybrid_enkf::enkf::{analyze, kalman_gain, Ensemble, EnsembleKind, ObservationModel};
use hybrid_enkf::fcnn::{model_from_bytes, model_to_bytes, FcnnConfig, FcnnModel};
use hybrid_enkf::numerics::{covariance, gaussian_sample, spd_solve, GaussianSpec, Matrix, RngStream};
use hybrid_enkf::pipeline::epsilon_metric;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Matrix::from_row_major(rows, cols, v).unwrap())
}

fn ensemble_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..5, 2usize..10).prop_flat_map(|(d, n)| matrix(d, n, 10.0))
}

fn brute_force_covariance(s: &Matrix) -> Matrix {
    let (d, n) = (s.rows(), s.cols());
    let mean: Vec<f64> = (0..d)
        .map(|i| (0..n).map(|k| s[(i, k)]).sum::<f64>() / n as f64)
        .collect();
    let mut c = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..n {
                acc += (s[(i, k)] - mean[i]) * (s[(j, k)] - mean[j]);
            }
            c[(i, j)] = acc / (n - 1) as f64;
        }
    }
    c
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn ens(m: Matrix, kind: EnsembleKind) -> Ensemble {
    Ensemble::new(m, kind, 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_matches_brute_force(s in ensemble_matrix()) {
        let c = covariance(&s).unwrap();
        prop_assert!(max_abs_diff(&c, &brute_force_covariance(&s)) <= 1e-12 * 100.0f64.max(c.norm_inf()));
    }

    #[test]
    fn covariance_ignores_common_shift(s in ensemble_matrix(), shift in -50.0f64..50.0) {
        let mut shifted = s.clone();
        for i in 0..s.rows() {
            for k in 0..s.cols() {
                shifted[(i, k)] += shift * (i as f64 + 1.0);
            }
        }
        let (a, b) = (covariance(&s).unwrap(), covariance(&shifted).unwrap());
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9 * a.norm_inf().max(1.0));
    }

    #[test]
    fn spd_solve_residual(m in matrix(5, 5, 2.0), b in matrix(5, 3, 5.0)) {
        let a = m.transpose().matmul(&m).unwrap().add(&Matrix::identity(5)).unwrap();
        let x = spd_solve(&a, &b).unwrap();
        let r = a.matmul(&x).unwrap().sub(&b).unwrap();
        prop_assert!(r.norm_inf() <= 1e-10 * (a.norm_inf() * x.norm_inf() + b.norm_inf()));
    }

    #[test]
    fn zero_variance_gaussian_is_the_mean(mean in prop::collection::vec(-1e3f64..1e3, 1..6), seed: u64) {
        let mut rng = RngStream::new(seed, 0);
        let spec = GaussianSpec::new(mean.clone(), 0.0).unwrap();
        prop_assert_eq!(gaussian_sample(&mut rng, &spec, mean.len()).unwrap(), mean);
    }

    #[test]
    fn window_composition_is_bit_exact(x0 in prop::collection::vec(-10.0f64..10.0, 3), k1 in 1usize..12, k2 in 1usize..12) {
        let x = StateVector::new(vec![x0[0], x0[1], x0[2] + 25.0], 0);
        let both = propagate_window(&x, &ModelSpec::lorenz63(k1 + k2)).unwrap();
        let mid = propagate_window(&x, &ModelSpec::lorenz63(k1)).unwrap();
        let split = propagate_window(&mid, &ModelSpec::lorenz63(k2)).unwrap();
        prop_assert_eq!(both, split);
    }

    #[test]
    fn zero_innovation_is_a_fixed_point(f in (1usize..4).prop_flat_map(|d| matrix(d, 8, 5.0))) {
        let obs = ObservationModel::full(f.rows(), 1.0).unwrap();
        let s_f = ens(f.clone(), EnsembleKind::Forecast);
        let s_m = ens(obs.project_ensemble(&f), EnsembleKind::Measurement);
        let s_a = analyze(&s_f, &s_m, &obs).unwrap();
        prop_assert_eq!(s_a.members, f);
    }

    #[test]
    fn analysis_commutes_with_member_permutation(
        f in matrix(3, 6, 5.0),
        m in matrix(3, 6, 5.0),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let obs = ObservationModel::full(3, 1.0).unwrap();
        let s_a = analyze(&ens(f.clone(), EnsembleKind::Forecast), &ens(m.clone(), EnsembleKind::Measurement), &obs).unwrap();
        let permute = |x: &Matrix| Matrix::from_columns(&perm.iter().map(|&p| x.column(p)).collect::<Vec<_>>()).unwrap();
        let p_a = analyze(&ens(permute(&f), EnsembleKind::Forecast), &ens(permute(&m), EnsembleKind::Measurement), &obs).unwrap();
        prop_assert!(max_abs_diff(&p_a.members, &permute(&s_a.members)) <= 1e-9 * s_a.members.norm_inf().max(1.0));
    }

    #[test]
    fn huge_r_trusts_the_forecast(f in matrix(2, 5, 5.0), m in matrix(2, 5, 5.0)) {
        let obs = ObservationModel::full(2, 1.0).unwrap();
        let p = covariance(&f).unwrap();
        let r = covariance(&m).unwrap().add(&Matrix::identity(2).scale(0.1)).unwrap().scale(1e12);
        let k = kalman_gain(&p, &r, &obs).unwrap();
        let s_a = f.add(&k.matmul(&m.sub(&f).unwrap()).unwrap()).unwrap();
        for (a, b) in s_a.as_slice().iter().zip(f.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn relu_network_is_positively_homogeneous(
        x in prop::collection::vec(-3.0f64..3.0, 5),
        c in 0.01f64..100.0,
        seed: u64,
    ) {
        let net = FcnnModel::initialize(FcnnConfig::new(vec![5, 4, 3], seed)).unwrap();
        let y = net.forward(&x).unwrap();
        let xc: Vec<f64> = x.iter().map(|v| v * c).collect();
        let yc = net.forward(&xc).unwrap();
        for (a, b) in y.iter().zip(&yc) {
            prop_assert!((a * c - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn model_file_round_trip_is_lossless(seed: u64, shift in -1e3f64..1e3, scale in 1e-3f64..1e3) {
        let mut net = FcnnModel::initialize(FcnnConfig::new(vec![4, 6, 2], seed)).unwrap();
        net.input_norm.mean = vec![shift, -shift / 3.0, 0.1, 1e-300];
        net.input_norm.std = vec![scale, scale / 7.0, 1.0, 3.0];
        net.output_norm.mean = vec![shift / 11.0, 2.0 / 3.0];
        let back = model_from_bytes(&model_to_bytes(&net).unwrap()).unwrap();
        prop_assert_eq!(&back, &net);
        let x = [0.3, shift, -1.7, scale];
        prop_assert_eq!(back.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn epsilon_is_nonnegative_and_zero_only_on_equality(
        a in prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4), 1..4),
        b in prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4), 1..4),
    ) {
        let k = a.len().min(b.len());
        let (a, b) = (&a[..k], &b[..k]);
        let eps = epsilon_metric(a, b).unwrap();
        prop_assert!(eps.iter().all(|&e| e >= 0.0));
        prop_assert!(epsilon_metric(a, a).unwrap().iter().all(|&e| e == 0.0));
        for (j, e) in eps.iter().enumerate() {
            let same = (0..k).all(|t| a[t][j] == b[t][j]);
            prop_assert_eq!(*e == 0.0, same);
        }
    }
}

#[test]
fn fixed_points_are_preserved_exactly() {
    let origin = StateVector::new(vec![0.0; 3], 0);
    let l63 = ModelSpec::lorenz63(8);
    assert_eq!(step_euler(&origin, &l63).unwrap().values, origin.values);
    assert_eq!(propagate_window(&origin, &l63).unwrap().values, origin.values);
    let l96 = ModelSpec::lorenz96(5);
    let rest = StateVector::new(vec![8.0; 10], 0);
    assert_eq!(step_euler(&rest, &l96).unwrap().values, rest.values);
    assert_eq!(propagate_window(&rest, &l96).unwrap().values, rest.values);
}

#[test]
fn observation_trust_limit() {
    let f = Matrix::from_rows(&[vec![1.0, 2.0, 4.0, 0.5], vec![-1.0, 0.0, 2.0, 1.0]]).unwrap();
    let m_unit = Matrix::from_rows(&[vec![0.3, -0.2, 0.1, -0.2], vec![0.1, 0.4, -0.3, -0.2]]).unwrap();
    let mut previous = f64::INFINITY;
    for a in [1.0, 1e-2, 1e-4, 1e-6, 1e-8] {
        let obs = ObservationModel::full(2, a).unwrap();
        // Measurement spread scales with sqrt(A) around a fixed mean.
        let mut m = m_unit.scale(a.sqrt());
        for i in 0..2 {
            for k in 0..4 {
                m[(i, k)] += 3.0;
            }
        }
        let s_a = analyze(
            &ens(f.clone(), EnsembleKind::Forecast),
            &ens(m.clone(), EnsembleKind::Measurement),
            &obs,
        )
        .unwrap();
        let gap = max_abs_diff(&s_a.members, &m);
        assert!(gap < previous, "A = {a}: gap {gap} did not shrink");
        previous = gap;
    }
    assert!(previous < 1e-6);
}

/// L63 from (1, 1, 1) to T = 0.1; reference with dt / 100.
fn euler_error(dt: f64) -> f64 {
    let end = |h: f64| {
        let steps = (0.1 / h).round() as usize;
        let m = ModelSpec::lorenz63(steps).with_dt(h);
        propagate_window(&StateVector::new(vec![1.0, 1.0, 1.0], 0), &m)
            .unwrap()
            .values
    };
    let (coarse, fine) = (end(dt), end(dt / 100.0));
    coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn euler_converges_at_first_order() {
    for dt in [0.01, 0.005] {
        let ratio = euler_error(dt) / euler_error(dt / 2.0);
        assert!((1.8..=2.2).contains(&ratio), "dt {dt}: ratio {ratio}");
    }
}

#[test]
fn nearby_lorenz63_states_separate() {
    let m = ModelSpec::lorenz63(1);
    let mut a = StateVector::new(vec![1.0, 1.0, 20.0], 0);
    let mut b = StateVector::new(vec![1.0 + 1e-8, 1.0, 20.0], 0);
    let mut separated_at = None;
    for step in 1..=2500 {
        a = step_euler(&a, &m).unwrap();
        b = step_euler(&b, &m).unwrap();
        let gap = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        if gap >= 1.0 {
            separated_at = Some(step as f64 * 0.01);
            break;
        }
    }
    let t = separated_at.expect("no order-one separation within t = 25");
    assert!(t <= 25.0);
}

#[test]
fn lorenz63_truths_stay_in_the_attractor_box() {
    use hybrid_enkf::pipeline::{generate_truths, ExperimentConfig, TruthSettings};
    let config = ExperimentConfig::lorenz63_paper();
    let truths = generate_truths(&config.model_spec().unwrap(), &TruthSettings::from(&config), config.seed).unwrap();
    for t in &truths {
        for s in &t.states {
            let v = &s.values;
            assert!(v[0].abs() <= 25.0 && v[1].abs() <= 35.0 && (0.0..=55.0).contains(&v[2]), "{v:?}");
        }
    }
}

use msdgp::eval::{self, format_sig3, Metrics, Report};
use msdgp::data::{Situation, Split};
use msdgp::gp_layer::{GpLayer, LayerDims, MeanFn};
use msdgp::kernel::{arccos_gram, kernel_diag, ArcCosParams};
use msdgp::rng::gaussian_sample;
use msdgp::{Rng, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d))
}

fn random_layer(seed: u64, m: usize, din: usize, dout: usize) -> GpLayer {
    let mut rng = Rng::new(seed);
    let mut layer = GpLayer::new(
        LayerDims {
            input: din,
            output: dout,
            inducing: m,
        },
        MeanFn::Zero,
        1.0,
    );
    layer.init_inducing(&mut rng);
    layer.q_mu = gaussian_sample(&[m, dout], &mut rng);
    for d in 0..dout {
        let mut l = gaussian_sample(&[m, m], &mut rng).tril().scale(0.3);
        for i in 0..m {
            l.set(i, i, 0.2 + l.at(i, i).abs());
        }
        layer.set_q_chol(d, &l).unwrap();
    }
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_spd_matrices(a in matrix(5, 5)) {
        let spd = a.matmul_nt(&a).add_diagonal(0.5);
        let l = spd.cholesky().unwrap();
        prop_assert!(l.matmul_nt(&l).max_abs_diff(&spd) < 1e-9);
        for i in 0..5 {
            prop_assert!(l.at(i, i) > 0.0);
            for j in i + 1..5 {
                prop_assert_eq!(l.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd_with_matching_diagonal(x in matrix(6, 3), log_var in -2.0f64..2.0) {
        let p = ArcCosParams { log_variance: log_var };
        let k = arccos_gram(&x, &x, &p);
        prop_assert!(k.max_abs_diff(&k.transpose()) < 1e-12);
        let diag = kernel_diag(&x, &p);
        for (i, d) in diag.iter().enumerate() {
            prop_assert!((k.at(i, i) - d).abs() <= 1e-9 * d.max(1.0));
        }
        let scale = diag.iter().cloned().fold(1.0, f64::max);
        prop_assert!(k.add_diagonal(1e-8 * scale).cholesky().is_ok());
    }

    #[test]
    fn gram_scales_with_input_norms(x in matrix(3, 2), y in matrix(4, 2), c in 0.1f64..5.0) {
        let p = ArcCosParams::default();
        let base = arccos_gram(&x, &y, &p);
        let scaled = arccos_gram(&x.scale(c), &y, &p);
        prop_assert!(scaled.max_abs_diff(&base.scale(c)) < 1e-9 * (1.0 + base.frobenius_norm() * c));
    }

    #[test]
    fn conditional_variances_are_positive_and_kl_nonnegative(seed in 0u64..1000, h in matrix(7, 2)) {
        let layer = random_layer(seed, 4, 2, 2);
        let (_, var) = layer.conditional(&h).unwrap();
        prop_assert!(var.data().iter().all(|&v| v >= 1e-12));
        prop_assert!(layer.kl_to_prior().unwrap() >= 0.0);
    }

    #[test]
    fn mcd_is_a_metric_on_single_frames(a in matrix(1, 5), b in matrix(1, 5), c in matrix(1, 5)) {
        let ab = eval::mcd(&a, &b).unwrap();
        prop_assert_eq!(ab, eval::mcd(&b, &a).unwrap());
        prop_assert_eq!(eval::mcd(&a, &a).unwrap(), 0.0);
        let bc = eval::mcd(&b, &c).unwrap();
        let ac = eval::mcd(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn f0_error_ignores_common_units(
        f in prop::collection::vec(50.0f64..500.0, 6),
        g in prop::collection::vec(50.0f64..500.0, 6),
        unit in 0.001f64..1000.0,
    ) {
        let mask = [true, false, true, true, false, true];
        let a = eval::f0_rmse_cents(&f, &g, &mask).unwrap().cents;
        let fs: Vec<f64> = f.iter().map(|v| v * unit).collect();
        let gs: Vec<f64> = g.iter().map(|v| v * unit).collect();
        let b = eval::f0_rmse_cents(&fs, &gs, &mask).unwrap().cents;
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn sig3_keeps_three_significant_digits(v in 0.001f64..9000.0) {
        let s = format_sig3(v);
        let parsed: f64 = s.parse().unwrap();
        prop_assert!((parsed - v).abs() <= 0.005 * v + 1e-12, "{} -> {}", v, s);
        let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
        prop_assert!(digits.trim_start_matches('0').len() >= 3 || v >= 1000.0);
    }

    #[test]
    fn tables_are_deterministic(values in prop::collection::vec((1.0f64..20.0, 50.0f64..900.0), 1..5)) {
        let reports: Vec<Report> = values
            .iter()
            .enumerate()
            .map(|(i, &(mcd, f0))| Report {
                model: format!("m{i}"),
                corpus: "c".into(),
                split: Split::Test,
                situation: Situation::Balanced,
                setting: None,
                per_speaker: Vec::new(),
                aggregate: Metrics { mcd_db: Some(mcd), f0_rmse_cent: Some(f0), dur_rmse_ms: None, rmse: vec![] },
                provenance: serde_json::Value::Null,
            })
            .collect();
        let t = eval::render_table(&reports);
        prop_assert_eq!(&t, &eval::render_table(&reports));
        prop_assert_eq!(t.lines().count(), reports.len() + 2);
        prop_assert!(t.contains("**"));
    }
}

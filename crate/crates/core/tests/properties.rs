use proptest::prelude::*;

use neurocal::baselines::{mrt, sum_rate, wmmse, zf, WmmseOptions, POWER_SLACK};
use neurocal::calibration::{calibrated_zf_beamform, ls_estimate, CalibratedZf, RowCalibrator};
use neurocal::channel::{
    dbm_to_watts, default_pilots, generate_batch, generate_sample, watts_to_dbm, GainCoupling, SystemConfig,
};
use neurocal::dataset::Dataset;
use neurocal::harness::{EvalReport, ReportRow};
use neurocal::linalg::{cmul, hermitian};
use neurocal::neural::{AdamConfig, AdamState, MlpParameters, OutputInit};
use neurocal::rng::StreamRng;
use neurocal::ComplexMatrix;

fn random(rng: &mut StreamRng, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| rng.complex_normal())
}

fn system(antennas: usize, users: usize, seed: u64) -> SystemConfig {
    SystemConfig {
        antennas,
        users,
        pilot_length: users,
        rng_seed: seed,
        ..SystemConfig::default()
    }
}

fn within_budget(power: f64, budget: f64) -> bool {
    power >= budget * (1.0 - POWER_SLACK) && power <= budget * (1.0 + POWER_SLACK)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn samples_are_deterministic(seed in any::<u64>(), index in 0u64..1_000_000, k in 1usize..5) {
        let cfg = system(8, k, seed);
        prop_assert_eq!(generate_sample(&cfg, index), generate_sample(&cfg, index));
    }

    #[test]
    fn user_channels_do_not_depend_on_user_count(seed in any::<u64>(), index in 0u64..1000) {
        let small = generate_sample(&system(8, 2, seed), index);
        let large = generate_sample(&system(8, 5, seed), index);
        prop_assert_eq!(small.h_dl, large.h_dl.leading_cols(2));
    }

    #[test]
    fn shared_gains_at_one_frequency_give_reciprocal_links(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = SystemConfig {
            f_dl: 2.4e9,
            f_ul: 2.4e9,
            gain_coupling: GainCoupling::Shared,
            ..system(8, 3, seed)
        };
        let s = generate_sample(&cfg, index);
        prop_assert_eq!(s.h_ul, s.h_dl);
    }

    #[test]
    fn default_pilots_are_orthogonal(k in 1usize..7, extra in 0usize..4, dbm in -30.0f64..10.0) {
        let cfg = SystemConfig {
            users: k,
            pilot_length: k + extra,
            power_ul: dbm_to_watts(dbm),
            ..SystemConfig::default()
        };
        let p = default_pilots(&cfg);
        let gram = cmul(&p, &hermitian(&p)).unwrap();
        let expect = ComplexMatrix::identity(k).scale(cfg.power_ul * cfg.pilot_length as f64);
        prop_assert!(gram.max_abs_diff(&expect) < 1e-10 * cfg.power_ul * cfg.pilot_length as f64);
    }

    #[test]
    fn noiseless_ls_recovers_the_uplink(seed in any::<u64>(), k in 1usize..5, extra in 0usize..3) {
        let cfg = SystemConfig { pilot_length: k + extra, ..system(12, k, seed) };
        let s = generate_sample(&cfg, 0);
        let p = default_pilots(&cfg);
        let est = ls_estimate(&cmul(&s.h_ul, &p).unwrap(), &p).unwrap();
        prop_assert!(est.max_abs_diff(&s.h_ul) < 1e-10);
    }

    #[test]
    fn beamformers_meet_the_budget(seed in any::<u64>(), m in 4usize..17, k in 1usize..4, dbm in -10.0f64..20.0) {
        let mut rng = StreamRng::new(seed, 1);
        let h = random(&mut rng, k, m);
        let p = dbm_to_watts(dbm);
        prop_assert!(within_budget(mrt(&h, p).unwrap().power(), p));
        prop_assert!(within_budget(zf(&h, p).unwrap().power(), p));
        let opts = WmmseOptions { max_iters: 10, ..WmmseOptions::default() };
        prop_assert!(within_budget(wmmse(&h, p, 0.1 * p, &opts).unwrap().beamformer.power(), p));
    }

    #[test]
    fn sum_rate_is_nonnegative_and_grows_with_power(seed in any::<u64>(), m in 2usize..9, k in 1usize..3) {
        let mut rng = StreamRng::new(seed, 2);
        let h = random(&mut rng, k, m);
        let v = random(&mut rng, m, k);
        let low = sum_rate(&h, &v, 1.0).unwrap();
        let high = sum_rate(&h, &v.scale(2.0), 1.0).unwrap();
        prop_assert!(low >= 0.0);
        prop_assert!(high >= low - 1e-12);
    }

    #[test]
    fn eval_mlp_acts_row_by_row(seed in any::<u64>(), rows in 2usize..9) {
        let mut rng = StreamRng::new(seed, 3);
        let mlp = MlpParameters::new(&[6, 10, 6], seed, OutputInit::Random).unwrap();
        let x = ndarray::Array2::from_shape_fn((rows, 6), |_| rng.normal());
        let perm = rng.permutation(rows);
        let permuted = x.select(ndarray::Axis(0), &perm);
        let lhs = mlp.forward_eval(&permuted).unwrap();
        let rhs = mlp.forward_eval(&x).unwrap().select(ndarray::Axis(0), &perm);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn adam_ignores_zero_gradients(values in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut p = values.clone();
        let g = vec![0.0; values.len()];
        let mut state = AdamState::new([p.as_slice()]);
        state.step(&AdamConfig::default(), &mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        prop_assert_eq!(p, values);
    }

    #[test]
    fn identity_calibration_is_plain_zf(seed in any::<u64>(), k in 1usize..5) {
        let cfg = system(8, k, seed);
        let h = generate_sample(&cfg, 0).downlink_rows();
        let model = CalibratedZf::identity(8, &[16], seed).unwrap();
        let cal = calibrated_zf_beamform(&h, &model, cfg.power_dl).unwrap();
        prop_assert!(cal.v.max_abs_diff(&zf(&h, cfg.power_dl).unwrap().v) < 1e-15);
    }

    #[test]
    fn calibrated_zf_is_user_equivariant(seed in any::<u64>(), k in 2usize..7) {
        let mut rng = StreamRng::new(seed, 4);
        let model = CalibratedZf { calibrator: RowCalibrator::random(16, &[12], seed, 1.0).unwrap() };
        let h = random(&mut rng, k, 8);
        let perm = rng.permutation(k);
        let lhs = calibrated_zf_beamform(&h.permute_rows(&perm), &model, 1.0).unwrap().v;
        let rhs = calibrated_zf_beamform(&h, &model, 1.0).unwrap().v.permute_cols(&perm);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn datasets_round_trip(seed in any::<u64>(), count in 0usize..4) {
        let cfg = system(4, 2, seed);
        let mut samples = generate_batch(&cfg, 0, count);
        for s in &mut samples {
            s.paths.clear();
        }
        let ds = Dataset::new(4, 2, 2, samples);
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        prop_assert_eq!(Dataset::read_from(bytes.as_slice()).unwrap(), ds);
    }

    #[test]
    fn dbm_round_trip(dbm in -150.0f64..60.0) {
        prop_assert!((watts_to_dbm(dbm_to_watts(dbm)) - dbm).abs() < 1e-9);
    }

    #[test]
    fn reports_round_trip_through_csv(
        rates in proptest::collection::vec((0.0f64..100.0, 0.0f64..10.0, 1usize..5000), 1..6),
        dbm in -40.0f64..40.0,
    ) {
        let rows = rates
            .iter()
            .enumerate()
            .map(|(i, &(mean, std, n))| ReportRow {
                method: if i % 2 == 0 { "zf".into() } else { "neural_calibration".into() },
                antennas: 16 + i,
                users: 4,
                power_dl_dbm: dbm,
                power_ul_dbm: -10.0,
                mean_sum_rate_bps_hz: mean,
                std,
                n_samples: n,
                mean_inference_ms: 0.0,
            })
            .collect();
        let report = EvalReport { rows };
        prop_assert_eq!(EvalReport::from_csv(&report.to_csv().unwrap()).unwrap(), report);
    }
}

use clt_embed::engine::*;
use clt_embed::measure::DiscreteMeasure;
use clt_embed::rng::stream;
use proptest::prelude::*;

fn measure_strategy() -> impl Strategy<Value = DiscreteMeasure> {
    (1usize..=3, 2usize..=10).prop_flat_map(|(d, n)| {
        (
            proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, d), n),
            proptest::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(move |(atoms, w)| DiscreteMeasure::new(d, &atoms, &w).unwrap())
    })
}

fn policy_strategy() -> impl Strategy<Value = Policy> {
    prop_oneof![Just(Policy::Projection), Just(Policy::Capped), Just(Policy::Foellmer)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn path_invariants(m in measure_strategy(), p in policy_strategy(), seed in 0u64..1000) {
        let cfg = EngineConfig { store_path: true, du: 5e-3, dt: Some(2e-3), ..Default::default() };
        let r = run_trajectory(&m, p, &cfg, &mut stream(seed, 0)).unwrap();
        let d = r.diagnostics.clone();
        prop_assert!(d.max_simplex_err <= 1e-12);
        prop_assert_eq!(d.rank_increases, 0);
        let path = r.path.unwrap();
        for w in path.rank.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        match p {
            Policy::Projection => prop_assert!(d.max_idempotency_err <= 1e-6),
            Policy::Capped => prop_assert!(d.max_ac_norm <= 3.0 + 1e-6 || r.t_hit.is_some()),
            Policy::Foellmer => {}
        }
        prop_assert!(r.collapsed);
        let x = m.atom(r.atom_index);
        prop_assert!(x.iter().zip(&r.embedded_point).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn capped_gain_bounded_before_switch(m in measure_strategy(), seed in 0u64..1000) {
        let cfg = EngineConfig { dt: Some(2e-3), ..Default::default() };
        let mut s = TrajectoryState::new(&m, Policy::Capped, &cfg);
        let mut rng = stream(seed, 1);
        while !s.collapsed && s.t < 3.0 {
            if s.t_hit.is_none() && s.t < CAP_TIME {
                let top = s.gamma().eig().max();
                prop_assert!(top <= 3.0 + 1e-6);
            }
            let db: Vec<f64> = (0..m.dim()).map(|_| 0.0447 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            s = step(&s, &db, 2e-3).unwrap();
        }
    }

    #[test]
    fn log_weights_keep_gaussian_tilt_form(m in measure_strategy(), p in policy_strategy(), seed in 0u64..1000) {
        let cfg = EngineConfig { dt: Some(2e-3), ..Default::default() };
        let mut s = TrajectoryState::new(&m, p, &cfg);
        let mut rng = stream(seed, 2);
        for _ in 0..200 {
            if s.collapsed {
                break;
            }
            let db: Vec<f64> = (0..m.dim()).map(|_| 0.0447 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            s = step(&s, &db, 2e-3).unwrap();
            let r = s.tilt_form_residual();
            prop_assert!(r < 1e-8, "{:?} t {} resid {}", p, s.t, r);
        }
    }

    #[test]
    fn tilt_engine_simplex_and_atom(m in measure_strategy(), seed in 0u64..1000) {
        let cfg = EngineConfig { du: 0.02, ..Default::default() };
        let r = run_foellmer_tilt(&m, &cfg, &mut stream(seed, 3)).unwrap();
        prop_assert!(r.tau <= 1.0);
        prop_assert!(r.diagnostics.max_simplex_err <= 1e-12);
        prop_assert_eq!(r.diagnostics.rank_increases, 0);
    }
}

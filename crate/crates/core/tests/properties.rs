use floquet_ris::estimation::truth_proxies;
use floquet_ris::eval::zeta;
use floquet_ris::floquet::{assemble_phi, slot_weights, FloquetChannel, LoadSet, ModulationPattern};
use floquet_ris::gauge::{compose, random_gauge, GaugeVariant};
use floquet_ris::grid::HarmonicGrid;
use floquet_ris::json::{self, Node};
use floquet_ris::measurement::MeasurementMode;
use floquet_ris::rng::child_seed;
use floquet_ris::scenario::{Scenario, ScenarioConfig};
use floquet_ris::{CMatrix, C64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_scenario(seed: u64) -> Scenario {
    Scenario::generate(&ScenarioConfig {
        gt_harmonics: 5,
        retained_harmonics: 3,
        n_t: 2,
        n_r: 2,
        n_s: 3,
        n_states: 4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn random_loads(rng: &mut ChaCha8Rng, grid: &HarmonicGrid, p: usize) -> LoadSet {
    let rho = (0..grid.len())
        .map(|_| {
            (0..p)
                .map(|_| {
                    C64::from_polar(
                        rng.random_range(0.2..0.95),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect()
        })
        .collect();
    LoadSet::new(grid.clone(), rho).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slot_weights_sum_to_the_period_average(q in 1usize..12, dh in -20i32..=20) {
        let sum: C64 = slot_weights(q, dh).iter().sum();
        let expected = if dh == 0 { 1.0 } else { 0.0 };
        prop_assert!((sum - C64::new(expected, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn common_delay_shift_is_a_block_phase(seed in any::<u64>(), q in 1usize..6, shift in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = HarmonicGrid::symmetric(135e9, 125e6, 5).unwrap();
        let period = grid.period();
        let loads = random_loads(&mut rng, &grid, 4);
        let rows: Vec<Vec<usize>> = (0..3).map(|_| (0..q).map(|_| rng.random_range(0..4)).collect()).collect();
        let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.5) * period).collect();
        let tau = shift * 0.5 * period;
        let shifted: Vec<f64> = base.iter().map(|t| t + tau).collect();
        let a = assemble_phi(&ModulationPattern::new(&rows, base).unwrap(), &loads, &grid).unwrap();
        let b = assemble_phi(&ModulationPattern::new(&rows, shifted).unwrap(), &loads, &grid).unwrap();
        for (o, &h_o) in grid.harmonics().iter().enumerate() {
            for (i, &h_i) in grid.harmonics().iter().enumerate() {
                let phase = C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (h_o - h_i) as f64 * tau / period);
                for (x, y) in a.block(o, i).iter().zip(b.block(o, i)) {
                    prop_assert!((x * phase - y).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn static_patterns_are_block_diagonal(seed in any::<u64>()) {
        let s = small_scenario(seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let grid = s.retained_grid().unwrap();
        let pattern = ModulationPattern::static_config(&states).unwrap();
        let phi = assemble_phi(&pattern, &s.loads.truncate(&grid).unwrap(), &grid).unwrap();
        for o in 0..grid.len() {
            for i in 0..grid.len() {
                if o != i {
                    prop_assert!(phi.block(o, i).iter().all(|v| *v == C64::new(0.0, 0.0)));
                }
            }
        }
    }

    #[test]
    fn gauges_preserve_static_channels(seed in any::<u64>(), mc in any::<bool>(), spread in 0.0f64..0.5) {
        let s = small_scenario(seed % 1000);
        let truth = truth_proxies(&s, &s.retained_grid().unwrap(), mc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = &truth.params()[0];
        let g = random_gauge(&mut rng, GaugeVariant::for_coupling(mc), 3, spread);
        let gauged = compose(theta, &g).unwrap();
        for _ in 0..5 {
            let config: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let a = theta.static_channel(&config).unwrap();
            let b = gauged.static_channel(&config).unwrap();
            prop_assert!((&a - &b).norm() <= 1e-9 * a.norm());
        }
    }

    #[test]
    fn zeta_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = HarmonicGrid::symmetric(135e9, 125e6, 3).unwrap();
        let mut draw = || CMatrix::from_fn(6, 6, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let truth: Vec<CMatrix> = (0..4).map(|_| draw()).collect();
        let noise: Vec<CMatrix> = (0..4).map(|_| draw() * C64::new(0.1, 0.0)).collect();
        let channels = |m: &[CMatrix], k: f64| -> Vec<FloquetChannel> {
            m.iter().map(|x| FloquetChannel::new(grid.clone(), 2, 2, x * C64::new(k, 0.0)).unwrap()).collect()
        };
        let predicted: Vec<CMatrix> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
        for mode in MeasurementMode::ALL {
            let a = zeta(&channels(&truth, 1.0), &channels(&predicted, 1.0), mode).unwrap();
            let b = zeta(&channels(&truth, scale), &channels(&predicted, scale), mode).unwrap();
            prop_assert!((a.zeta_db - b.zeta_db).abs() < 1e-9);
        }
    }

    #[test]
    fn scenario_config_round_trips(seed in any::<u64>(), n_s in 1usize..12, q in 1usize..6, delay in 0.0f64..1.0) {
        let c = ScenarioConfig { n_s, q, delay_scale: delay, seed, ..Default::default() };
        let v = json::parse_str(&json::to_string(&c.to_json())).unwrap();
        prop_assert_eq!(ScenarioConfig::from_json(&Node::root(&v)).unwrap(), c);
    }

    #[test]
    fn child_seeds_are_distinct(seed in any::<u64>()) {
        let seeds: std::collections::BTreeSet<u64> = (0..64).map(|i| child_seed(seed, i)).collect();
        prop_assert_eq!(seeds.len(), 64);
    }
}

use hiersim_core::dynamics::{
    equilibrium_gmap, step_interacting_fv, step_interacting_fv_with_noise, step_seedbank,
    step_seedbank_with_noise, DynamicsParams, GmapSettings, McKeanVlasovParams, MigrationOperator,
    Scheme, SeedbankParams, SeedbankState, TypeSimplexState,
};
use hiersim_core::geometry::GeographySpec;
use hiersim_core::rng::{stream, Module, StreamKey};
use hiersim_core::stats::RunningStats;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(purpose: u8) -> ChaCha8Rng {
    stream(11, StreamKey::new(0, Module::Dynamics, purpose))
}

fn seedbank_params(b: f64, c: f64, exchange: Vec<f64>, sizes: Vec<f64>, dt: f64) -> SeedbankParams {
    SeedbankParams {
        resampling: b,
        migration: c,
        exchange,
        sizes,
        dt,
        residual_size: 0.0,
        diffusion: None,
    }
}

/// `x' = eK(y − x)`, `y' = e(x − y)` from `(1, 0)`: the gap decays at rate
/// `e(1 + K)` around the conserved mean `(x + K y)/(1 + K)`.
fn relax_oracle(t: f64, e: f64, k: f64) -> (f64, f64) {
    let gap = (-e * (1.0 + k) * t).exp();
    let mean = 1.0 / (1.0 + k);
    (mean + k * gap / (1.0 + k), mean - gap / (1.0 + k))
}

#[test]
fn seedbank_relaxation_matches_linear_ode() {
    let op = MigrationOperator::new(&GeographySpec::mean_field(1, 0.0).unwrap());
    let one_step_error = |dt: f64| {
        let p = seedbank_params(0.0, 0.0, vec![1.0], vec![1.0], dt);
        let mut s = SeedbankState::new(vec![1.0], vec![0.0], 1).unwrap();
        step_seedbank_with_noise(&mut s, &op, &p, &[0.0]).unwrap();
        let (x, y) = relax_oracle(dt, 1.0, 1.0);
        (s.x[0] - x).abs().max((s.y[0] - y).abs())
    };
    for dt in [0.1, 0.05, 0.025] {
        let ratio = one_step_error(dt) / one_step_error(dt / 2.0);
        assert!(
            (3.0..5.0).contains(&ratio),
            "dt {dt}: local error ratio {ratio}"
        );
        assert!(one_step_error(dt) < dt * dt);
    }
    let dt = 1e-3;
    let p = seedbank_params(0.0, 0.0, vec![1.0], vec![1.0], dt);
    let mut s = SeedbankState::new(vec![1.0], vec![0.0], 1).unwrap();
    for _ in 0..1000 {
        step_seedbank_with_noise(&mut s, &op, &p, &[0.0]).unwrap();
    }
    let (x, y) = relax_oracle(1.0, 1.0, 1.0);
    assert!((s.x[0] - x).abs() < 1e-3 && (s.y[0] - y).abs() < 1e-3);
    assert!((s.x[0] + s.y[0] - 1.0).abs() < 1e-12);
}

#[test]
fn weighted_mass_changes_only_through_migration() {
    let geo = GeographySpec::hier(2, 3, vec![1.0, 0.7, 0.4]).unwrap();
    let op = MigrationOperator::new(&geo);
    let sizes = vec![0.5, 1.5, 3.0];
    let p = seedbank_params(0.0, 2.0, vec![4.0, 1.0, 0.1], sizes.clone(), 0.01);
    let mut r = rng(1);
    let x: Vec<f64> = (0..8).map(|_| r.random()).collect();
    let y: Vec<f64> = (0..24).map(|_| r.random()).collect();
    let mut s = SeedbankState::new(x, y, 3).unwrap();
    let total = |s: &SeedbankState| s.weighted(&sizes).iter().sum::<f64>();
    let start = total(&s);
    for _ in 0..500 {
        step_seedbank(&mut s, &op, &p, &mut r).unwrap();
    }
    assert_eq!(s.clip_events, 0);
    assert!(
        (total(&s) - start).abs() < 1e-12,
        "{} vs {start}",
        total(&s)
    );
}

fn random_simplex<R: Rng>(k: usize, r: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[test]
fn spatial_mean_is_a_martingale() {
    let geo = GeographySpec::hier(3, 2, vec![1.0, 0.5]).unwrap();
    let op = MigrationOperator::new(&geo);
    let p = DynamicsParams::neutral(1.0, 1.0, 0.01);
    let mut drift = RunningStats::new();
    for rep in 0..400 {
        let mut r = stream(11, StreamKey::new(rep, Module::Dynamics, 2));
        let x: Vec<f64> = (0..9).flat_map(|_| random_simplex(3, &mut r)).collect();
        let mut s = TypeSimplexState::new(3, x).unwrap();
        let before = s.mean()[0];
        for _ in 0..100 {
            step_interacting_fv(&mut s, &op, &p, &mut r).unwrap();
        }
        drift.push(s.mean()[0] - before);
    }
    assert!(
        drift.mean().abs() < 3.0 * drift.std_err(),
        "{} ± {}",
        drift.mean(),
        drift.std_err()
    );
}

#[test]
fn boundary_exact_spatial_mean_is_a_martingale() {
    let geo = GeographySpec::mean_field(10, 1.0).unwrap();
    let op = MigrationOperator::new(&geo);
    let p = DynamicsParams {
        scheme: Scheme::BoundaryExact,
        ..DynamicsParams::neutral(1.0, 1.0, 0.05)
    };
    let mut drift = RunningStats::new();
    for rep in 0..400 {
        let mut r = stream(11, StreamKey::new(rep, Module::Dynamics, 3));
        let x0: Vec<f64> = (0..10).map(|i| if i < 2 { 0.9 } else { 0.05 }).collect();
        let mut s = TypeSimplexState::two_type(x0);
        let before = s.mean()[0];
        for _ in 0..40 {
            step_interacting_fv(&mut s, &op, &p, &mut r).unwrap();
        }
        drift.push(s.mean()[0] - before);
    }
    assert!(
        drift.mean().abs() < 3.0 * drift.std_err(),
        "{} ± {}",
        drift.mean(),
        drift.std_err()
    );
}

/// RMS distance at time `T` between Euler paths with step `fine · 2^level`
/// and the finest path, all driven by the same Brownian increments.
fn strong_errors(levels: &[u32], finest: u32, paths: u64) -> Vec<f64> {
    let sites = 4;
    let op = MigrationOperator::new(&GeographySpec::mean_field(sites as u32, 1.0).unwrap());
    let t_end = 0.5;
    let fine_steps = 1usize << finest;
    let fine_dt = t_end / fine_steps as f64;
    let mut sq = vec![0.0; levels.len()];
    for path in 0..paths {
        let mut r = ChaCha8Rng::seed_from_u64(path);
        let z: Vec<Vec<f64>> = (0..fine_steps)
            .map(|_| (0..sites).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let run = |level: u32| {
            let m = 1usize << level;
            let p = DynamicsParams::neutral(1.0, 1.0, fine_dt * m as f64);
            let mut s = TypeSimplexState::two_type(vec![0.4, 0.5, 0.6, 0.45]);
            for chunk in z.chunks(m) {
                let normals: Vec<f64> = (0..sites)
                    .map(|i| chunk.iter().map(|row| row[i]).sum::<f64>() / (m as f64).sqrt())
                    .collect();
                step_interacting_fv_with_noise(&mut s, &op, &p, &normals).unwrap();
            }
            s.type0_frequencies()
        };
        let reference = run(0);
        for (acc, &level) in sq.iter_mut().zip(levels) {
            let x = run(level);
            *acc += x
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / sites as f64;
        }
    }
    sq.into_iter().map(|s| (s / paths as f64).sqrt()).collect()
}

#[test]
fn euler_strong_order_is_one_half() {
    let e = strong_errors(&[6, 5, 4], 11, 300);
    for w in e.windows(2) {
        let factor = w[0] / w[1];
        assert!((1.2..1.7).contains(&factor), "errors {e:?}");
    }
}

#[test]
fn mckean_vlasov_heterozygosity_falls_with_resampling() {
    let (c, theta) = (1.0, 0.5);
    let mut prev = f64::INFINITY;
    for (i, d) in [1.0, 4.0, 16.0].into_iter().enumerate() {
        let params = McKeanVlasovParams {
            scheme: Scheme::BoundaryExact,
            ..McKeanVlasovParams::neutral(c, d, 0.002)
        };
        let settings = GmapSettings {
            burn_in: 5.0,
            horizon: 600.0,
            batches: 30,
        };
        let est = equilibrium_gmap(
            &params,
            theta,
            |x| x * (1.0 - x),
            settings,
            &mut rng(10 + i as u8),
        )
        .unwrap();
        let oracle = 2.0 * c * theta * (1.0 - theta) / (2.0 * c + d);
        assert!(
            (est.mean - oracle).abs() < 3.0 * est.std_err,
            "d {d}: {est:?} vs {oracle}"
        );
        assert!(est.mean < prev);
        prev = est.mean;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_stay_on_the_simplex(
        seed in any::<u64>(),
        k in 2usize..5,
        d in 0.0f64..5.0,
        c in 0.0f64..5.0,
        m in 0.0f64..2.0,
        s in 0.0f64..3.0,
        dt in 1e-3f64..0.2,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let geo = GeographySpec::hier(2, 2, vec![1.0, 0.5]).unwrap();
        let op = MigrationOperator::new(&geo);
        let mut fitness: Vec<f64> = (0..k).map(|_| r.random()).collect();
        fitness[0] = 0.0;
        fitness[1] = 1.0;
        let p = DynamicsParams {
            resampling: d,
            migration: c,
            mutation: m,
            mutation_kernel: (0..k).map(|_| random_simplex(k, &mut r)).collect(),
            selection: s,
            fitness,
            ..DynamicsParams::neutral(d, c, dt)
        };
        let x: Vec<f64> = (0..4).flat_map(|_| random_simplex(k, &mut r)).collect();
        let mut state = TypeSimplexState::new(k, x).unwrap();
        for _ in 0..50 {
            step_interacting_fv(&mut state, &op, &p, &mut r).unwrap();
            for site in 0..4 {
                let v = state.site(site);
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(v.iter().all(|u| (0.0..=1.0).contains(u)));
            }
        }
    }

    #[test]
    fn seedbank_components_stay_in_unit_interval(
        seed in any::<u64>(),
        b in 0.0f64..4.0,
        e in 0.0f64..20.0,
        k in 0.0f64..5.0,
        dt in 1e-3f64..0.3,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let op = MigrationOperator::new(&GeographySpec::mean_field(3, 1.0).unwrap());
        let p = seedbank_params(b, 1.0, vec![e, e / 3.0], vec![k, 1.0], dt);
        let x: Vec<f64> = (0..3).map(|_| r.random()).collect();
        let y: Vec<f64> = (0..6).map(|_| r.random()).collect();
        let mut s = SeedbankState::new(x, y, 2).unwrap();
        for _ in 0..50 {
            step_seedbank(&mut s, &op, &p, &mut r).unwrap();
            prop_assert!(s.x.iter().chain(&s.y).all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

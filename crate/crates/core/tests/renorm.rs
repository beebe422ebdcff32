use hiersim_core::dynamics::{DynamicsParams, TypeSimplexState};
use hiersim_core::geometry::{GeographySpec, HierAddress};
use hiersim_core::renorm::{
    classify_dichotomy, dk_sequence, interaction_chain_sample, m_sequence, renormalized_profile,
    seedbank_regime, seedbank_tail, ChainEngine, ChainLevel, ChainSpec, Colours, ProfileSchedule,
    RegimeVerdict, RenormParams, SeedbankSpec, SeedbankTailParams, Sequence, Verdict,
    WakeUpSampler,
};
use hiersim_core::rng::{stream, Module, StreamKey};
use hiersim_core::stats::{
    ks_one_sample, ks_one_sample_pvalue, ks_two_sample, ks_two_sample_pvalue, RunningStats,
};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn rng(replica: u64, purpose: u8) -> ChaCha8Rng {
    stream(19, StreamKey::new(replica, Module::Renorm, purpose))
}

fn geometric(a: f64, c: f64, lam: f64, q: f64, d0: f64) -> RenormParams {
    RenormParams {
        c: Sequence::Geometric { scale: a, ratio: c },
        lambda: Sequence::Geometric {
            scale: lam,
            ratio: q,
        },
        d0,
    }
}

#[test]
fn dk_example_with_block_rate() {
    let p = RenormParams {
        c: Sequence::Values(vec![1.0]),
        lambda: Sequence::Values(vec![2.0]),
        d0: 0.0,
    };
    assert_eq!(dk_sequence(&p, 1).unwrap(), vec![0.0, 0.5]);
}

#[test]
fn dichotomy_reference_cases() {
    let clustering = classify_dichotomy(&geometric(1.0, 1.0, 0.0, 1.0, 1.0), 200).unwrap();
    assert_eq!(clustering.verdict, Verdict::Clustering);
    let s = &clustering.partial_sums;
    // m_k ~ 1/k: partial sums grow like ln K.
    let growth = s[199] - s[99];
    assert!((growth - 2f64.ln()).abs() < 0.05, "growth {growth}");
    let coexist = classify_dichotomy(&geometric(1.0, 2.0, 0.0, 1.0, 1.0), 200).unwrap();
    assert_eq!(coexist.verdict, Verdict::LocalCoexistence);
    let tail = coexist.partial_sums[199] - coexist.partial_sums[50];
    assert!(tail < 1e-12);
}

#[test]
fn chain_marginal_variance_matches_beta() {
    let (c, sigma, theta) = (1.0, 1.0, 0.5);
    let spec = ChainSpec {
        levels: vec![ChainLevel {
            c,
            sigma,
            lambda: None,
        }],
    };
    let mut r = rng(0, 1);
    let xs: Vec<f64> = (0..20_000)
        .map(|_| {
            interaction_chain_sample(theta, &spec, 0, ChainEngine::Beta, &mut r)
                .unwrap()
                .get(0)
                .unwrap()
        })
        .collect();
    let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
    let dev: RunningStats = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let oracle = theta * (1.0 - theta) * sigma / (2.0 * c + sigma);
    assert!((oracle - 1.0 / 12.0).abs() < 1e-15);
    assert!(
        (dev.mean() - oracle).abs() < 3.0 * dev.std_err(),
        "{} ± {} vs {oracle}",
        dev.mean(),
        dev.std_err()
    );
}

#[test]
fn chain_preserves_the_mean_at_every_level() {
    let spec = ChainSpec::from_recursion(
        &Sequence::Geometric {
            scale: 1.0,
            ratio: 1.5,
        },
        &Sequence::constant(0.0),
        2.0,
        4,
    )
    .unwrap();
    let theta = 0.3;
    let mut by_level = [RunningStats::new(); 6];
    let mut r = rng(0, 2);
    for _ in 0..20_000 {
        let path = interaction_chain_sample(theta, &spec, 4, ChainEngine::Beta, &mut r).unwrap();
        for (i, (_, v)) in path.iter().enumerate() {
            by_level[i].push(v);
        }
    }
    assert_eq!(by_level[0].mean(), theta);
    for s in &by_level[1..] {
        assert!(
            (s.mean() - theta).abs() < 3.0 * s.std_err(),
            "{} ± {}",
            s.mean(),
            s.std_err()
        );
    }
}

#[test]
fn simulated_chain_preserves_the_mean() {
    let spec =
        ChainSpec::from_recursion(&Sequence::constant(1.0), &Sequence::constant(0.0), 2.0, 1)
            .unwrap();
    let engine = ChainEngine::Simulated {
        burn_in: 6.0,
        dt: 0.01,
        cutoff: 1e-3,
    };
    let mut stats = RunningStats::new();
    for rep in 0..1500 {
        let path = interaction_chain_sample(0.5, &spec, 1, engine, &mut rng(rep, 3)).unwrap();
        stats.push(path.get(0).unwrap());
    }
    assert!(
        (stats.mean() - 0.5).abs() < 3.0 * stats.std_err(),
        "{} ± {}",
        stats.mean(),
        stats.std_err()
    );
}

#[test]
fn wake_up_sampler_matches_tail() {
    let colours = Colours {
        sizes: vec![1.0, 0.5, 2.0],
        exchange: vec![1.0, 0.1, 0.02],
    };
    let grid: Vec<f64> = (0..=300).map(|i| i as f64).collect();
    let spec = SeedbankSpec::Colours(colours.clone());
    let report = seedbank_tail(&spec, &grid).unwrap();
    assert_eq!(report.truncation_bound, 0.0);
    let chi = 1.0 + 0.05 + 0.04;
    assert!((report.chi - chi).abs() < 1e-15);
    let cdf = |t: f64| {
        let tail: f64 = colours
            .sizes
            .iter()
            .zip(&colours.exchange)
            .map(|(k, e)| k * e * (-e * t).exp())
            .sum();
        1.0 - tail / chi
    };
    for (t, p) in report.grid.iter().zip(&report.tail) {
        assert!((1.0 - cdf(*t) - p).abs() < 1e-14);
    }
    let sampler = WakeUpSampler::new(&colours).unwrap();
    let mut r = rng(0, 4);
    let draws: Vec<f64> = (0..20_000).map(|_| sampler.sample(&mut r)).collect();
    let p = ks_one_sample_pvalue(ks_one_sample(&draws, cdf), draws.len());
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn regime_examples() {
    let mut r = rng(0, 5);
    let colours = SeedbankSpec::Colours(Colours {
        sizes: vec![1.0],
        exchange: vec![1.0],
    });
    let mf = GeographySpec::mean_field(50, 1.0).unwrap();
    assert_eq!(
        seedbank_regime(&mf, &colours, None, &mut r)
            .unwrap()
            .verdict,
        RegimeVerdict::Coexistence
    );
    let frozen = GeographySpec::mean_field(50, 0.0).unwrap();
    assert_eq!(
        seedbank_regime(&frozen, &colours, None, &mut r)
            .unwrap()
            .verdict,
        RegimeVerdict::Clustering
    );
    let heavy = SeedbankSpec::PowerLaw(SeedbankTailParams {
        a: 1.0,
        b: 1.0,
        alpha: 0.2,
        beta: 1.0,
        m_max: 100,
    });
    let report = seedbank_regime(&frozen, &heavy, None, &mut r).unwrap();
    assert_eq!(report.verdict, RegimeVerdict::Coexistence);
    assert_eq!(report.criterion, "gamma<1/2");
    assert!(!report.rho_finite);
}

/// Block average of the 1-ball on `Ω_{10,2}` against the level `−1` marginal
/// of the interaction chain.
#[test]
fn renormalized_profile_matches_chain_marginal() {
    let (n, sigma0, theta) = (10u32, 1.0, 0.5);
    let c = vec![1.0, 1.0];
    let geo = GeographySpec::hier(n, 2, c.clone()).unwrap();
    let params = DynamicsParams::neutral(sigma0, 1.0, 0.02);
    let eta = HierAddress::origin(n, 2).unwrap();
    let schedule = ProfileSchedule {
        t_n: 0.5,
        u: vec![1.0, 3.0],
    };
    let replicas = 500;
    let mut simulated = Vec::with_capacity(replicas);
    for rep in 0..replicas as u64 {
        let initial = TypeSimplexState::two_type(vec![theta; 100]);
        let profile = renormalized_profile(
            &geo,
            &params,
            initial,
            &eta,
            1,
            &schedule,
            100.0,
            &mut rng(rep, 6),
        )
        .unwrap();
        simulated.push(profile[0][0]);
    }
    let spec = ChainSpec::from_recursion(
        &Sequence::Values(c),
        &Sequence::Values(vec![0.0, 0.0]),
        sigma0,
        1,
    )
    .unwrap();
    let mut r = rng(0, 7);
    let chain: Vec<f64> = (0..replicas)
        .map(|_| {
            interaction_chain_sample(theta, &spec, 1, ChainEngine::Beta, &mut r)
                .unwrap()
                .get(-1)
                .unwrap()
        })
        .collect();
    let d = ks_two_sample(&simulated, &chain);
    let p = ks_two_sample_pvalue(d, simulated.len(), chain.len());
    assert!(p > 0.01, "KS D = {d}, p-value {p}");
}

proptest! {
    #[test]
    fn harmonic_closed_form(c in proptest::collection::vec(0.01f64..50.0, 1..30), d0 in 0.01f64..50.0) {
        let k = c.len();
        let p = RenormParams { c: Sequence::Values(c.clone()), lambda: Sequence::Values(vec![0.0; k]), d0 };
        let got = dk_sequence(&p, k).unwrap();
        let mut inv = 1.0 / d0;
        for (i, ci) in c.iter().enumerate() {
            inv += 1.0 / ci;
            prop_assert!((got[i + 1] * inv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dk_monotone_and_below_c(
        c in proptest::collection::vec(0.01f64..50.0, 1..30),
        lam in proptest::collection::vec(0.0f64..50.0, 30),
        d0 in 0.0f64..50.0,
    ) {
        let k = c.len();
        let zero = RenormParams { c: Sequence::Values(c.clone()), lambda: Sequence::Values(vec![0.0; k]), d0 };
        let d = dk_sequence(&zero, k).unwrap();
        prop_assert!(d.windows(2).all(|w| w[1] <= w[0]));
        let with_blocks = RenormParams { lambda: Sequence::Values(lam[..k].to_vec()), ..zero };
        let d = dk_sequence(&with_blocks, k).unwrap();
        for (i, ci) in c.iter().enumerate() {
            prop_assert!(d[i + 1] < *ci);
        }
    }

    #[test]
    fn block_rate_equal_to_migration_clusters(a in 0.1f64..10.0, ratio in 0.2f64..5.0, d0 in 0.0f64..5.0) {
        let p = geometric(a, ratio, a, ratio, d0);
        prop_assert!(m_sequence(&p, 60).unwrap().iter().all(|&m| m >= 0.5));
        prop_assert_eq!(classify_dichotomy(&p, 60).unwrap().verdict, Verdict::Clustering);
    }

    #[test]
    fn geometric_migration_decides_without_blocks(a in 0.1f64..10.0, ratio in 0.2f64..5.0, d0 in 0.01f64..5.0) {
        let v = classify_dichotomy(&geometric(a, ratio, 0.0, 1.0, d0), 100).unwrap();
        let want = if ratio > 1.0 { Verdict::LocalCoexistence } else { Verdict::Clustering };
        prop_assert_eq!(v.verdict, want);
    }

    #[test]
    fn truncated_tail_within_reported_bound(alpha in 0.05f64..0.95, extra in 0.05f64..1.5, m_max in 10usize..2000) {
        let beta = 1.0 - alpha + extra;
        let params = |m| SeedbankTailParams { a: 1.0, b: 1.0, alpha, beta, m_max: m };
        let grid = [0.0, 1.0, 10.0, 100.0, 1000.0];
        let short = seedbank_tail(&SeedbankSpec::PowerLaw(params(m_max)), &grid).unwrap();
        let long = seedbank_tail(&SeedbankSpec::PowerLaw(params(200_000)), &grid).unwrap();
        for (a, b) in short.tail.iter().zip(&long.tail) {
            prop_assert!((a - b).abs() <= short.truncation_bound + long.truncation_bound + 1e-12);
        }
    }
}

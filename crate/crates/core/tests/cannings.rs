use std::collections::{BTreeMap, BTreeSet};

use hiersim_core::cannings::{
    apply_lambda_resampling, moran_fv_consistency, sample_lambda_event, BlockLevel, CanningsParams,
    ConsistencySettings, Individual, LambdaMeasure, MomentStatistic, ParticleSystem,
};
use hiersim_core::geometry::{hier_distance, GeographySpec, HierAddress};
use hiersim_core::rng::{stream, Module, StreamKey};
use hiersim_core::stats::{ks_one_sample, ks_one_sample_pvalue, RunningStats};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(purpose: u8) -> ChaCha8Rng {
    stream(13, StreamKey::new(0, Module::Cannings, purpose))
}

fn simpson(g: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 2_000;
    let h = (b - a) / n as f64;
    let mut acc = g(a) + g(b);
    for i in 1..n {
        acc += g(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// `∫_a^b f` for `f(r) = r^p (1 − r)^{b − 1} ·` smooth: Simpson in `ln r`
/// below 1/2 and in `s = (1 − r)^{b/2}` above, which removes both endpoint
/// singularities.
fn integrate(f: &impl Fn(f64) -> f64, beta_b: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mid = 0.5;
    let low = if a < mid {
        simpson(|v| f(v.exp()) * v.exp(), a.ln(), b.min(mid).ln())
    } else {
        0.0
    };
    let high = if b > mid {
        let q = 2.0 / beta_b;
        let (s_lo, s_hi) = ((1.0 - b).powf(1.0 / q), (1.0 - a.max(mid)).powf(1.0 / q));
        simpson(
            |s| {
                if s <= 0.0 {
                    0.0
                } else {
                    f(1.0 - s.powf(q)) * q * s.powf(q - 1.0)
                }
            },
            s_lo,
            s_hi,
        )
    } else {
        0.0
    };
    low + high
}

#[test]
fn uniform_event_rate_matches_integral() {
    let lambda = LambdaMeasure::uniform(1.0);
    let eps = 0.01;
    assert!((lambda.star_mass(eps) - 99.0).abs() < 1e-9);
    let mut r = rng(1);
    let mut waits = RunningStats::new();
    for _ in 0..100_000 {
        let (w, size) = sample_lambda_event(&lambda, eps, &mut r).unwrap().unwrap();
        assert!((eps..=1.0).contains(&size));
        waits.push(w);
    }
    let rate = 1.0 / waits.mean();
    assert!((rate / 99.0 - 1.0).abs() < 0.02, "rate {rate}");
}

fn beta_fn(a: f64, b: f64) -> f64 {
    (libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)).exp()
}

fn check_star_law(a: f64, b: f64, eps: f64, purpose: u8) {
    let lambda = LambdaMeasure::beta(a, b, 1.0);
    let density = |r: f64| r.powf(a - 3.0) * (1.0 - r).powf(b - 1.0) / beta_fn(a, b);
    let total = integrate(&density, b, eps, 1.0);
    assert!(
        (lambda.star_mass(eps) / total - 1.0).abs() < 1e-6,
        "Beta({a},{b}): star mass {} vs quadrature {total}",
        lambda.star_mass(eps)
    );
    let grid: Vec<f64> = (0..=200)
        .map(|i| eps + (1.0 - eps) * i as f64 / 200.0)
        .collect();
    let mut cdf_grid = vec![0.0];
    for w in grid.windows(2) {
        cdf_grid.push(cdf_grid.last().unwrap() + integrate(&density, b, w[0], w[1]) / total);
    }
    let cdf = |r: f64| {
        let i = grid.partition_point(|&g| g <= r).clamp(1, grid.len() - 1);
        cdf_grid[i - 1] + integrate(&density, b, grid[i - 1], r.min(grid[i])) / total
    };
    let sampler = lambda.star_sampler(eps).unwrap();
    let mut rg = rng(purpose);
    let draws: Vec<f64> = (0..5_000).map(|_| sampler.sample_r(&mut rg)).collect();
    let d = ks_one_sample(&draws, cdf);
    let p = ks_one_sample_pvalue(d, draws.len());
    assert!(p > 0.01, "Beta({a},{b}): KS p-value {p}");
}

#[test]
fn beta_star_samplers_pass_ks() {
    check_star_law(2.0, 2.0, 0.01, 2);
    check_star_law(0.5, 1.5, 0.05, 3);
    check_star_law(3.5, 0.6, 0.01, 4);
}

#[test]
fn beta_two_two_closed_form_cdf() {
    let eps = 0.01;
    let norm = (1.0f64 / eps).ln() - (1.0 - eps);
    let cdf = |r: f64| ((r / eps).ln() - (r - eps)) / norm;
    let sampler = LambdaMeasure::beta(2.0, 2.0, 1.0)
        .star_sampler(eps)
        .unwrap();
    let mut rg = rng(5);
    let draws: Vec<f64> = (0..20_000).map(|_| sampler.sample_r(&mut rg)).collect();
    let p = ks_one_sample_pvalue(ks_one_sample(&draws, cdf), draws.len());
    assert!(p > 0.01, "KS p-value {p}");
    assert!((sampler.rate() - 6.0 * norm).abs() < 1e-6);
}

fn block(n: usize) -> Vec<Individual> {
    (0..n as u64)
        .map(|i| Individual {
            lineage: i,
            ty: i as u32,
        })
        .collect()
}

#[test]
fn pair_merges_with_probability_r_squared() {
    let r = 0.3;
    let mut rg = rng(6);
    let mut merges = 0u32;
    let trials = 100_000;
    for _ in 0..trials {
        let mut b = block(2);
        let mut next = 2;
        merges += u32::from(!apply_lambda_resampling(&mut b, r, &mut next, &mut rg).is_empty());
    }
    let p = f64::from(merges) / f64::from(trials);
    let se = (r * r * (1.0 - r * r) / f64::from(trials)).sqrt();
    assert!((p - r * r).abs() < 3.0 * se, "{p} vs {}", r * r);
}

fn binomial_pmf(n: u64, r: f64, k: u64) -> f64 {
    let ln_choose = libm::lgamma(n as f64 + 1.0)
        - libm::lgamma(k as f64 + 1.0)
        - libm::lgamma((n - k) as f64 + 1.0);
    (ln_choose + k as f64 * r.ln() + (n - k) as f64 * (1.0 - r).ln()).exp()
}

#[test]
fn replaced_count_matches_binomial() {
    let (m, r) = (10usize, 0.25);
    let oracle: f64 = (2..=m as u64)
        .map(|k| (k - 1) as f64 * binomial_pmf(m as u64, r, k))
        .sum();
    let mut rg = rng(7);
    let mut stats = RunningStats::new();
    for _ in 0..100_000 {
        let mut b = block(m);
        let mut next = m as u64;
        let reps = apply_lambda_resampling(&mut b, r, &mut next, &mut rg);
        let parents: BTreeSet<u64> = reps.iter().map(|x| x.parent).collect();
        assert!(parents.len() <= 1);
        stats.push(reps.len() as f64);
    }
    assert!(
        (stats.mean() - oracle).abs() < 3.0 * stats.std_err(),
        "{} vs {oracle}",
        stats.mean()
    );
}

#[test]
fn triple_mergers_vanish_as_atoms_shrink() {
    let mut rg = rng(8);
    let mut prev = 1.0;
    for r in [0.2, 0.1, 0.05] {
        let (mut merges, mut triples) = (0u32, 0u32);
        while merges < 20_000 {
            let mut b = block(3);
            let mut next = 3;
            match apply_lambda_resampling(&mut b, r, &mut next, &mut rg).len() {
                0 => {}
                1 => merges += 1,
                _ => {
                    merges += 1;
                    triples += 1;
                }
            }
        }
        let p = f64::from(triples) / f64::from(merges);
        let oracle = r * r * r / (3.0 * r * r * (1.0 - r) + r * r * r);
        let se = (oracle * (1.0 - oracle) / f64::from(merges)).sqrt();
        assert!(
            (p - oracle).abs() < 3.0 * se + 1e-12,
            "r {r}: {p} vs {oracle}"
        );
        assert!(p < prev);
        prev = p;
    }
}

/// Forward equation of the Moran count chain `j → j ± 1` at rate
/// `d j (M − j) / 2` each, integrated by RK4; returns `E[f(j/M)]` at `times`.
fn moran_oracle(m: usize, d: f64, x0: f64, times: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let rate = |j: usize| d * (j * (m - j)) as f64 / 2.0;
    let deriv = |p: &[f64]| {
        let mut out = vec![0.0; m + 1];
        for j in 0..=m {
            out[j] -= 2.0 * rate(j) * p[j];
            if j > 0 {
                out[j - 1] += rate(j) * p[j];
            }
            if j < m {
                out[j + 1] += rate(j) * p[j];
            }
        }
        out
    };
    let mut p = vec![0.0; m + 1];
    p[(x0 * m as f64).round() as usize] = 1.0;
    let h = 1e-4;
    let mut t = 0.0;
    let mut out = Vec::new();
    for &target in times {
        while t < target - 1e-12 {
            let k1 = deriv(&p);
            let a: Vec<f64> = p.iter().zip(&k1).map(|(x, k)| x + h / 2.0 * k).collect();
            let k2 = deriv(&a);
            let b: Vec<f64> = p.iter().zip(&k2).map(|(x, k)| x + h / 2.0 * k).collect();
            let k3 = deriv(&b);
            let c: Vec<f64> = p.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
            let k4 = deriv(&c);
            for j in 0..=m {
                p[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            t += h;
        }
        out.push(
            p.iter()
                .enumerate()
                .map(|(j, q)| q * f(j as f64 / m as f64))
                .sum(),
        );
    }
    out
}

#[test]
fn moran_moments_match_count_chain_and_converge() {
    let times = vec![0.25, 0.5, 1.0];
    let settings = ConsistencySettings {
        geography: GeographySpec::mean_field(1, 0.0).unwrap(),
        resampling: 1.0,
        x0: 0.5,
        times: times.clone(),
        replicas: 3000,
        dt: 1e-3,
    };
    let sizes = [4, 16, 64];
    let stat = MomentStatistic::HeterozygositySquared;
    let report = moran_fv_consistency(&sizes, &settings, stat, |i, rep| {
        stream(
            13,
            StreamKey::new(rep as u64, Module::Cannings, 20 + i as u8),
        )
    })
    .unwrap();
    for (entry, &m) in report.entries.iter().zip(&sizes) {
        let oracle = moran_oracle(m, 1.0, 0.5, &times, |x| stat.eval(x));
        for ((mean, se), want) in entry
            .particle
            .mean
            .iter()
            .zip(&entry.particle.std_err)
            .zip(&oracle)
        {
            assert!(
                (mean - want).abs() < 3.0 * se,
                "M {m}: {mean} ± {se} vs {want}"
            );
        }
    }
    let d: Vec<f64> = report.entries.iter().map(|e| e.discrepancy).collect();
    assert!(d[0] > d[1] && d[1] > d[2], "discrepancies {d:?}");
    let h = moran_oracle(16, 1.0, 0.5, &times, |x| x * (1.0 - x));
    for (got, t) in h.iter().zip(&times) {
        assert!((got - 0.25 * (-t).exp()).abs() < 1e-9);
    }
}

fn hier_system(seed: u64, per_site: usize, d: f64, mu: f64) -> (ParticleSystem, ChaCha8Rng) {
    let geo = GeographySpec::hier(2, 3, vec![1.0, 0.5, 0.25]).unwrap();
    let params = CanningsParams {
        blocks: vec![
            BlockLevel {
                level: 1,
                mu,
                lambda: LambdaMeasure::uniform(1.0),
            },
            BlockLevel {
                level: 2,
                mu: mu * 4.0,
                lambda: LambdaMeasure::atom(0.5, 1.0),
            },
        ],
        lambda: LambdaMeasure::beta(1.0, 1.0, 0.5),
        ..CanningsParams::kingman(d)
    };
    let types = (0..8)
        .map(|s| (0..per_site as u32).map(|i| (i + s) % 3).collect())
        .collect();
    (
        ParticleSystem::new(geo, params, types).unwrap(),
        ChaCha8Rng::seed_from_u64(seed),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ancestry_log_is_a_forest(seed in any::<u64>(), per_site in 2usize..8, d in 0.0f64..3.0, mu in 0.0f64..20.0) {
        let (mut sys, mut r) = hier_system(seed, per_site, d, mu);
        sys.advance(2.0, &mut r).unwrap();
        prop_assert_eq!(sys.population().len(), 8 * per_site);
        let log = sys.log();
        let mut born = BTreeMap::new();
        let mut last = 0.0;
        for rec in &log.records {
            prop_assert!(rec.time >= last);
            last = rec.time;
            prop_assert!(rec.parent < rec.child);
            prop_assert!(rec.parent < log.founders || born.contains_key(&rec.parent));
            prop_assert!(born.insert(rec.child, rec.time).is_none());
        }
        for ind in sys.population() {
            prop_assert!(ind.lineage < log.founders || born.contains_key(&ind.lineage));
        }
    }

    #[test]
    fn block_events_stay_inside_one_ball(seed in any::<u64>(), per_site in 2usize..6, mu in 1.0f64..30.0) {
        let (mut sys, mut r) = hier_system(seed, per_site, 0.0, mu);
        sys.advance(1.0, &mut r).unwrap();
        let mut events: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
        for rec in sys.log().records.iter().filter(|rec| rec.level > 0) {
            events.entry((rec.time.to_bits(), rec.level)).or_default().push(rec.site);
        }
        for ((_, level), sites) in events {
            let first = HierAddress::from_index(2, 3, sites[0] as u64).unwrap();
            for s in sites {
                let a = HierAddress::from_index(2, 3, s as u64).unwrap();
                prop_assert!(hier_distance(&first, &a).unwrap() <= level as usize);
            }
        }
        let c = sys.counts();
        prop_assert_eq!(c.block.len(), 4);
    }
}

//! Event-driven particle systems with Λ-resampling and block resampling.
//!
//! Each site carries a fixed number `M` of individuals. Events, all run by
//! an exact Gillespie loop over aggregated class rates:
//!
//! - migration: at the kernel's total jump rate per individual, an individual
//!   at `ξ` is replaced by the offspring of a uniform individual at a site
//!   `ξ'` drawn from the migration kernel (a jump onto `ξ` itself does
//!   nothing); logged at level 0;
//! - Kingman resampling: every unordered pair at a site resamples at rate
//!   `d + Λ_0({0})`, each of the two being replaced with probability 1/2;
//! - local Λ-events: at rate `Λ_0*([ε,1])` per site, a Λ-resampling of the
//!   site population;
//! - block events: every `k`-ball resamples at rate `μ_k/N^{2k} Λ_k*([ε,1])`,
//!   after which the pooled individuals are sent to uniformly random sites of
//!   the ball and each site is brought back to `M` individuals (uniform
//!   removal of the excess, deficits filled by copies of a uniform individual
//!   at the same site, or of the ball when the site is empty).
//!
//! Every birth creates a fresh lineage id, so ids increase with birth time.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp};

use crate::error::{param, Error, Result};
use crate::geometry::{ball_range, GeographySpec, MigrationKernel};

/// Continuous part of a Λ-measure; `mass` is its total mass on `(0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ContinuousPart {
    None,
    /// Density `mass` on `(0,1]`.
    Uniform {
        mass: f64,
    },
    /// `mass` times the Beta(a, b) density.
    Beta {
        a: f64,
        b: f64,
        mass: f64,
    },
}

/// Finite measure on `[0,1]`: Kingman mass at 0, atoms and a continuous part.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LambdaMeasure {
    pub kingman: f64,
    /// `(location, mass)` pairs with location in `(0,1]`.
    pub atoms: Vec<(f64, f64)>,
    pub continuous: ContinuousPart,
}

/// Tanh-sinh quadrature of `f` over `[a, b]`. The integrand receives
/// `(x, x − a, b − x)` with both distances computed without cancellation,
/// so integrable endpoint singularities are handled.
fn tanh_sinh(f: impl Fn(f64, f64, f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    const H: f64 = 1.0 / 64.0;
    const STEPS: i32 = 200;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for k in -STEPS..=STEPS {
        let t = k as f64 * H;
        let u = core::f64::consts::FRAC_PI_2 * t.sinh();
        let cu = u.cosh();
        let w = core::f64::consts::FRAC_PI_2 * t.cosh() / (cu * cu);
        let to_b = half * 2.0 / ((2.0 * u).exp() + 1.0);
        let from_a = half * 2.0 / ((-2.0 * u).exp() + 1.0);
        if to_b <= 0.0 || from_a <= 0.0 {
            continue;
        }
        let x = mid + half * u.tanh();
        let v = f(x, from_a, to_b);
        if v.is_finite() {
            acc += w * v;
        }
    }
    acc * half * H
}

fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Draw from the density proportional to `r^p` on `[lo, hi]`, `0 < lo < hi`.
fn sample_power<R: Rng + ?Sized>(p: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if (p + 1.0).abs() < 1e-12 {
        lo * (hi / lo).powf(u)
    } else {
        let q = p + 1.0;
        let (a, b) = (lo.powf(q), hi.powf(q));
        (a + u * (b - a)).powf(1.0 / q)
    }
}

/// Λ*-masses of the Beta part on `[ε, 1/2]` and `[1/2, 1]`, before the
/// `mass / B(a,b)` factor.
fn beta_star_pieces(a: f64, b: f64, eps: f64) -> (f64, f64) {
    let lo = if eps < 0.5 {
        // r = e^v
        tanh_sinh(
            |v, _, _| (v * (a - 2.0)).exp() * (1.0 - v.exp()).powf(b - 1.0),
            eps.ln(),
            0.5f64.ln(),
        )
    } else {
        0.0
    };
    let hi = tanh_sinh(
        |r, _, one_minus_r| r.powf(a - 3.0) * one_minus_r.powf(b - 1.0),
        eps.max(0.5),
        1.0,
    );
    (lo, hi)
}

impl LambdaMeasure {
    pub fn zero() -> Self {
        Self {
            kingman: 0.0,
            atoms: Vec::new(),
            continuous: ContinuousPart::None,
        }
    }

    pub fn kingman(mass: f64) -> Self {
        Self {
            kingman: mass,
            ..Self::zero()
        }
    }

    pub fn atom(r: f64, mass: f64) -> Self {
        Self {
            atoms: vec![(r, mass)],
            ..Self::zero()
        }
    }

    pub fn uniform(mass: f64) -> Self {
        Self {
            continuous: ContinuousPart::Uniform { mass },
            ..Self::zero()
        }
    }

    pub fn beta(a: f64, b: f64, mass: f64) -> Self {
        Self {
            continuous: ContinuousPart::Beta { a, b, mass },
            ..Self::zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |m: f64| m.is_finite() && m >= 0.0;
        if !ok(self.kingman) {
            return param("Λ: Kingman mass must be finite and >= 0");
        }
        for &(r, m) in &self.atoms {
            if !(r > 0.0 && r <= 1.0) {
                return param(alloc::format!("Λ: atom location {r} outside (0,1]"));
            }
            if !ok(m) {
                return param("Λ: atom masses must be finite and >= 0");
            }
        }
        match self.continuous {
            ContinuousPart::None => {}
            ContinuousPart::Uniform { mass } => {
                if !ok(mass) {
                    return param("Λ: uniform mass must be finite and >= 0");
                }
            }
            ContinuousPart::Beta { a, b, mass } => {
                if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                    return param("Λ: Beta parameters must be positive");
                }
                if !ok(mass) {
                    return param("Λ: Beta mass must be finite and >= 0");
                }
            }
        }
        Ok(())
    }

    /// `Λ([0,1])`.
    pub fn total_mass(&self) -> f64 {
        self.kingman + self.atoms.iter().map(|a| a.1).sum::<f64>() + self.continuous_mass()
    }

    fn continuous_mass(&self) -> f64 {
        match self.continuous {
            ContinuousPart::None => 0.0,
            ContinuousPart::Uniform { mass } | ContinuousPart::Beta { mass, .. } => mass,
        }
    }

    /// `Λ((0,ε))`: the pair-coalescence rate lost by the cutoff.
    pub fn dropped_pair_rate(&self, eps: f64) -> f64 {
        let atoms: f64 = self.atoms.iter().filter(|a| a.0 < eps).map(|a| a.1).sum();
        let cont = match self.continuous {
            ContinuousPart::None => 0.0,
            ContinuousPart::Uniform { mass } => mass * eps.min(1.0),
            ContinuousPart::Beta { a, b, mass } => {
                let below = tanh_sinh(
                    |x, r, to_eps| {
                        let one_minus_r = if eps >= 1.0 { to_eps } else { 1.0 - x };
                        r.powf(a - 1.0) * one_minus_r.powf(b - 1.0)
                    },
                    0.0,
                    eps.min(1.0),
                );
                mass * below / ln_beta(a, b).exp()
            }
        };
        atoms + cont
    }

    /// `Λ*([ε,1]) = ∫_ε^1 r^{-2} Λ(dr)`.
    pub fn star_mass(&self, eps: f64) -> f64 {
        let atoms: f64 = self
            .atoms
            .iter()
            .filter(|a| a.0 >= eps)
            .map(|a| a.1 / (a.0 * a.0))
            .sum();
        atoms + self.continuous_star_mass(eps)
    }

    fn continuous_star_mass(&self, eps: f64) -> f64 {
        match self.continuous {
            ContinuousPart::None => 0.0,
            ContinuousPart::Uniform { mass } => mass * (1.0 / eps - 1.0),
            ContinuousPart::Beta { a, b, mass } => {
                let (lo, hi) = beta_star_pieces(a, b, eps);
                mass * (lo + hi) / ln_beta(a, b).exp()
            }
        }
    }

    /// Prepares a sampler for `r` under the normalized restriction of `Λ*` to
    /// `[ε,1]`.
    pub fn star_sampler(&self, eps: f64) -> Result<StarSampler> {
        self.validate()?;
        if !(eps > 0.0 && eps <= 1.0) {
            return param("cutoff ε must lie in (0,1]");
        }
        let mut pieces = Vec::new();
        for &(r, m) in &self.atoms {
            if r >= eps && m > 0.0 {
                pieces.push((m / (r * r), Piece::Atom(r)));
            }
        }
        match self.continuous {
            ContinuousPart::None => {}
            ContinuousPart::Uniform { mass } => {
                if mass > 0.0 && eps < 1.0 {
                    pieces.push((mass * (1.0 / eps - 1.0), Piece::Uniform));
                }
            }
            ContinuousPart::Beta { a, b, mass } => {
                if mass > 0.0 {
                    let (lo, hi) = beta_star_pieces(a, b, eps);
                    let scale = mass / ln_beta(a, b).exp();
                    if lo > 0.0 {
                        pieces.push((scale * lo, Piece::BetaLow { a, b }));
                    }
                    if hi > 0.0 {
                        pieces.push((scale * hi, Piece::BetaHigh { a, b }));
                    }
                }
            }
        }
        let rate = pieces.iter().map(|p| p.0).sum();
        Ok(StarSampler { eps, rate, pieces })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Piece {
    Atom(f64),
    Uniform,
    BetaLow { a: f64, b: f64 },
    BetaHigh { a: f64, b: f64 },
}

/// Sampler for the jump size `r` of Λ-events above a cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct StarSampler {
    eps: f64,
    rate: f64,
    pieces: Vec<(f64, Piece)>,
}

impl StarSampler {
    /// Event rate `Λ*([ε,1])`.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sample_r<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut u = rng.random::<f64>() * self.rate;
        let mut piece = self.pieces[self.pieces.len() - 1].1;
        for &(w, p) in &self.pieces {
            if u < w {
                piece = p;
                break;
            }
            u -= w;
        }
        let eps = self.eps;
        match piece {
            Piece::Atom(r) => r,
            Piece::Uniform => sample_power(-2.0, eps, 1.0, rng),
            Piece::BetaLow { a, b } => {
                let bound = if b >= 1.0 { 1.0 } else { 2f64.powf(1.0 - b) };
                loop {
                    let r = sample_power(a - 3.0, eps, 0.5, rng);
                    if rng.random::<f64>() * bound <= (1.0 - r).powf(b - 1.0) {
                        return r;
                    }
                }
            }
            Piece::BetaHigh { a, b } => {
                let bound = if a >= 3.0 { 1.0 } else { 2f64.powf(3.0 - a) };
                let top = 1.0 - eps.max(0.5);
                loop {
                    let t = top * rng.random::<f64>().powf(1.0 / b);
                    let r = 1.0 - t;
                    if r > 0.0 && rng.random::<f64>() * bound <= r.powf(a - 3.0) {
                        return r;
                    }
                }
            }
        }
    }
}

/// Waiting time and size of the next Λ-event above the cutoff; `None` when
/// `Λ*([ε,1]) = 0`.
pub fn sample_lambda_event<R: Rng + ?Sized>(
    lambda: &LambdaMeasure,
    eps: f64,
    rng: &mut R,
) -> Result<Option<(f64, f64)>> {
    let sampler = lambda.star_sampler(eps)?;
    if sampler.rate() <= 0.0 {
        return Ok(None);
    }
    let wait = Exp::new(sampler.rate())
        .map_err(|_| Error::Parameter("invalid Λ* rate".into()))?
        .sample(rng);
    Ok(Some((wait, sampler.sample_r(rng))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Individual {
    pub lineage: u64,
    pub ty: u32,
}

/// One replacement inside a block: `block[index]` became a child of `parent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub index: usize,
    pub child: u64,
    pub parent: u64,
}

/// Λ-resampling of `block` with jump size `r`: each individual is marked with
/// probability `r`; with at least two marked, a uniform marked parent's
/// offspring replaces every other marked individual. Children get fresh ids
/// from `next_lineage`.
pub fn apply_lambda_resampling<R: Rng + ?Sized>(
    block: &mut [Individual],
    r: f64,
    next_lineage: &mut u64,
    rng: &mut R,
) -> Vec<Replacement> {
    let n = block.len();
    if n < 2 || r <= 0.0 {
        return Vec::new();
    }
    let marked = if r >= 1.0 {
        n
    } else {
        Binomial::new(n as u64, r).expect("r in (0,1)").sample(rng) as usize
    };
    if marked < 2 {
        return Vec::new();
    }
    let chosen = index::sample(rng, n, marked).into_vec();
    let parent_pos = chosen[rng.random_range(0..marked)];
    let parent = block[parent_pos];
    let mut out = Vec::with_capacity(marked - 1);
    for &i in &chosen {
        if i == parent_pos {
            continue;
        }
        let child = *next_lineage;
        *next_lineage += 1;
        block[i] = Individual {
            lineage: child,
            ty: parent.ty,
        };
        out.push(Replacement {
            index: i,
            child,
            parent: parent.lineage,
        });
    }
    out
}

/// Birth record: `child` was born at `time` at `site` from `parent`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AncestryRecord {
    pub time: f64,
    pub child: u64,
    pub parent: u64,
    pub site: usize,
    /// 0 for local events and migration, `k` for a level-`k` block event.
    pub level: u32,
}

/// Append-only, time-ordered birth log. Lineages `0..founders` exist at
/// time 0 and have no parent.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AncestryLog {
    pub founders: u64,
    pub records: Vec<AncestryRecord>,
}

/// Block resampling at level `k`: rate multiplier `μ_k` and measure `Λ_k`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockLevel {
    pub level: u32,
    pub mu: f64,
    pub lambda: LambdaMeasure,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CanningsParams {
    /// Kingman pair rate `d`.
    pub resampling: f64,
    /// Local measure `Λ_0`.
    pub lambda: LambdaMeasure,
    pub blocks: Vec<BlockLevel>,
    /// Cutoff `ε` below which Λ-events are dropped.
    pub cutoff: f64,
}

impl CanningsParams {
    pub fn kingman(d: f64) -> Self {
        Self {
            resampling: d,
            lambda: LambdaMeasure::zero(),
            blocks: Vec::new(),
            cutoff: 1e-3,
        }
    }
}

/// Per-class event counts and truncation diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EventCounts {
    pub migration: u64,
    pub kingman: u64,
    pub local_lambda: u64,
    /// Indexed by block level `k` (entry 0 unused).
    pub block: Vec<u64>,
    /// Individuals removed (and as many copied) by block rebalancing.
    pub rebalance_corrections: u64,
    /// `Λ((0,ε))` of the local measure.
    pub dropped_pair_rate: f64,
    /// `Σ_k μ_k/N^{2k} Λ_k((0,ε))` over the simulated levels.
    pub dropped_block_rate: f64,
    /// Block levels beyond the truncation, skipped.
    pub dropped_levels: Vec<u32>,
}

/// Finite Cannings system with ancestry logging.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    geography: GeographySpec,
    kernel: MigrationKernel,
    params: CanningsParams,
    per_site: usize,
    population: Vec<Individual>,
    next_lineage: u64,
    time: f64,
    log: AncestryLog,
    counts: EventCounts,
    local_sampler: StarSampler,
    block_samplers: Vec<(u32, f64, StarSampler)>,
    class_rates: Vec<f64>,
}

const RATE_CAP: f64 = 1e15;

impl ParticleSystem {
    /// Builds a system whose site `s` holds the `M = types[s].len()`
    /// individuals with the given types.
    pub fn new(
        geography: GeographySpec,
        params: CanningsParams,
        types: Vec<Vec<u32>>,
    ) -> Result<Self> {
        geography.validate()?;
        params.lambda.validate()?;
        if !(params.resampling.is_finite() && params.resampling >= 0.0) {
            return param("resampling rate d must be finite and >= 0");
        }
        let sites = geography.site_count();
        if types.len() != sites {
            return param(alloc::format!(
                "expected {sites} sites, got {}",
                types.len()
            ));
        }
        let per_site = types[0].len();
        if per_site == 0 || types.iter().any(|t| t.len() != per_site) {
            return param("every site needs the same positive number of individuals");
        }
        let population: Vec<Individual> = types
            .into_iter()
            .flatten()
            .enumerate()
            .map(|(i, ty)| Individual {
                lineage: i as u64,
                ty,
            })
            .collect();
        let founders = population.len() as u64;
        let local_sampler = params.lambda.star_sampler(params.cutoff)?;
        let mut counts = EventCounts {
            dropped_pair_rate: params.lambda.dropped_pair_rate(params.cutoff),
            ..EventCounts::default()
        };
        let mut block_samplers = Vec::new();
        let shape = geography.hier_shape();
        for blk in &params.blocks {
            blk.lambda.validate()?;
            if blk.lambda.kingman > 0.0 {
                return param("block measures Λ_k with an atom at 0 are not supported");
            }
            if !(blk.mu.is_finite() && blk.mu >= 0.0) {
                return param("block rates μ_k must be finite and >= 0");
            }
            let Some((n, l)) = shape else {
                return param("block resampling needs a hierarchical geography");
            };
            if blk.level == 0 {
                return param("block levels start at k = 1");
            }
            if blk.level > l {
                counts.dropped_levels.push(blk.level);
                continue;
            }
            let scale = blk.mu / (n as f64).powi(2 * blk.level as i32);
            counts.dropped_block_rate += scale * blk.lambda.dropped_pair_rate(params.cutoff);
            let sampler = blk.lambda.star_sampler(params.cutoff)?;
            block_samplers.push((blk.level, scale, sampler));
        }
        counts.block = vec![0; shape.map_or(1, |s| s.1 as usize + 1)];
        let kernel = geography.kernel();
        let mut sys = Self {
            geography,
            kernel,
            params,
            per_site,
            population,
            next_lineage: founders,
            time: 0.0,
            log: AncestryLog {
                founders,
                records: Vec::new(),
            },
            counts,
            local_sampler,
            block_samplers,
            class_rates: Vec::new(),
        };
        sys.class_rates = sys.compute_class_rates()?;
        Ok(sys)
    }

    /// Each site gets `round(x0 M)` individuals of type 0 and the rest type 1.
    pub fn two_type(
        geography: GeographySpec,
        params: CanningsParams,
        per_site: usize,
        x0: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&x0) {
            return param("initial frequency must lie in [0,1]");
        }
        let zeros = libm::round(x0 * per_site as f64) as usize;
        let site: Vec<u32> = (0..per_site).map(|i| u32::from(i >= zeros)).collect();
        let sites = geography.site_count();
        Self::new(geography, params, vec![site; sites])
    }

    fn compute_class_rates(&self) -> Result<Vec<f64>> {
        let sites = self.geography.site_count() as f64;
        let m = self.per_site as f64;
        let mut rates = vec![
            sites * m * self.kernel.total_rate(),
            sites * m * (m - 1.0) / 2.0 * (self.params.resampling + self.params.lambda.kingman),
            sites * self.local_sampler.rate(),
        ];
        if let Some((n, l)) = self.geography.hier_shape() {
            for (level, scale, sampler) in &self.block_samplers {
                let balls = (n as f64).powi((l - level) as i32);
                rates.push(balls * scale * sampler.rate());
            }
        }
        for (i, &r) in rates.iter().enumerate() {
            if !(r.is_finite() && r <= RATE_CAP) {
                let level = if i < 3 {
                    0
                } else {
                    self.block_samplers[i - 3].0 as usize
                };
                return Err(Error::RateOverflow { level, rate: r });
            }
        }
        Ok(rates)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn per_site(&self) -> usize {
        self.per_site
    }

    pub fn sites(&self) -> usize {
        self.geography.site_count()
    }

    pub fn geography(&self) -> &GeographySpec {
        &self.geography
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn site_population(&self, site: usize) -> &[Individual] {
        &self.population[site * self.per_site..(site + 1) * self.per_site]
    }

    pub fn log(&self) -> &AncestryLog {
        &self.log
    }

    pub fn counts(&self) -> &EventCounts {
        &self.counts
    }

    pub fn total_rate(&self) -> f64 {
        self.class_rates.iter().sum()
    }

    /// Frequency of type 0 at each site.
    pub fn type0_frequencies(&self) -> Vec<f64> {
        self.population
            .chunks(self.per_site)
            .map(|s| s.iter().filter(|i| i.ty == 0).count() as f64 / self.per_site as f64)
            .collect()
    }

    /// Drops the ancestry log, keeping lineage numbering (useful for long
    /// runs whose genealogy is not needed).
    pub fn clear_log(&mut self) {
        self.log.records.clear();
    }

    fn record(&mut self, child: u64, parent: u64, site: usize, level: u32) {
        self.log.records.push(AncestryRecord {
            time: self.time,
            child,
            parent,
            site,
            level,
        });
    }

    fn fresh_lineage(&mut self) -> u64 {
        let id = self.next_lineage;
        self.next_lineage += 1;
        id
    }

    /// Runs the event loop until time `until`. Resumable: the exponential
    /// clock is memoryless, so consecutive calls compose to one run.
    pub fn advance<R: Rng + ?Sized>(&mut self, until: f64, rng: &mut R) -> Result<()> {
        let total = self.total_rate();
        if total <= 0.0 {
            self.time = self.time.max(until);
            return Ok(());
        }
        let clock = Exp::new(total).map_err(|_| Error::RateOverflow {
            level: 0,
            rate: total,
        })?;
        loop {
            let wait = clock.sample(rng);
            if self.time + wait > until {
                self.time = self.time.max(until);
                return Ok(());
            }
            self.time += wait;
            let mut u = rng.random::<f64>() * total;
            let mut class = self.class_rates.len() - 1;
            for (i, &r) in self.class_rates.iter().enumerate() {
                if u < r {
                    class = i;
                    break;
                }
                u -= r;
            }
            match class {
                0 => self.migration_event(rng)?,
                1 => self.kingman_event(rng),
                2 => self.local_lambda_event(rng),
                c => self.block_event(c - 3, rng),
            }
        }
    }

    fn migration_event<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.counts.migration += 1;
        let m = self.per_site;
        let pos = rng.random_range(0..self.population.len());
        let site = pos / m;
        let dest = self.kernel.sample_jump(site, rng)?;
        if dest != site {
            let parent = self.population[dest * m + rng.random_range(0..m)];
            let child = self.fresh_lineage();
            self.population[pos] = Individual {
                lineage: child,
                ty: parent.ty,
            };
            self.record(child, parent.lineage, site, 0);
        }
        Ok(())
    }

    fn kingman_event<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.counts.kingman += 1;
        let m = self.per_site;
        let site = rng.random_range(0..self.sites());
        let a = rng.random_range(0..m);
        let mut b = rng.random_range(0..m - 1);
        if b >= a {
            b += 1;
        }
        let (child_pos, parent_pos) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        let parent = self.population[site * m + parent_pos];
        let child = self.fresh_lineage();
        self.population[site * m + child_pos] = Individual {
            lineage: child,
            ty: parent.ty,
        };
        self.record(child, parent.lineage, site, 0);
    }

    fn local_lambda_event<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.counts.local_lambda += 1;
        let m = self.per_site;
        let site = rng.random_range(0..self.sites());
        let r = self.local_sampler.sample_r(rng);
        let range = site * m..(site + 1) * m;
        let reps =
            apply_lambda_resampling(&mut self.population[range], r, &mut self.next_lineage, rng);
        for rep in reps {
            self.record(rep.child, rep.parent, site, 0);
        }
    }

    fn block_event<R: Rng + ?Sized>(&mut self, which: usize, rng: &mut R) {
        let (n, l) = self
            .geography
            .hier_shape()
            .expect("block levels need Ω_{N,L}");
        let level = self.block_samplers[which].0;
        self.counts.block[level as usize] += 1;
        let m = self.per_site;
        let balls = (n as usize).pow(l - level);
        let ball = rng.random_range(0..balls);
        let ball_sites = (n as usize).pow(level);
        let first_site = ball_range(n, level as usize, (ball * ball_sites) as u64).start as usize;
        let range = first_site * m..(first_site + ball_sites) * m;
        let r = self.block_samplers[which].2.sample_r(rng);
        let reps = apply_lambda_resampling(
            &mut self.population[range.clone()],
            r,
            &mut self.next_lineage,
            rng,
        );
        for rep in reps {
            self.record(rep.child, rep.parent, first_site + rep.index / m, level);
        }

        // Uniform redistribution over the ball, then rebalancing to M per site.
        let mut buckets: Vec<Vec<Individual>> = vec![Vec::new(); ball_sites];
        for ind in &self.population[range.clone()] {
            buckets[rng.random_range(0..ball_sites)].push(*ind);
        }
        let mut removed = 0u64;
        for bucket in buckets.iter_mut() {
            while bucket.len() > m {
                let i = rng.random_range(0..bucket.len());
                bucket.swap_remove(i);
                removed += 1;
            }
        }
        let kept: Vec<Individual> = buckets.iter().flatten().copied().collect();
        for (offset, bucket) in buckets.iter_mut().enumerate() {
            let source_len = bucket.len();
            while bucket.len() < m {
                let parent = if source_len > 0 {
                    bucket[rng.random_range(0..source_len)]
                } else {
                    kept[rng.random_range(0..kept.len())]
                };
                let child = self.next_lineage;
                self.next_lineage += 1;
                bucket.push(Individual {
                    lineage: child,
                    ty: parent.ty,
                });
                self.log.records.push(AncestryRecord {
                    time: self.time,
                    child,
                    parent: parent.lineage,
                    site: first_site + offset,
                    level,
                });
            }
        }
        self.counts.rebalance_corrections += removed;
        for (slot, ind) in self.population[range]
            .iter_mut()
            .zip(buckets.into_iter().flatten())
        {
            *slot = ind;
        }
    }
}

/// Moment tracked by [`moran_fv_consistency`], with `h = x(1 − x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MomentStatistic {
    /// `E[h]`, averaged over sites.
    Heterozygosity,
    /// `E[h^2]`, averaged over sites.
    HeterozygositySquared,
}

impl MomentStatistic {
    pub fn eval(&self, x: f64) -> f64 {
        let h = x * (1.0 - x);
        match self {
            Self::Heterozygosity => h,
            Self::HeterozygositySquared => h * h,
        }
    }

    /// Single-site neutral diffusion value at time `t` from `x(0) = x0`.
    pub fn diffusion_value(&self, d: f64, x0: f64, t: f64) -> f64 {
        let h0 = x0 * (1.0 - x0);
        let slow = (-d * t).exp();
        match self {
            Self::Heterozygosity => h0 * slow,
            Self::HeterozygositySquared => {
                let a = h0 / 5.0;
                a * slow + (h0 * h0 - a) * (-6.0 * d * t).exp()
            }
        }
    }
}

/// Moment trajectory with Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MomentCurve {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConsistencyEntry {
    pub population_size: usize,
    pub particle: MomentCurve,
    /// `max_t |particle − diffusion reference|`.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConsistencyReport {
    pub statistic: MomentStatistic,
    pub times: Vec<f64>,
    pub entries: Vec<ConsistencyEntry>,
    /// Euler–Maruyama run of the matching diffusion.
    pub diffusion: MomentCurve,
    /// Closed form for the single-site diffusion (absent for several sites).
    pub reference: Option<Vec<f64>>,
}

/// Settings for [`moran_fv_consistency`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySettings {
    pub geography: GeographySpec,
    pub resampling: f64,
    pub x0: f64,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub dt: f64,
}

/// Runs the neutral two-type particle system for each population size and
/// the matching diffusion, tracking `statistic` along `times`. `rng_for`
/// returns an independent stream for `(population size index, replica)`;
/// index `sizes.len()` is used by the diffusion runs.
pub fn moran_fv_consistency<R: Rng>(
    sizes: &[usize],
    settings: &ConsistencySettings,
    statistic: MomentStatistic,
    mut rng_for: impl FnMut(usize, usize) -> R,
) -> Result<ConsistencyReport> {
    use crate::dynamics::{
        step_interacting_fv, DynamicsParams, MigrationOperator, TypeSimplexState,
    };
    use crate::stats::RunningStats;

    if settings.times.windows(2).any(|w| w[1] < w[0])
        || settings.times.first().is_some_and(|&t| t < 0.0)
    {
        return param("times must be nonnegative and sorted");
    }
    let sites = settings.geography.site_count();
    let summarize = |acc: &[RunningStats]| MomentCurve {
        mean: acc.iter().map(|s| s.mean()).collect(),
        std_err: acc.iter().map(|s| s.std_err()).collect(),
    };
    let site_avg =
        |xs: &[f64]| xs.iter().map(|&x| statistic.eval(x)).sum::<f64>() / xs.len() as f64;

    let reference = (sites == 1).then(|| {
        settings
            .times
            .iter()
            .map(|&t| statistic.diffusion_value(settings.resampling, settings.x0, t))
            .collect::<Vec<_>>()
    });

    let op = MigrationOperator::new(&settings.geography);
    let params = DynamicsParams::neutral(settings.resampling, 1.0, settings.dt);
    let mut diff_acc = vec![RunningStats::new(); settings.times.len()];
    for rep in 0..settings.replicas {
        let mut rng = rng_for(sizes.len(), rep);
        let mut state = TypeSimplexState::two_type(vec![settings.x0; sites]);
        let mut t = 0.0;
        for (i, &target) in settings.times.iter().enumerate() {
            while t < target - 1e-12 {
                let h = params.dt.min(target - t);
                let p = DynamicsParams {
                    dt: h,
                    ..params.clone()
                };
                step_interacting_fv(&mut state, &op, &p, &mut rng)?;
                t += h;
            }
            diff_acc[i].push(site_avg(&state.type0_frequencies()));
        }
    }
    let diffusion = summarize(&diff_acc);
    let target_curve = reference.clone().unwrap_or_else(|| diffusion.mean.clone());

    let mut entries = Vec::new();
    for (si, &m) in sizes.iter().enumerate() {
        let mut acc = vec![RunningStats::new(); settings.times.len()];
        for rep in 0..settings.replicas {
            let mut rng = rng_for(si, rep);
            let mut sys = ParticleSystem::two_type(
                settings.geography.clone(),
                CanningsParams::kingman(settings.resampling),
                m,
                settings.x0,
            )?;
            for (i, &target) in settings.times.iter().enumerate() {
                sys.advance(target, &mut rng)?;
                sys.clear_log();
                acc[i].push(site_avg(&sys.type0_frequencies()));
            }
        }
        let particle = summarize(&acc);
        let discrepancy = particle
            .mean
            .iter()
            .zip(&target_curve)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        entries.push(ConsistencyEntry {
            population_size: m,
            particle,
            discrepancy,
        });
    }
    Ok(ConsistencyReport {
        statistic,
        times: settings.times.clone(),
        entries,
        diffusion,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn atom_rate_and_size() {
        let lam = LambdaMeasure::atom(0.25, 1.0);
        let s = lam.star_sampler(0.01).unwrap();
        assert!((s.rate() - 16.0).abs() < 1e-12);
        let mut g = rng(1);
        assert!((0..100).all(|_| s.sample_r(&mut g) == 0.25));
    }

    #[test]
    fn uniform_star_mass() {
        let lam = LambdaMeasure::uniform(1.0);
        assert!((lam.star_mass(0.01) - 99.0).abs() < 1e-9);
        assert!((lam.dropped_pair_rate(0.01) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn beta_star_mass_matches_closed_form() {
        // Beta(2,2): Λ* density 6(1-r)/r, mass 6(-ln ε - 1 + ε).
        let eps: f64 = 0.01;
        let lam = LambdaMeasure::beta(2.0, 2.0, 1.0);
        let exact = 6.0 * (-eps.ln() - 1.0 + eps);
        assert!((lam.star_mass(eps) - exact).abs() < 1e-8);
        // Λ((0,ε)) = 3ε² - 2ε³.
        let dropped = 3.0 * eps * eps - 2.0 * eps * eps * eps;
        assert!((lam.dropped_pair_rate(eps) - dropped).abs() < 1e-10);
        assert!((lam.dropped_pair_rate(0.7) - (3.0 * 0.49 - 2.0 * 0.343)).abs() < 1e-8);
    }

    #[test]
    fn zero_measure_has_no_events() {
        let mut g = rng(2);
        assert_eq!(
            sample_lambda_event(&LambdaMeasure::zero(), 0.01, &mut g),
            Ok(None)
        );
        assert_eq!(
            sample_lambda_event(&LambdaMeasure::kingman(1.0), 0.01, &mut g),
            Ok(None)
        );
    }

    #[test]
    fn full_replacement_makes_one_family() {
        let mut block: Vec<Individual> = (0..10)
            .map(|i| Individual {
                lineage: i,
                ty: i as u32,
            })
            .collect();
        let mut next = 10;
        let reps = apply_lambda_resampling(&mut block, 1.0, &mut next, &mut rng(3));
        assert_eq!(reps.len(), 9);
        assert!(block.iter().all(|i| i.ty == block[0].ty));
        assert_eq!(next, 19);
    }

    #[test]
    fn zero_rates_leave_system_unchanged() {
        let geo = GeographySpec::mean_field(3, 0.0).unwrap();
        let params = CanningsParams::kingman(0.0);
        let mut sys = ParticleSystem::two_type(geo, params, 5, 0.4).unwrap();
        let before = sys.population().to_vec();
        sys.advance(10.0, &mut rng(4)).unwrap();
        assert_eq!(sys.population(), &before[..]);
        assert!(sys.log().records.is_empty());
        assert_eq!(sys.time(), 10.0);
    }

    #[test]
    fn population_sizes_constant_under_block_events() {
        let geo = GeographySpec::hier(3, 2, vec![1.0, 1.0]).unwrap();
        let params = CanningsParams {
            resampling: 1.0,
            lambda: LambdaMeasure::uniform(1.0),
            blocks: vec![
                BlockLevel {
                    level: 1,
                    mu: 50.0,
                    lambda: LambdaMeasure::uniform(1.0),
                },
                BlockLevel {
                    level: 2,
                    mu: 500.0,
                    lambda: LambdaMeasure::atom(0.5, 1.0),
                },
                BlockLevel {
                    level: 3,
                    mu: 1.0,
                    lambda: LambdaMeasure::uniform(1.0),
                },
            ],
            cutoff: 0.01,
        };
        let mut sys = ParticleSystem::two_type(geo, params, 6, 0.5).unwrap();
        sys.advance(3.0, &mut rng(5)).unwrap();
        assert_eq!(sys.population().len(), 9 * 6);
        assert!(sys.counts().block[1] > 0 && sys.counts().block[2] > 0);
        assert_eq!(sys.counts().dropped_levels, vec![3]);
        let recs = &sys.log().records;
        assert!(recs.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(recs.iter().all(|r| r.parent < r.child));
    }

    #[test]
    fn rate_overflow_names_level() {
        let geo = GeographySpec::hier(2, 2, vec![1.0, 1.0]).unwrap();
        let params = CanningsParams {
            blocks: vec![BlockLevel {
                level: 2,
                mu: 1e300,
                lambda: LambdaMeasure::uniform(1.0),
            }],
            ..CanningsParams::kingman(1.0)
        };
        let err = ParticleSystem::two_type(geo, params, 4, 0.5).unwrap_err();
        assert!(matches!(err, Error::RateOverflow { level: 2, .. }));
    }

    #[test]
    fn heterozygosity_squared_reference_starts_at_h0_squared() {
        let v = MomentStatistic::HeterozygositySquared.diffusion_value(1.0, 0.5, 0.0);
        assert!((v - 1.0 / 16.0).abs() < 1e-15);
    }
}

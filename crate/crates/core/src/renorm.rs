//! Hierarchical mean-field renormalization.
//!
//! Two volatility normalizations appear here. [`dk_recursion`] iterates
//!
//! ```text
//! d_{k+1} = c_k (λ_k/2 + d_k) / (c_k + λ_k/2 + d_k)
//! ```
//!
//! for a generator written as `d x(1−x) ∂²`. The simulators in this crate
//! use `σ x(1−x)` as the quadratic variation (generator `σ/2 x(1−x) ∂²`), so
//! `σ = 2d`; [`volatility_sequence`] performs the conversion. With that, the
//! single-site equilibrium at immigration `c`, volatility `σ` and mean `θ`
//! is `Beta(2cθ/σ, 2c(1−θ)/σ)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Beta, Distribution, Exp};

use crate::cannings::LambdaMeasure;
use crate::dynamics::{
    step_interacting_fv, DynamicsParams, McKeanVlasov, McKeanVlasovParams, MigrationOperator,
    Scheme, TypeSimplexState,
};
use crate::error::{param, Error, Result};
use crate::geometry::{
    ball_range, recurrence_integral, walk_degree, GeographySpec, HierAddress, RecurrenceEstimate,
    WalkDomain,
};

/// A nonnegative sequence indexed by `k = 0, 1, …`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Sequence {
    /// `scale · ratio^k`.
    Geometric { scale: f64, ratio: f64 },
    /// Explicit finite array.
    Values(Vec<f64>),
}

impl Sequence {
    pub fn constant(v: f64) -> Self {
        Self::Geometric {
            scale: v,
            ratio: 1.0,
        }
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        match self {
            Self::Geometric { scale, ratio } => Some(scale * ratio.powi(k as i32)),
            Self::Values(v) => v.get(k).copied(),
        }
    }

    /// Number of available terms (`None` for closed families).
    pub fn len(&self) -> Option<usize> {
        match self {
            Self::Geometric { .. } => None,
            Self::Values(v) => Some(v.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = match self {
            Self::Geometric { scale, ratio } => {
                !(*scale >= 0.0 && *ratio >= 0.0 && ratio.is_finite())
            }
            Self::Values(v) => v.iter().any(|x| !(*x >= 0.0)),
        };
        if bad {
            return param(alloc::format!("sequence {name} must be nonnegative"));
        }
        Ok(())
    }
}

/// Migration sequence `c_k`, block rates `λ_k` (`μ_k = λ_k/2`) and `d_0`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RenormParams {
    pub c: Sequence,
    pub lambda: Sequence,
    pub d0: f64,
}

impl RenormParams {
    pub fn validate(&self) -> Result<()> {
        self.c.validate("c")?;
        self.lambda.validate("λ")?;
        if !(self.d0 >= 0.0 && self.d0.is_finite()) {
            return param("d_0 must be finite and >= 0");
        }
        Ok(())
    }

    fn term(&self, seq: &Sequence, k: usize, name: &str) -> Result<f64> {
        seq.get(k)
            .ok_or_else(|| Error::Parameter(alloc::format!("{name}_{k} not given")))
    }
}

/// One step of the recursion; `c = ∞` passes `λ/2 + d` through.
fn dk_step(c: f64, lambda: f64, d: f64) -> f64 {
    let s = 0.5 * lambda + d;
    if c.is_infinite() {
        s
    } else if c + s == 0.0 {
        0.0
    } else {
        c * s / (c + s)
    }
}

/// `d_0, …, d_k`.
pub fn dk_sequence(params: &RenormParams, k: usize) -> Result<Vec<f64>> {
    params.validate()?;
    let mut out = Vec::with_capacity(k + 1);
    let mut d = params.d0;
    out.push(d);
    for i in 0..k {
        let c = params.term(&params.c, i, "c")?;
        let l = params.term(&params.lambda, i, "λ")?;
        d = dk_step(c, l, d);
        out.push(d);
    }
    Ok(out)
}

/// `d_k`.
pub fn dk_recursion(params: &RenormParams, k: usize) -> Result<f64> {
    Ok(*dk_sequence(params, k)?.last().expect("nonempty"))
}

/// Volatilities `σ_0, …, σ_k` in the simulators' normalization, starting
/// from `σ_0`: `σ_k = 2 d_k` with `d_0 = σ_0 / 2`.
pub fn volatility_sequence(
    c: &Sequence,
    lambda: &Sequence,
    sigma0: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let params = RenormParams {
        c: c.clone(),
        lambda: lambda.clone(),
        d0: sigma0 / 2.0,
    };
    Ok(dk_sequence(&params, k)?
        .into_iter()
        .map(|d| 2.0 * d)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Verdict {
    Clustering,
    LocalCoexistence,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DecisionRule {
    Analytic,
    NumericThreshold,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DichotomyVerdict {
    pub verdict: Verdict,
    /// `S_K = Σ_{k<K} m_k` for `K = 1, …, horizon`.
    pub partial_sums: Vec<f64>,
    pub rule: DecisionRule,
    pub reason: String,
}

/// `m_k = (μ_k + d_k)/c_k` for `k < horizon`.
pub fn m_sequence(params: &RenormParams, horizon: usize) -> Result<Vec<f64>> {
    let d = dk_sequence(params, horizon)?;
    (0..horizon)
        .map(|k| {
            let c = params.term(&params.c, k, "c")?;
            let l = params.term(&params.lambda, k, "λ")?;
            if c <= 0.0 {
                return param(alloc::format!("c_{k} must be positive"));
            }
            Ok((0.5 * l + d[k]) / c)
        })
        .collect()
}

/// Decides whether `Σ m_k` diverges (clustering) or converges (local
/// coexistence).
///
/// For `c_k = a c^k` and `λ_k = λ q^k` the answer is analytic: trivial
/// dynamics (`d_0 = λ = 0`) coexist; otherwise `c <= 1` clusters (then
/// `d_{k+1} ≈ min(c_k, …)` keeps `m_k` bounded below or harmonic), `λ > 0`
/// with `q >= c` clusters (`μ_k/c_k` does not vanish), and every other case
/// has geometrically summable `m_k`. Finite arrays get tail heuristics over
/// the available terms.
pub fn classify_dichotomy(params: &RenormParams, horizon: usize) -> Result<DichotomyVerdict> {
    params.validate()?;
    let available = match (params.c.len(), params.lambda.len()) {
        (None, None) => horizon,
        (a, b) => horizon
            .min(a.unwrap_or(usize::MAX))
            .min(b.unwrap_or(usize::MAX)),
    };
    let m = m_sequence(params, available)?;
    let mut acc = 0.0;
    let partial_sums: Vec<f64> = m
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect();

    if let (
        Sequence::Geometric { scale: a, ratio: c },
        Sequence::Geometric {
            scale: lam,
            ratio: q,
        },
    ) = (&params.c, &params.lambda)
    {
        if *a <= 0.0 {
            return param("c_0 must be positive");
        }
        let lam_on = *lam > 0.0;
        let (verdict, reason) = if params.d0 == 0.0 && !lam_on {
            (
                Verdict::LocalCoexistence,
                "no resampling at any level: m_k = 0",
            )
        } else if *c <= 1.0 {
            (Verdict::Clustering, "c <= 1: m_k is not summable")
        } else if lam_on && *q >= *c {
            (Verdict::Clustering, "q >= c: μ_k/c_k does not vanish")
        } else {
            (
                Verdict::LocalCoexistence,
                "c > 1 and q < c: m_k decays geometrically",
            )
        };
        return Ok(DichotomyVerdict {
            verdict,
            partial_sums,
            rule: DecisionRule::Analytic,
            reason: reason.into(),
        });
    }

    let (verdict, reason) = tail_heuristic(&m);
    Ok(DichotomyVerdict {
        verdict,
        partial_sums,
        rule: DecisionRule::NumericThreshold,
        reason,
    })
}

fn tail_heuristic(m: &[f64]) -> (Verdict, String) {
    let n = m.len();
    if n < 8 {
        return (Verdict::Inconclusive, "fewer than 8 terms".into());
    }
    let tail = &m[n / 2..];
    if tail.iter().all(|&v| v == 0.0) {
        return (Verdict::LocalCoexistence, "terms vanish".into());
    }
    if tail.iter().any(|&v| v <= 0.0) {
        return (Verdict::Inconclusive, "tail contains zero terms".into());
    }
    let ks: Vec<f64> = (n / 2..n).map(|k| (k + 1) as f64).collect();
    let logs: Vec<f64> = tail.iter().map(|v| v.ln()).collect();
    let (_, geo_slope, _) = crate::stats::ols(&ks, &logs);
    let logk: Vec<f64> = ks.iter().map(|k| k.ln()).collect();
    let (_, pow_slope, _) = crate::stats::ols(&logk, &logs);
    if geo_slope >= -1e-9 && pow_slope >= -0.5 {
        (
            Verdict::Clustering,
            alloc::format!("terms do not decay (log-log slope {pow_slope:.3})"),
        )
    } else if pow_slope > -0.8 {
        (
            Verdict::Clustering,
            alloc::format!("terms decay like k^{pow_slope:.3}, slower than 1/k"),
        )
    } else if pow_slope < -1.2 || geo_slope < -0.05 {
        (
            Verdict::LocalCoexistence,
            alloc::format!(
                "terms decay fast (log-log slope {pow_slope:.3}, log-linear slope {geo_slope:.3})"
            ),
        )
    } else {
        (
            Verdict::Inconclusive,
            alloc::format!("log-log slope {pow_slope:.3} too close to -1"),
        )
    }
}

/// Average of `x_ζ` over the `k`-ball around `η`.
pub fn block_average(state: &TypeSimplexState, eta: &HierAddress, k: usize) -> Result<Vec<f64>> {
    if k > eta.levels() {
        return param("block level exceeds L");
    }
    let sites = (eta.branching() as usize).pow(eta.levels() as u32);
    if state.sites() != sites {
        return param("state does not live on the address's group");
    }
    let range = ball_range(eta.branching(), k, eta.index());
    let size = (range.end - range.start) as f64;
    let mut avg = vec![0.0; state.types];
    for s in range {
        for (a, v) in avg.iter_mut().zip(state.site(s as usize)) {
            *a += v / size;
        }
    }
    Ok(avg)
}

/// Observation schedule `N^j t_N + N^k u_k`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProfileSchedule {
    pub t_n: f64,
    /// `u_0, …, u_j`.
    pub u: Vec<f64>,
}

/// Observation time for each `k = 0, …, j`.
pub fn profile_times(branching: u32, j: usize, schedule: &ProfileSchedule) -> Result<Vec<f64>> {
    if schedule.u.len() != j + 1 {
        return param("need u_0, …, u_j");
    }
    if !(schedule.t_n >= 0.0) || schedule.u.iter().any(|u| !(*u >= 0.0)) {
        return param("schedule times must be >= 0");
    }
    let n = branching as f64;
    Ok((0..=j)
        .map(|k| n.powi(j as i32) * schedule.t_n + n.powi(k as i32) * schedule.u[k])
        .collect())
}

/// Runs the interacting system from `initial` and records the nested block
/// averages `Y_{η,k}(N^j t_N + N^k u_k)` for `k = j, …, 0` (in that order).
#[allow(clippy::too_many_arguments)]
pub fn renormalized_profile<R: Rng + ?Sized>(
    geo: &GeographySpec,
    params: &DynamicsParams,
    initial: TypeSimplexState,
    eta: &HierAddress,
    j: usize,
    schedule: &ProfileSchedule,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let Some((n, l)) = geo.hier_shape() else {
        return param("renormalized profiles need a hierarchical geography");
    };
    if j > l as usize {
        return param("j exceeds the truncation L");
    }
    let times = profile_times(n, j, schedule)?;
    let last = times.iter().copied().fold(0.0, f64::max);
    if last > horizon {
        return Err(Error::Config(alloc::format!(
            "profile needs time {last} but the horizon is {horizon}"
        )));
    }
    let op = MigrationOperator::new(geo);
    let mut order: Vec<usize> = (0..=j).collect();
    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
    let mut state = initial;
    let mut t = 0.0;
    let mut out = vec![Vec::new(); j + 1];
    for k in order {
        while t < times[k] - 1e-12 * times[k].max(1.0) {
            let h = params.dt.min(times[k] - t);
            let p = DynamicsParams {
                dt: h,
                ..params.clone()
            };
            step_interacting_fv(&mut state, &op, &p, rng)?;
            t += h;
        }
        out[j - k] = block_average(&state, eta, k)?;
    }
    Ok(out)
}

/// Parameters of one chain transition `K_k`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChainLevel {
    pub c: f64,
    /// Volatility `σ_k` (quadratic-variation normalization).
    pub sigma: f64,
    pub lambda: Option<LambdaMeasure>,
}

/// Transitions for levels `k = 0, …, j`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChainSpec {
    pub levels: Vec<ChainLevel>,
}

impl ChainSpec {
    /// Levels `0..=j` with `σ_k` from the volatility recursion and no
    /// Λ-part.
    pub fn from_recursion(c: &Sequence, lambda: &Sequence, sigma0: f64, j: usize) -> Result<Self> {
        let sigma = volatility_sequence(c, lambda, sigma0, j)?;
        let levels = (0..=j)
            .map(|k| {
                Ok(ChainLevel {
                    c: c.get(k)
                        .ok_or_else(|| Error::Parameter(alloc::format!("c_{k} not given")))?,
                    sigma: sigma[k],
                    lambda: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ChainEngine {
    /// Exact Beta equilibria (no Λ-part).
    Beta,
    /// Simulated McKean–Vlasov equilibria: run from `θ'` for `burn_in`.
    Simulated { burn_in: f64, dt: f64, cutoff: f64 },
}

/// Chain states `M_{−(j+1)}, …, M_0` (two types: frequency of type 0).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InteractionChainPath {
    states: Vec<f64>,
}

impl InteractionChainPath {
    pub fn j(&self) -> usize {
        self.states.len() - 2
    }

    /// `M_k` for `k ∈ {−(j+1), …, 0}`.
    pub fn get(&self, k: i64) -> Option<f64> {
        let idx = k + self.states.len() as i64 - 1;
        usize::try_from(idx)
            .ok()
            .and_then(|i| self.states.get(i).copied())
    }

    /// `(k, M_k)` in increasing `k`.
    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        let top = self.states.len() as i64 - 1;
        self.states
            .iter()
            .enumerate()
            .map(move |(i, &v)| (i as i64 - top, v))
    }
}

/// Draws one path of the interaction chain from `M_{−(j+1)} = θ`.
pub fn interaction_chain_sample<R: Rng + ?Sized>(
    theta: f64,
    spec: &ChainSpec,
    j: usize,
    engine: ChainEngine,
    rng: &mut R,
) -> Result<InteractionChainPath> {
    if !(0.0..=1.0).contains(&theta) {
        return param("θ must lie in [0,1]");
    }
    if spec.levels.len() < j + 1 {
        return param("chain spec needs levels 0..=j");
    }
    for (k, lv) in spec.levels.iter().enumerate().take(j + 1) {
        if !(lv.c > 0.0 && lv.c.is_finite() && lv.sigma >= 0.0 && lv.sigma.is_finite()) {
            return param(alloc::format!("level {k}: need c > 0 and σ >= 0"));
        }
        match engine {
            ChainEngine::Beta => {
                if lv
                    .lambda
                    .as_ref()
                    .is_some_and(|l| l.total_mass() > l.kingman)
                {
                    return param("the Beta engine cannot handle a Λ-part");
                }
            }
            ChainEngine::Simulated {
                burn_in,
                dt,
                cutoff,
            } => {
                if !(dt > 0.0 && cutoff > 0.0) {
                    return param("engine B needs dt > 0 and a cutoff ε > 0");
                }
                if lv.c * burn_in < 5.0 {
                    return Err(Error::NonConvergence(alloc::format!(
                        "level {k}: burn-in {burn_in} shorter than 5 relaxation times 1/c"
                    )));
                }
            }
        }
    }
    let mut states = Vec::with_capacity(j + 2);
    states.push(theta);
    let mut current = theta;
    for k in (0..=j).rev() {
        let lv = &spec.levels[k];
        current = if current <= 0.0 || current >= 1.0 {
            current
        } else {
            match engine {
                ChainEngine::Beta => {
                    let sigma = lv.sigma + lv.lambda.as_ref().map_or(0.0, |l| l.kingman);
                    if sigma == 0.0 {
                        current
                    } else {
                        let a = 2.0 * lv.c * current / sigma;
                        let b = 2.0 * lv.c * (1.0 - current) / sigma;
                        Beta::new(a, b)
                            .map_err(|_| Error::Parameter("invalid Beta parameters".into()))?
                            .sample(rng)
                    }
                }
                ChainEngine::Simulated {
                    burn_in,
                    dt,
                    cutoff,
                } => {
                    let mut p = McKeanVlasovParams::neutral(lv.c, lv.sigma, dt);
                    p.scheme = Scheme::BoundaryExact;
                    p.lambda = lv.lambda.clone().map(|l| (l, cutoff));
                    let th = [current, 1.0 - current];
                    let mut mv = McKeanVlasov::new(p, &th, &th)?;
                    mv.advance(burn_in, rng)?;
                    mv.state()[0]
                }
            }
        };
        states.push(current);
    }
    Ok(InteractionChainPath { states })
}

/// Power-law seedbank `K_m = A m^{−α}`, `e_m = B m^{−β}`, `m = 1, …, M_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedbankTailParams {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub m_max: usize,
}

impl SeedbankTailParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return param("seedbank: A and B must be positive");
        }
        if !(self.alpha < 1.0) {
            return param("seedbank: need α < 1");
        }
        if !(self.alpha + self.beta > 1.0) {
            return param(alloc::format!(
                "seedbank: need α + β > 1 (got α = {}, β = {})",
                self.alpha,
                self.beta
            ));
        }
        if self.m_max == 0 {
            return param("seedbank: M_max must be >= 1");
        }
        Ok(())
    }

    /// `γ = (α + β − 1)/β`.
    pub fn gamma(&self) -> f64 {
        (self.alpha + self.beta - 1.0) / self.beta
    }

    /// `C = (A/β) B^{1−γ} γ Γ(γ)`.
    pub fn tail_constant(&self) -> f64 {
        let g = self.gamma();
        self.a / self.beta * self.b.powf(1.0 - g) * g * libm::tgamma(g)
    }

    pub fn colours(&self) -> Colours {
        let (mut sizes, mut exchange) = (
            Vec::with_capacity(self.m_max),
            Vec::with_capacity(self.m_max),
        );
        for m in 1..=self.m_max {
            let mf = m as f64;
            sizes.push(self.a * mf.powf(-self.alpha));
            exchange.push(self.b * mf.powf(-self.beta));
        }
        Colours { sizes, exchange }
    }

    /// Bound `Σ_{m > M_max} K_m e_m <= A B M^{1−α−β}/(α+β−1)`.
    pub fn truncated_chi_bound(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.a * self.b * (self.m_max as f64).powf(1.0 - s) / (s - 1.0)
    }
}

/// Explicit colours `(K_m, e_m)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Colours {
    pub sizes: Vec<f64>,
    pub exchange: Vec<f64>,
}

impl Colours {
    pub fn chi(&self) -> f64 {
        self.sizes
            .iter()
            .zip(&self.exchange)
            .map(|(k, e)| k * e)
            .sum()
    }

    pub fn rho(&self) -> f64 {
        self.sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() != self.exchange.len() || self.sizes.is_empty() {
            return param("seedbank: K and e must be nonempty and of equal length");
        }
        if self
            .sizes
            .iter()
            .chain(&self.exchange)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return param("seedbank: K_m and e_m must be finite and >= 0");
        }
        Ok(())
    }
}

/// Seedbank description for the tail and regime analyses.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SeedbankSpec {
    PowerLaw(SeedbankTailParams),
    Colours(Colours),
}

impl SeedbankSpec {
    pub fn colours(&self) -> Result<Colours> {
        match self {
            Self::PowerLaw(p) => {
                p.validate()?;
                Ok(p.colours())
            }
            Self::Colours(c) => {
                c.validate()?;
                Ok(c.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TailReport {
    pub grid: Vec<f64>,
    /// Truncated `P(τ > t)` on the grid.
    pub tail: Vec<f64>,
    pub chi: f64,
    /// Bound on `|P_trunc(τ > t) − P(τ > t)|` (zero for explicit colours).
    pub truncation_bound: f64,
    pub gamma: Option<f64>,
    pub tail_constant: Option<f64>,
}

/// Wake-up time sampler: colour `m` with probability `K_m e_m/χ`, then
/// `Exp(e_m)`.
#[derive(Debug, Clone)]
pub struct WakeUpSampler {
    alias: WeightedAliasIndex<f64>,
    exchange: Vec<f64>,
}

impl WakeUpSampler {
    pub fn new(colours: &Colours) -> Result<Self> {
        colours.validate()?;
        let weights: Vec<f64> = colours
            .sizes
            .iter()
            .zip(&colours.exchange)
            .map(|(k, e)| k * e)
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            return param("seedbank: χ = 0");
        }
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::Parameter(alloc::format!("{e}")))?;
        Ok(Self {
            alias,
            exchange: colours.exchange.clone(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = self.alias.sample(rng);
        Exp::new(self.exchange[m])
            .expect("positive exchange rate")
            .sample(rng)
    }
}

/// Truncated wake-up tail `P(τ > t) = Σ (K_m e_m/χ) e^{−e_m t}` on `grid`.
pub fn seedbank_tail(spec: &SeedbankSpec, grid: &[f64]) -> Result<TailReport> {
    let colours = spec.colours()?;
    let chi = colours.chi();
    if chi <= 0.0 {
        return param("seedbank: χ = 0");
    }
    let tail = grid
        .iter()
        .map(|&t| {
            colours
                .sizes
                .iter()
                .zip(&colours.exchange)
                .map(|(k, e)| k * e * (-e * t).exp())
                .sum::<f64>()
                / chi
        })
        .collect();
    let (bound, gamma, constant) = match spec {
        SeedbankSpec::PowerLaw(p) => (
            p.truncated_chi_bound() / chi,
            Some(p.gamma()),
            Some(p.tail_constant()),
        ),
        SeedbankSpec::Colours(_) => (0.0, None, None),
    };
    Ok(TailReport {
        grid: grid.to_vec(),
        tail,
        chi,
        truncation_bound: bound,
        gamma,
        tail_constant: constant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RegimeVerdict {
    Coexistence,
    Clustering,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RegimeReport {
    pub verdict: RegimeVerdict,
    /// Whether `ϱ = Σ K_m` is finite (power laws with `α < 1` have `ϱ = ∞`).
    pub rho_finite: bool,
    /// `ϱ` at the truncation.
    pub rho_truncated: f64,
    pub gamma: Option<f64>,
    pub walk_degree: Option<f64>,
    /// Which criterion decided: `I_a`, `I_a_gamma` or `gamma<1/2`.
    pub criterion: String,
    pub estimate: Option<RecurrenceEstimate>,
}

/// Monte Carlo settings used when the walk family is not recognized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeMonteCarlo {
    pub horizon: f64,
    pub replicas: usize,
}

/// Long-time regime of the seedbank system on the given walk.
///
/// With `ϱ < ∞` the criterion is `I_â < ∞`; with the power-law seedbank
/// (`ϱ = ∞`) it is `I_{â,γ} < ∞`, automatically true when `γ < 1/2`. For a
/// walk of degree `g` (`â_t(0,0) ≍ t^{−(1+g)}`) these read `g > 0` and
/// `(1−γ)/γ + g > 0`. A mean-field walk on finitely many sites with positive
/// rate counts as transient (its centered Green function is finite); a walk
/// with rate 0 has `â_t(0,0) ≡ 1`.
pub fn seedbank_regime<R: Rng + ?Sized>(
    walk: &GeographySpec,
    spec: &SeedbankSpec,
    monte_carlo: Option<RegimeMonteCarlo>,
    rng: &mut R,
) -> Result<RegimeReport> {
    walk.validate()?;
    let colours = spec.colours()?;
    let (rho_finite, gamma) = match spec {
        SeedbankSpec::PowerLaw(p) => (false, Some(p.gamma())),
        SeedbankSpec::Colours(_) => (true, None),
    };
    let mut report = RegimeReport {
        verdict: RegimeVerdict::Inconclusive,
        rho_finite,
        rho_truncated: colours.rho(),
        gamma,
        walk_degree: None,
        criterion: String::from(if rho_finite { "I_a" } else { "I_a_gamma" }),
        estimate: None,
    };
    if let Some(g) = gamma {
        if g < 0.5 {
            report.verdict = RegimeVerdict::Coexistence;
            report.criterion = "gamma<1/2".into();
            return Ok(report);
        }
    }
    // Weight exponent p: the criterion integral is ∫ t^{-p} â_t(0,0) dt.
    let p = gamma.map_or(0.0, |g| (1.0 - g) / g);
    let finite = |degree: f64| p + degree > 0.0;
    let decided = if walk.total_jump_rate() <= 0.0 {
        Some(false)
    } else if let GeographySpec::MeanField { sites, .. } = walk {
        Some(*sites > 1)
    } else if let Some(degree) = walk_degree(walk) {
        report.walk_degree = Some(degree);
        Some(finite(degree))
    } else {
        None
    };
    match decided {
        Some(true) => report.verdict = RegimeVerdict::Coexistence,
        Some(false) => report.verdict = RegimeVerdict::Clustering,
        None => {
            if let Some(mc) = monte_carlo {
                report.estimate = Some(recurrence_integral(
                    walk,
                    gamma.unwrap_or(1.0),
                    WalkDomain::InfiniteLattice,
                    mc.horizon,
                    mc.replicas,
                    rng,
                )?);
            }
        }
    }
    Ok(report)
}

//! Finite system scheme: large finite systems observed on the time scale
//! `β(n) = |G_n|` against the macroscopic diffusion
//! `dΘ = √(r Θ(1−Θ)) dw`, for which `E[Θ_t(1−Θ_t)] = θ_0(1−θ_0) e^{−r t}`.
//!
//! The macroscopic rate `r` is `d* = d/(1 + d Â(0,0))` on tori (with `Â`
//! the Green function at the origin of the difference of two independent
//! walks), `2cd/(2c+d)` in the mean-field limit, and `κ F g/θ(1−θ)` for the
//! mean-field seedbank.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{
    step_interacting_fv, step_seedbank_with_noise, DynamicsParams, MigrationOperator, Scheme,
    SeedbankParams, SeedbankState, TypeSimplexState,
};
use crate::error::{param, Error, Result};
use crate::genealogy::GenealogySample;
use crate::geometry::{green_at_zero, GeographySpec, WalkDomain};
use crate::stats::{ols, RunningStats};

/// `d*` with linearly propagated uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DStar {
    pub value: f64,
    pub std_err: f64,
}

/// `d* = d/(1 + d Â)`; `|∂d*/∂Â| = d²/(1 + d Â)²` scales the error.
pub fn compute_dstar(d: f64, green: f64, green_std_err: f64) -> Result<DStar> {
    if !(d >= 0.0 && d.is_finite()) {
        return param("d must be finite and >= 0");
    }
    if !(green >= 0.0) || !(green_std_err >= 0.0) {
        return param("Green estimate must be >= 0");
    }
    if green.is_infinite() {
        return Ok(DStar {
            value: 0.0,
            std_err: 0.0,
        });
    }
    let denom = 1.0 + d * green;
    Ok(DStar {
        value: d / denom,
        std_err: d * d / (denom * denom) * green_std_err,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Kappa {
    pub value: f64,
    /// Set when the reported residual `Σ_{m > M} K_m` exceeds the tolerance.
    pub divergent: bool,
}

/// `κ = (1 + Σ K_m)^{−2}`.
pub fn compute_kappa(sizes: &[f64], residual: f64, tolerance: f64) -> Result<Kappa> {
    if sizes.iter().any(|k| !(k.is_finite() && *k >= 0.0)) || !(residual >= 0.0) {
        return param("K_m must be finite and >= 0");
    }
    let rho: f64 = sizes.iter().sum();
    let value = if residual.is_finite() {
        (1.0 + rho + residual).powi(-2)
    } else {
        0.0
    };
    Ok(Kappa {
        value,
        divergent: residual > tolerance,
    })
}

/// `E_ν[x(1−x)]/θ(1−θ)` at equilibrium of the mean-field seedbank
/// `dx = c(θ−x) + Σ e_m K_m (y_m − x) + √(d x(1−x)) dw`,
/// `dy_m = e_m (x − y_m)`, from the stationary covariance equations.
pub fn seedbank_heterozygosity_factor(
    c: f64,
    d: f64,
    exchange: &[f64],
    sizes: &[f64],
) -> Result<f64> {
    let m = exchange.len();
    if sizes.len() != m {
        return param("seedbank: e and K must have the same length");
    }
    if !(c > 0.0) || !(d >= 0.0) {
        return param("need c > 0 and d >= 0");
    }
    // Unknowns: V = Var x, C_l = Cov(x, y_l); Cov(y_l, y_k) = (e_l C_k + e_k C_l)/(e_l + e_k).
    let n = m + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    let s: f64 = exchange.iter().zip(sizes).map(|(e, k)| e * k).sum();
    // −2cV + 2 Σ e_l K_l (C_l − V) + d(1 − V) = 0
    a[0][0] = -2.0 * c - 2.0 * s - d;
    for l in 0..m {
        a[0][l + 1] = 2.0 * exchange[l] * sizes[l];
    }
    a[0][n] = -d;
    // −c C_k + Σ_l e_l K_l (D_lk − C_k) + e_k (V − C_k) = 0
    for k in 0..m {
        let row = &mut a[k + 1];
        row[0] = exchange[k];
        row[k + 1] -= c + s + exchange[k];
        for l in 0..m {
            let w = exchange[l] * sizes[l];
            let tot = exchange[l] + exchange[k];
            if w == 0.0 {
                continue;
            }
            if tot == 0.0 {
                continue;
            }
            row[k + 1] += w * exchange[l] / tot;
            row[l + 1] += w * exchange[k] / tot;
        }
    }
    let sol = solve(a)?;
    Ok(1.0 - sol[0])
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::NumericalFailure { site: col, step: 0 });
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                let (upper, lower) = a.split_at_mut(row);
                for (t, s) in lower[0][col..=n].iter_mut().zip(&upper[col][col..=n]) {
                    *t -= f * s;
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FssGeometry {
    /// `n` sites with uniform migration.
    MeanField,
    /// Simple random walk on `(2n+1)^dim` sites.
    Torus { dim: u32 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FssModel {
    FisherWright {
        geometry: FssGeometry,
        c: f64,
        d: f64,
    },
    /// Mean-field seedbank with explicit colours.
    Seedbank {
        c: f64,
        d: f64,
        exchange: Vec<f64>,
        sizes: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum InitialLaw {
    /// Every site at `θ_0`.
    #[default]
    Constant,
    /// Independent `Bernoulli(θ_0)` sites.
    Bernoulli,
}

/// Settings for the Green estimate behind `d*` on tori.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GreenSettings {
    pub replicas: usize,
    /// Truncation horizon; `None` uses `β(n_max)`.
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FssExperiment {
    pub model: FssModel,
    /// System sizes: site count for mean-field, half-width for tori.
    pub ladder: Vec<u32>,
    pub theta0: f64,
    pub initial: InitialLaw,
    /// Macroscopic observation times (increasing, starting at 0).
    pub times: Vec<f64>,
    pub replicas: usize,
    pub dt: f64,
    /// Site update scheme for Fisher–Wright models (the seedbank is always
    /// stepped with Euler–Maruyama).
    pub scheme: Scheme,
    /// Microscopic spacing of the realized-volatility increments.
    pub qv_interval: f64,
    pub green: GreenSettings,
    /// Cap on the total number of site updates.
    pub max_site_steps: Option<f64>,
}

impl FssExperiment {
    pub fn validate(&self) -> Result<()> {
        match &self.model {
            FssModel::FisherWright { geometry, c, d } => {
                if !(*c >= 0.0 && *d >= 0.0 && c.is_finite() && d.is_finite()) {
                    return param("c and d must be finite and >= 0");
                }
                if let FssGeometry::Torus { dim } = geometry {
                    if *dim == 0 {
                        return param("torus dimension must be >= 1");
                    }
                }
            }
            FssModel::Seedbank {
                c,
                d,
                exchange,
                sizes,
            } => {
                if !(*c > 0.0 && *d >= 0.0 && c.is_finite() && d.is_finite()) {
                    return param("seedbank FSS needs c > 0 and d >= 0");
                }
                if exchange.len() != sizes.len() {
                    return param("seedbank: e and K must have the same length");
                }
                if exchange
                    .iter()
                    .chain(sizes)
                    .any(|v| !(v.is_finite() && *v >= 0.0))
                {
                    return param("seedbank: e_m and K_m must be finite and >= 0");
                }
                if self.scheme != Scheme::Euler {
                    return param("the seedbank FSS supports only the Euler scheme");
                }
            }
        }
        if self.ladder.is_empty() || self.ladder.contains(&0) {
            return param("ladder must list positive sizes");
        }
        if !(0.0..=1.0).contains(&self.theta0) {
            return param("θ_0 must lie in [0,1]");
        }
        if self.times.first() != Some(&0.0) || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return param("macroscopic times must start at 0 and increase");
        }
        if !(self.dt > 0.0 && self.qv_interval > 0.0) {
            return param("dt and qv_interval must be positive");
        }
        Ok(())
    }

    /// `β(n) = |G_n|`.
    pub fn sites(&self, n: u32) -> usize {
        match &self.model {
            FssModel::FisherWright {
                geometry: FssGeometry::Torus { dim },
                ..
            } => (2 * n as usize + 1).pow(*dim),
            _ => n as usize,
        }
    }

    fn geography(&self, n: u32) -> Result<GeographySpec> {
        match &self.model {
            FssModel::FisherWright {
                geometry: FssGeometry::Torus { dim },
                ..
            } => GeographySpec::simple_torus(*dim, n),
            _ => GeographySpec::mean_field(n, 1.0),
        }
    }

    /// Site updates needed for the whole ladder.
    pub fn site_steps(&self) -> f64 {
        let t_max = *self.times.last().unwrap_or(&0.0);
        let colours = match &self.model {
            FssModel::Seedbank { sizes, .. } => 1 + sizes.len(),
            _ => 1,
        };
        self.ladder
            .iter()
            .map(|&n| {
                let s = self.sites(n) as f64;
                s * s * t_max / self.dt * colours as f64
            })
            .sum::<f64>()
            * self.replicas as f64
    }

    fn check_budget(&self) -> Result<()> {
        if let Some(cap) = self.max_site_steps {
            let needed = self.site_steps();
            if needed > cap {
                return Err(Error::Budget { needed, cap });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ReferenceKind {
    MeanField,
    Torus,
    Seedbank,
}

/// The macroscopic diffusion the ladder is compared against.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThetaReference {
    pub kind: ReferenceKind,
    /// Macroscopic rate `r` in `E[Θ_t(1−Θ_t)] = θ_0(1−θ_0) e^{−rt}`.
    pub rate: f64,
    pub rate_std_err: f64,
    pub theta0: f64,
    /// `κ` for the seedbank, 1 otherwise.
    pub kappa: f64,
    /// `F g(θ)/θ(1−θ)` before the `κ` factor.
    pub fg_factor: f64,
    /// Green function value and truncation horizon (tori only).
    pub green: Option<(f64, f64)>,
}

impl ThetaReference {
    pub fn moment(&self, t: f64) -> f64 {
        self.theta0 * (1.0 - self.theta0) * (-self.rate * t).exp()
    }
}

/// Builds the reference diffusion for an experiment.
pub fn theta_reference<R: Rng + ?Sized>(
    exp: &FssExperiment,
    rng: &mut R,
) -> Result<ThetaReference> {
    exp.validate()?;
    let theta0 = exp.theta0;
    Ok(match &exp.model {
        FssModel::FisherWright {
            geometry: FssGeometry::MeanField,
            c,
            d,
        } => {
            let fg = if *d == 0.0 {
                1.0
            } else {
                2.0 * c / (2.0 * c + d)
            };
            ThetaReference {
                kind: ReferenceKind::MeanField,
                rate: d * fg,
                rate_std_err: 0.0,
                theta0,
                kappa: 1.0,
                fg_factor: d * fg,
                green: None,
            }
        }
        FssModel::FisherWright {
            geometry: FssGeometry::Torus { dim },
            c,
            d,
        } => {
            let n_max = *exp.ladder.iter().max().expect("nonempty ladder");
            let horizon = exp.green.horizon.unwrap_or(exp.sites(n_max) as f64);
            let (g, se) = if *c == 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                let GeographySpec::Torus {
                    dim,
                    half_width,
                    steps,
                    ..
                } = GeographySpec::simple_torus(*dim, 1)?
                else {
                    unreachable!()
                };
                let diff = GeographySpec::Torus {
                    dim,
                    half_width,
                    steps,
                    rate: 2.0 * c,
                };
                let est = green_at_zero(
                    &diff,
                    WalkDomain::InfiniteLattice,
                    horizon,
                    exp.green.replicas,
                    rng,
                )?;
                (est.mean, est.std_err)
            };
            let ds = compute_dstar(*d, g, se)?;
            ThetaReference {
                kind: ReferenceKind::Torus,
                rate: ds.value,
                rate_std_err: ds.std_err,
                theta0,
                kappa: 1.0,
                fg_factor: ds.value,
                green: Some((g, horizon)),
            }
        }
        FssModel::Seedbank {
            c,
            d,
            exchange,
            sizes,
        } => {
            let kappa = compute_kappa(sizes, 0.0, 0.0)?.value;
            let fg = d * seedbank_heterozygosity_factor(*c, *d, exchange, sizes)?;
            ThetaReference {
                kind: ReferenceKind::Seedbank,
                rate: kappa * fg,
                rate_std_err: 0.0,
                theta0,
                kappa,
                fg_factor: fg,
                green: None,
            }
        }
    })
}

/// One replica of one ladder rung.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FssPath {
    /// `θ̂_n(t β(n))` on the macroscopic grid.
    pub theta_hat: Vec<f64>,
    /// `Σ (Δθ̂)²` over increments of `qv_interval`.
    pub quadratic_variation: f64,
    /// `Σ θ̂(1−θ̂) Δt` (macroscopic time, left points).
    pub heterozygosity_time: f64,
    pub clip_events: u64,
}

enum System {
    Fw(TypeSimplexState, DynamicsParams),
    Seedbank(SeedbankState, SeedbankParams, f64),
}

impl System {
    fn theta_hat(&self) -> f64 {
        match self {
            Self::Fw(s, _) => s.x.iter().step_by(2).sum::<f64>() / s.sites() as f64,
            Self::Seedbank(s, p, total) => {
                s.weighted(&p.sizes).iter().sum::<f64>() / (s.x.len() as f64 * (1.0 + total))
            }
        }
    }

    fn step<R: Rng + ?Sized>(&mut self, op: &MigrationOperator, h: f64, rng: &mut R) -> Result<()> {
        match self {
            Self::Fw(s, p) => {
                p.dt = h;
                step_interacting_fv(s, op, p, rng)
            }
            Self::Seedbank(s, p, _) => {
                p.dt = h;
                let normals: Vec<f64> =
                    (0..s.x.len()).map(|_| StandardNormal.sample(rng)).collect();
                step_seedbank_with_noise(s, op, p, &normals)
            }
        }
    }

    fn clips(&self) -> u64 {
        match self {
            Self::Fw(s, _) => s.clip_events,
            Self::Seedbank(s, _, _) => s.clip_events,
        }
    }
}

/// Simulates one replica of rung `n` (a ladder entry).
pub fn fss_replica<R: Rng + ?Sized>(exp: &FssExperiment, n: u32, rng: &mut R) -> Result<FssPath> {
    exp.validate()?;
    let sites = exp.sites(n);
    let geo = exp.geography(n)?;
    let op = MigrationOperator::new(&geo);
    let beta = sites as f64;
    let x0: Vec<f64> = match exp.initial {
        InitialLaw::Constant => vec![exp.theta0; sites],
        InitialLaw::Bernoulli => (0..sites)
            .map(|_| {
                if rng.random_bool(exp.theta0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let mut system = match &exp.model {
        FssModel::FisherWright { c, d, .. } => {
            let params = DynamicsParams {
                scheme: exp.scheme,
                ..DynamicsParams::neutral(*d, *c, exp.dt)
            };
            System::Fw(TypeSimplexState::two_type(x0), params)
        }
        FssModel::Seedbank {
            c,
            d,
            exchange,
            sizes,
        } => {
            let colours = sizes.len();
            let y = x0
                .iter()
                .flat_map(|&v| core::iter::repeat_n(v, colours))
                .collect();
            let params = SeedbankParams {
                resampling: *d,
                migration: *c,
                exchange: exchange.clone(),
                sizes: sizes.clone(),
                dt: exp.dt,
                residual_size: 0.0,
                diffusion: None,
            };
            let total = params.total_size();
            System::Seedbank(SeedbankState::new(x0, y, colours)?, params, total)
        }
    };

    let t_end = exp.times.last().copied().unwrap_or(0.0) * beta;
    let mut theta_hat = Vec::with_capacity(exp.times.len());
    let mut qv = 0.0;
    let mut het = 0.0;
    let mut last = system.theta_hat();
    let mut next_qv = exp.qv_interval;
    let mut next_obs = 0;
    let mut t = 0.0;
    let eps = 1e-9 * exp.dt;
    loop {
        while next_obs < exp.times.len() && exp.times[next_obs] * beta <= t + eps {
            theta_hat.push(system.theta_hat());
            next_obs += 1;
        }
        if t >= t_end - eps {
            break;
        }
        let target = next_qv.min(t_end);
        let target = if next_obs < exp.times.len() {
            target.min(exp.times[next_obs] * beta)
        } else {
            target
        };
        let h = exp.dt.min(target - t);
        system.step(&op, h, rng)?;
        t += h;
        if t >= next_qv - eps || t >= t_end - eps {
            let now = system.theta_hat();
            let span = t - (next_qv - exp.qv_interval);
            qv += (now - last) * (now - last);
            het += last * (1.0 - last) * span / beta;
            last = now;
            next_qv = t + exp.qv_interval;
        }
    }
    Ok(FssPath {
        theta_hat,
        quadratic_variation: qv,
        heterozygosity_time: het,
        clip_events: system.clips(),
    })
}

/// Ratio estimate with a linearized standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RatioEstimate {
    pub value: f64,
    pub std_err: f64,
}

impl RatioEstimate {
    /// `Σ a_i / Σ b_i`.
    pub fn pooled(a: &[f64], b: &[f64]) -> Self {
        let n = a.len();
        let sb: f64 = b.iter().sum();
        let value = a.iter().sum::<f64>() / sb;
        if n < 2 {
            return Self {
                value,
                std_err: 0.0,
            };
        }
        let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - value * y).powi(2)).sum();
        let std_err = (ss / (n * (n - 1)) as f64).sqrt() * n as f64 / sb;
        Self { value, std_err }
    }

    /// `self / other` with independent errors.
    pub fn ratio(&self, other: &Self) -> Self {
        let value = self.value / other.value;
        let rel =
            ((self.std_err / self.value).powi(2) + (other.std_err / other.value).powi(2)).sqrt();
        Self {
            value,
            std_err: value.abs() * rel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LadderEntry {
    pub n: u32,
    pub sites: usize,
    pub replicas: usize,
    /// `E[θ̂(1−θ̂)]` on the grid.
    pub moment: Vec<f64>,
    pub moment_std_err: Vec<f64>,
    /// Per-time z-scores against the reference (`None` at `t = 0`).
    pub z: Vec<Option<f64>>,
    pub max_abs_z: f64,
    /// `−slope` of `ln E[θ̂(1−θ̂)]` against `t`.
    pub decay_rate: f64,
    pub decay_std_err: f64,
    /// Realized volatility `Σ(Δθ̂)² / ∫ θ̂(1−θ̂) dt`.
    pub realized_volatility: RatioEstimate,
    /// z-score of `θ̂(t_max) − θ̂(0)`.
    pub drift_z: f64,
    pub clip_events: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrendCheck {
    pub steps: usize,
    pub nonincreasing_steps: usize,
    pub passed: bool,
    pub rule: String,
}

/// Maximum `|z|` must not increase along at least `⌊2s/3⌋` of the `s`
/// ladder steps, and must end below its starting value.
pub fn trend_check(max_abs_z: &[f64]) -> Option<TrendCheck> {
    if max_abs_z.len() < 2 {
        return None;
    }
    let steps = max_abs_z.len() - 1;
    let nonincreasing_steps = max_abs_z.windows(2).filter(|w| w[1] <= w[0]).count();
    let needed = 2 * steps / 3;
    let passed = nonincreasing_steps >= needed && max_abs_z[steps] < max_abs_z[0];
    Some(TrendCheck {
        steps,
        nonincreasing_steps,
        passed,
        rule: alloc::format!("nonincreasing in >= {needed} of {steps} steps and last < first"),
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FssReport {
    pub reference: ThetaReference,
    pub times: Vec<f64>,
    pub reference_curve: Vec<f64>,
    pub entries: Vec<LadderEntry>,
    pub trend: Option<TrendCheck>,
}

/// Summarizes the replicas of one rung.
pub fn summarize_rung(
    exp: &FssExperiment,
    n: u32,
    reference: &ThetaReference,
    paths: &[FssPath],
) -> LadderEntry {
    let k = exp.times.len();
    let mut stats = vec![RunningStats::new(); k];
    let mut drift = RunningStats::new();
    for p in paths {
        for (s, th) in stats.iter_mut().zip(&p.theta_hat) {
            s.push(th * (1.0 - th));
        }
        if let (Some(a), Some(b)) = (p.theta_hat.first(), p.theta_hat.last()) {
            drift.push(b - a);
        }
    }
    let moment: Vec<f64> = stats.iter().map(|s| s.mean()).collect();
    let moment_std_err: Vec<f64> = stats.iter().map(|s| s.std_err()).collect();
    let z: Vec<Option<f64>> = exp
        .times
        .iter()
        .zip(moment.iter().zip(&moment_std_err))
        .map(|(&t, (&m, &se))| (t > 0.0 && se > 0.0).then(|| (m - reference.moment(t)) / se))
        .collect();
    let max_abs_z = z.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let (xs, ys): (Vec<f64>, Vec<f64>) = exp
        .times
        .iter()
        .zip(&moment)
        .filter(|(_, m)| **m > 0.0)
        .map(|(t, m)| (*t, m.ln()))
        .unzip();
    let (decay_rate, decay_std_err) = if xs.len() >= 2 {
        let (_, slope, se) = ols(&xs, &ys);
        (-slope, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    let qv: Vec<f64> = paths.iter().map(|p| p.quadratic_variation).collect();
    let het: Vec<f64> = paths.iter().map(|p| p.heterozygosity_time).collect();
    let realized_volatility = if paths.is_empty() {
        RatioEstimate {
            value: f64::NAN,
            std_err: f64::NAN,
        }
    } else {
        RatioEstimate::pooled(&qv, &het)
    };
    let drift_z = if drift.std_err() > 0.0 {
        drift.mean() / drift.std_err()
    } else {
        0.0
    };
    LadderEntry {
        n,
        sites: exp.sites(n),
        replicas: paths.len(),
        moment,
        moment_std_err,
        z,
        max_abs_z,
        decay_rate,
        decay_std_err,
        realized_volatility,
        drift_z,
        clip_events: paths.iter().map(|p| p.clip_events).sum(),
    }
}

/// Assembles the report from per-rung replica paths (in ladder order).
pub fn assemble_report(
    exp: &FssExperiment,
    reference: ThetaReference,
    rungs: &[Vec<FssPath>],
) -> FssReport {
    let entries: Vec<LadderEntry> = exp
        .ladder
        .iter()
        .zip(rungs)
        .map(|(&n, paths)| summarize_rung(exp, n, &reference, paths))
        .collect();
    let zs: Vec<f64> = entries.iter().map(|e| e.max_abs_z).collect();
    FssReport {
        reference_curve: exp.times.iter().map(|&t| reference.moment(t)).collect(),
        times: exp.times.clone(),
        trend: trend_check(&zs),
        reference,
        entries,
    }
}

/// Runs the whole ladder sequentially; `rng_for(rung, replica)` supplies
/// independent streams, `reference_rng` the Green estimate.
pub fn run_fss<R: Rng, F: FnMut(usize, usize) -> R>(
    exp: &FssExperiment,
    reference_rng: &mut R,
    mut rng_for: F,
) -> Result<FssReport> {
    exp.validate()?;
    exp.check_budget()?;
    let reference = theta_reference(exp, reference_rng)?;
    let mut rungs = Vec::with_capacity(exp.ladder.len());
    for (i, &n) in exp.ladder.iter().enumerate() {
        let paths = (0..exp.replicas)
            .map(|r| fss_replica(exp, n, &mut rng_for(i, r)))
            .collect::<Result<Vec<_>>>()?;
        rungs.push(paths);
    }
    Ok(assemble_report(exp, reference, &rungs))
}

/// Public budget guard for callers that schedule replicas themselves.
pub fn check_fss_budget(exp: &FssExperiment) -> Result<()> {
    exp.validate()?;
    exp.check_budget()
}

/// Macroscopic genealogical distances `r/|G_n|`.
pub fn genealogical_rescale(sample: &GenealogySample, n_sites: usize) -> Result<GenealogySample> {
    if n_sites == 0 {
        return param("site count must be positive");
    }
    Ok(sample.scaled(n_sites as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genealogy::Mark;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dstar_examples() {
        assert_eq!(compute_dstar(0.0, 3.0, 0.1).unwrap().value, 0.0);
        assert_eq!(compute_dstar(2.0, 0.0, 0.0).unwrap().value, 2.0);
        let d = compute_dstar(1.0, 1.0, 0.2).unwrap();
        assert_eq!(d.value, 0.5);
        assert!((d.std_err - 0.05).abs() < 1e-15);
        assert!(compute_dstar(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(compute_kappa(&[0.0, 0.0], 0.0, 1e-6).unwrap().value, 1.0);
        assert_eq!(compute_kappa(&[1.0], 0.0, 1e-6).unwrap().value, 0.25);
        assert!((compute_kappa(&[1.0, 1.0], 0.0, 1e-6).unwrap().value - 1.0 / 9.0).abs() < 1e-16);
        assert!(compute_kappa(&[1.0], 0.5, 1e-6).unwrap().divergent);
    }

    #[test]
    fn seedbank_factor_single_colour() {
        // c_eff = c(1 + eK/(c+e)); factor = 2c_eff/(2c_eff + d).
        let (c, d, e, k) = (4.0, 1.0, 1.0, 1.0);
        let ce = c * (1.0 + e * k / (c + e));
        let want = 2.0 * ce / (2.0 * ce + d);
        let got = seedbank_heterozygosity_factor(c, d, &[e], &[k]).unwrap();
        assert!((got - want).abs() < 1e-14);
        let none = seedbank_heterozygosity_factor(1.0, 1.0, &[], &[]).unwrap();
        assert!((none - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trend_rule() {
        assert!(trend_check(&[5.0, 2.0, 1.0]).unwrap().passed);
        assert!(trend_check(&[5.0, 1.0, 2.0]).unwrap().passed);
        assert!(!trend_check(&[1.0, 3.0, 2.0]).unwrap().passed);
        assert!(trend_check(&[1.0]).is_none());
    }

    fn small_experiment() -> FssExperiment {
        FssExperiment {
            model: FssModel::FisherWright {
                geometry: FssGeometry::MeanField,
                c: 1.0,
                d: 1.0,
            },
            ladder: vec![5, 10],
            theta0: 0.5,
            initial: InitialLaw::Constant,
            times: vec![0.0, 0.5, 1.0],
            replicas: 20,
            dt: 0.05,
            scheme: Scheme::BoundaryExact,
            qv_interval: 1.0,
            green: GreenSettings {
                replicas: 10,
                horizon: None,
            },
            max_site_steps: None,
        }
    }

    #[test]
    fn initial_moment_is_exact() {
        let exp = small_experiment();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = run_fss(&exp, &mut rng, |i, r| {
            ChaCha8Rng::seed_from_u64((i * 100 + r) as u64)
        })
        .unwrap();
        for e in &rep.entries {
            assert_eq!(e.moment[0], 0.25);
            assert!(e.z[0].is_none());
            assert_eq!(e.replicas, 20);
        }
        assert_eq!(rep.reference.rate, 2.0 / 3.0);
    }

    #[test]
    fn budget_guard() {
        let exp = FssExperiment {
            max_site_steps: Some(10.0),
            ..small_experiment()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = run_fss(&exp, &mut rng, |_, _| ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Budget { .. })));
    }

    #[test]
    fn seedbank_theta_hat_is_conserved_without_noise() {
        let exp = FssExperiment {
            model: FssModel::Seedbank {
                c: 1.0,
                d: 0.0,
                exchange: vec![1.0],
                sizes: vec![1.0],
            },
            initial: InitialLaw::Bernoulli,
            scheme: Scheme::Euler,
            ..small_experiment()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let path = fss_replica(&exp, 10, &mut rng).unwrap();
        for th in &path.theta_hat {
            assert!((th - path.theta_hat[0]).abs() < 1e-12);
        }
        assert!(path.quadratic_variation < 1e-20);
    }

    #[test]
    fn rescale_examples() {
        let marks = vec![Mark { site: 0, ty: 0 }; 2];
        let s = GenealogySample::new(3.0, vec![0.0, 6.0, 6.0, 0.0], vec![false; 4], marks).unwrap();
        assert_eq!(genealogical_rescale(&s, 1).unwrap(), s);
        let r = genealogical_rescale(&s, 100).unwrap();
        assert_eq!(r.raw(0, 1), 6.0 / 100.0);
        assert!(genealogical_rescale(&s, 0).is_err());
    }
}

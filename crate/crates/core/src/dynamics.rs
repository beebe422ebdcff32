//! Euler–Maruyama integration of interacting diffusions.
//!
//! Noise convention: the resampling coefficient `d` multiplies the
//! covariance, `Cov(dx_ξ) = d (diag x_ξ − x_ξ x_ξᵀ) dt`, so for two types
//! `dx = … + √(d x(1−x)) dw`. This is the diffusion limit of a Moran model in
//! which each unordered pair resamples at rate `d`.
//!
//! After each step every component is clipped to `[0,1]` and each site is
//! renormalized onto the simplex; the number of sites needing a clip is
//! counted.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson, StandardNormal};

use crate::cannings::{LambdaMeasure, StarSampler};
use crate::error::{param, Error, Result};
use crate::geometry::{torus_shift, GeographySpec};
use crate::stats::BatchMeans;

/// Linear migration operator `x ↦ Σ_{ξ'} a(ξ,ξ')(x_{ξ'} − x_ξ)` on a
/// geography, applied componentwise.
#[derive(Debug, Clone, PartialEq)]
pub enum MigrationOperator {
    Hier {
        branching: usize,
        level_rates: Vec<f64>,
    },
    Torus {
        rate: f64,
        probs: Vec<f64>,
        neighbours: Vec<Vec<usize>>,
    },
    MeanField {
        sites: usize,
        rate: f64,
    },
}

impl MigrationOperator {
    pub fn new(geo: &GeographySpec) -> Self {
        match geo {
            GeographySpec::Hier { branching, .. } => Self::Hier {
                branching: *branching as usize,
                level_rates: geo.level_rates(),
            },
            GeographySpec::Torus {
                dim,
                half_width,
                steps,
                rate,
            } => {
                let sites = geo.site_count();
                Self::Torus {
                    rate: *rate,
                    probs: steps.iter().map(|s| s.prob).collect(),
                    neighbours: steps
                        .iter()
                        .map(|s| {
                            (0..sites)
                                .map(|i| torus_shift(i, &s.offset, *dim, *half_width))
                                .collect()
                        })
                        .collect(),
                }
            }
            GeographySpec::MeanField { sites, rate } => Self::MeanField {
                sites: *sites as usize,
                rate: *rate,
            },
        }
    }

    pub fn site_count(&self) -> usize {
        match self {
            Self::Hier {
                branching,
                level_rates,
            } => branching.pow(level_rates.len() as u32),
            Self::Torus { neighbours, .. } => neighbours[0].len(),
            Self::MeanField { sites, .. } => *sites,
        }
    }

    /// `Σ_{ξ'} a(ξ,ξ')` counting self-jumps, so that the drift reads
    /// `rate · (m_ξ − x_ξ)` with `m_ξ` a convex combination of sites.
    pub fn total_rate(&self) -> f64 {
        match self {
            Self::Hier { level_rates, .. } => level_rates.iter().sum(),
            Self::Torus { rate, probs, .. } => rate * probs.iter().sum::<f64>(),
            Self::MeanField { rate, .. } => *rate,
        }
    }

    /// Writes `scale · Σ a(ξ,ξ')(x_{ξ'} − x_ξ)` into `out`; `x` and `out`
    /// hold `k` components per site.
    pub fn apply(&self, x: &[f64], k: usize, scale: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            Self::Hier {
                branching,
                level_rates,
            } => {
                let mut averages = x.to_vec();
                let mut size = 1;
                for &rate in level_rates {
                    let coarse: Vec<f64> = averages
                        .chunks(branching * k)
                        .flat_map(|block| {
                            (0..k).map(move |u| {
                                block.iter().skip(u).step_by(k).sum::<f64>() / *branching as f64
                            })
                        })
                        .collect();
                    size *= branching;
                    if rate != 0.0 {
                        for (i, o) in out.chunks_mut(k).enumerate() {
                            let avg = &coarse[(i / size) * k..(i / size + 1) * k];
                            for u in 0..k {
                                o[u] += scale * rate * (avg[u] - x[i * k + u]);
                            }
                        }
                    }
                    averages = coarse;
                }
            }
            Self::Torus {
                rate,
                probs,
                neighbours,
            } => {
                for (p, nb) in probs.iter().zip(neighbours) {
                    let w = scale * rate * p;
                    for (i, &j) in nb.iter().enumerate() {
                        for u in 0..k {
                            out[i * k + u] += w * (x[j * k + u] - x[i * k + u]);
                        }
                    }
                }
            }
            Self::MeanField { sites, rate } => {
                let mut mean = vec![0.0; k];
                for site in x.chunks(k) {
                    for u in 0..k {
                        mean[u] += site[u] / *sites as f64;
                    }
                }
                for (i, o) in out.chunks_mut(k).enumerate() {
                    for u in 0..k {
                        o[u] = scale * rate * (mean[u] - x[i * k + u]);
                    }
                }
            }
        }
    }
}

/// Parameters of the multi-type system. `mutation_kernel` rows are the
/// transition laws `M(u,·)`; `fitness` is `ψ`.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DynamicsParams {
    pub resampling: f64,
    pub migration: f64,
    pub mutation: f64,
    pub mutation_kernel: Vec<Vec<f64>>,
    pub selection: f64,
    pub fitness: Vec<f64>,
    pub dt: f64,
    pub scheme: Scheme,
    /// Two-type diffusion function `g`; `None` means `x(1−x)`.
    #[cfg_attr(feature = "serde", serde(skip))]
    pub diffusion: Option<fn(f64) -> f64>,
}

impl DynamicsParams {
    pub fn neutral(resampling: f64, migration: f64, dt: f64) -> Self {
        Self {
            resampling,
            migration,
            mutation: 0.0,
            mutation_kernel: Vec::new(),
            selection: 0.0,
            fitness: Vec::new(),
            dt,
            scheme: Scheme::Euler,
            diffusion: None,
        }
    }

    pub fn validate(&self, types: usize) -> Result<()> {
        for (name, v) in [
            ("resampling rate d", self.resampling),
            ("migration rate c", self.migration),
            ("mutation rate m", self.mutation),
            ("selection rate s", self.selection),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return param(alloc::format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return param("time step must be positive");
        }
        if self.mutation > 0.0 {
            if self.mutation_kernel.len() != types
                || self.mutation_kernel.iter().any(|r| r.len() != types)
            {
                return param("mutation kernel must be K×K");
            }
            for row in &self.mutation_kernel {
                if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return param("mutation kernel rows must be probability vectors");
                }
            }
        }
        if self.selection > 0.0 {
            if self.fitness.len() != types {
                return param("fitness vector must have K entries");
            }
            let lo = self.fitness.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = self
                .fitness
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            if lo != 0.0 || hi != 1.0 {
                return param("fitness must satisfy inf ψ = 0 and sup ψ = 1");
            }
        }
        if self.diffusion.is_some() && types != 2 {
            return param("a custom diffusion function needs two types");
        }
        if self.scheme == Scheme::BoundaryExact
            && (types != 2
                || self.mutation > 0.0
                || self.selection > 0.0
                || self.diffusion.is_some())
        {
            return param("the boundary-exact scheme needs two neutral Fisher–Wright types");
        }
        Ok(())
    }
}

/// Type frequencies `x_ξ ∈ Δ_K` for every site, stored site-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TypeSimplexState {
    pub types: usize,
    pub x: Vec<f64>,
    pub clip_events: u64,
    pub steps: u64,
}

impl TypeSimplexState {
    pub fn new(types: usize, x: Vec<f64>) -> Result<Self> {
        if types < 2 || x.is_empty() || !x.len().is_multiple_of(types) {
            return param("state needs K >= 2 and K components per site");
        }
        for site in x.chunks(types) {
            if site.iter().any(|&v| !(0.0..=1.0).contains(&v))
                || (site.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return param("every site must lie on the simplex");
            }
        }
        Ok(Self {
            types,
            x,
            clip_events: 0,
            steps: 0,
        })
    }

    /// Two types with the given frequencies of type 0.
    pub fn two_type(x0: Vec<f64>) -> Self {
        let x = x0.iter().flat_map(|&v| [v, 1.0 - v]).collect();
        Self {
            types: 2,
            x,
            clip_events: 0,
            steps: 0,
        }
    }

    pub fn sites(&self) -> usize {
        self.x.len() / self.types
    }

    pub fn site(&self, i: usize) -> &[f64] {
        &self.x[i * self.types..(i + 1) * self.types]
    }

    pub fn type0_frequencies(&self) -> Vec<f64> {
        self.x.iter().step_by(self.types).copied().collect()
    }

    /// Spatial mean of each type frequency.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.types];
        for site in self.x.chunks(self.types) {
            for (a, b) in m.iter_mut().zip(site) {
                *a += b;
            }
        }
        let n = self.sites() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

/// Number of standard normals consumed per site and step.
pub fn normals_per_site(types: usize) -> usize {
    if types == 2 {
        1
    } else {
        types
    }
}

/// Clips to `[0,1]` and renormalizes; returns whether a clip happened.
fn project(x: &mut [f64]) -> bool {
    let mut clipped = false;
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            clipped = true;
        } else if *v > 1.0 {
            *v = 1.0;
            clipped = true;
        }
    }
    let s: f64 = x.iter().sum();
    if s > 0.0 {
        x.iter_mut().for_each(|v| *v /= s);
    }
    clipped
}

/// Adds mutation and selection drift of one site to `drift`.
fn local_drift(x: &[f64], p: &DynamicsParams, drift: &mut [f64]) {
    let k = x.len();
    if p.mutation > 0.0 {
        for v in 0..k {
            let inflow: f64 = (0..k).map(|u| p.mutation_kernel[u][v] * x[u]).sum();
            drift[v] += p.mutation * (inflow - x[v]);
        }
    }
    if p.selection > 0.0 {
        let mean: f64 = x.iter().zip(&p.fitness).map(|(a, b)| a * b).sum();
        for u in 0..k {
            drift[u] += p.selection * x[u] * (p.fitness[u] - mean);
        }
    }
}

/// One Euler–Maruyama update of a single site given its drift and normals.
/// Returns whether a clip happened.
fn site_update(
    x: &mut [f64],
    drift: &[f64],
    d: f64,
    g: Option<fn(f64) -> f64>,
    dt: f64,
    z: &[f64],
) -> bool {
    let k = x.len();
    if k == 2 {
        let var = match g {
            Some(g) => g(x[0]),
            None => x[0] * x[1],
        };
        let noise = (d * dt * var.max(0.0)).sqrt() * z[0];
        let x0 = x[0] + drift[0] * dt + noise;
        x[0] = x0;
        x[1] = 1.0 - x0;
    } else {
        // B = diag(√x) − x √xᵀ satisfies B Bᵀ = diag(x) − x xᵀ on the simplex.
        let scale = (d * dt).sqrt();
        let sz: f64 = x.iter().zip(z).map(|(a, b)| a.max(0.0).sqrt() * b).sum();
        for u in 0..k {
            let noise = x[u].max(0.0).sqrt() * z[u] - x[u] * sz;
            x[u] += drift[u] * dt + scale * noise;
        }
    }
    project(x)
}

/// One step driven by the given standard normals
/// (`normals_per_site(K)` per site, site-major).
pub fn step_interacting_fv_with_noise(
    state: &mut TypeSimplexState,
    op: &MigrationOperator,
    params: &DynamicsParams,
    normals: &[f64],
) -> Result<()> {
    let k = state.types;
    let sites = state.sites();
    if op.site_count() != sites {
        return param("migration operator and state disagree on the site count");
    }
    let per = normals_per_site(k);
    if normals.len() != per * sites {
        return param("wrong number of normals");
    }
    let mut drift = vec![0.0; state.x.len()];
    if params.migration > 0.0 {
        op.apply(&state.x, k, params.migration, &mut drift);
    }
    for i in 0..sites {
        let x = &mut state.x[i * k..(i + 1) * k];
        let dr = &mut drift[i * k..(i + 1) * k];
        local_drift(x, params, dr);
        let clipped = site_update(
            x,
            dr,
            params.resampling,
            params.diffusion,
            params.dt,
            &normals[i * per..(i + 1) * per],
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                site: i,
                step: state.steps,
            });
        }
        state.clip_events += u64::from(clipped);
    }
    state.steps += 1;
    Ok(())
}

/// One step of the interacting multi-type system. With
/// [`Scheme::BoundaryExact`] the migration drift `c q (m_ξ − x_ξ)` is frozen
/// over the step and every site takes the exact single-site transition, so
/// the conditional mean of the migration-weighted total is preserved.
pub fn step_interacting_fv<R: Rng + ?Sized>(
    state: &mut TypeSimplexState,
    op: &MigrationOperator,
    params: &DynamicsParams,
    rng: &mut R,
) -> Result<()> {
    if params.scheme == Scheme::BoundaryExact {
        return step_boundary_exact(state, op, params, rng);
    }
    let n = normals_per_site(state.types) * state.sites();
    let normals: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    step_interacting_fv_with_noise(state, op, params, &normals)
}

fn step_boundary_exact<R: Rng + ?Sized>(
    state: &mut TypeSimplexState,
    op: &MigrationOperator,
    params: &DynamicsParams,
    rng: &mut R,
) -> Result<()> {
    params.validate(state.types)?;
    let sites = state.sites();
    if op.site_count() != sites {
        return param("migration operator and state disagree on the site count");
    }
    let mut drift = vec![0.0; state.x.len()];
    let rate = params.migration * op.total_rate();
    if rate > 0.0 {
        op.apply(&state.x, 2, params.migration, &mut drift);
    }
    for i in 0..sites {
        let x = state.x[2 * i];
        let target = if rate > 0.0 {
            (x + drift[2 * i] / rate).clamp(0.0, 1.0)
        } else {
            x
        };
        let (x_new, clipped) =
            boundary_exact_transition(x, target, rate, params.resampling, params.dt, rng);
        if !x_new.is_finite() {
            return Err(Error::NumericalFailure {
                site: i,
                step: state.steps,
            });
        }
        state.x[2 * i] = x_new;
        state.x[2 * i + 1] = 1.0 - x_new;
        state.clip_events += u64::from(clipped);
    }
    state.steps += 1;
    Ok(())
}

/// Coloured seedbank parameters: active noise `b`, migration multiplier `c`,
/// exchange rates `e_m` and relative sizes `K_m`.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedbankParams {
    pub resampling: f64,
    pub migration: f64,
    pub exchange: Vec<f64>,
    pub sizes: Vec<f64>,
    pub dt: f64,
    /// `Σ_{m > M_max} K_m`, reported only.
    pub residual_size: f64,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub diffusion: Option<fn(f64) -> f64>,
}

impl SeedbankParams {
    pub fn validate(&self) -> Result<()> {
        if self.exchange.len() != self.sizes.len() {
            return param("seedbank: e and K must have the same length");
        }
        if self
            .exchange
            .iter()
            .chain(&self.sizes)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return param("seedbank: e_m and K_m must be finite and >= 0");
        }
        if !(self.resampling.is_finite()
            && self.resampling >= 0.0
            && self.migration.is_finite()
            && self.migration >= 0.0)
        {
            return param("seedbank: b and c must be finite and >= 0");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return param("time step must be positive");
        }
        Ok(())
    }

    /// `χ = Σ e_m K_m` at the truncation.
    pub fn chi(&self) -> f64 {
        self.exchange
            .iter()
            .zip(&self.sizes)
            .map(|(e, k)| e * k)
            .sum()
    }

    pub fn total_size(&self) -> f64 {
        self.sizes.iter().sum()
    }
}

/// Active frequencies `x_ξ` and dormant frequencies `y_ξ^m` (site-major).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedbankState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub colours: usize,
    pub clip_events: u64,
    pub steps: u64,
}

impl SeedbankState {
    pub fn new(x: Vec<f64>, y: Vec<f64>, colours: usize) -> Result<Self> {
        if y.len() != x.len() * colours {
            return param("seedbank state: y needs one entry per site and colour");
        }
        if x.iter().chain(&y).any(|v| !(0.0..=1.0).contains(v)) {
            return param("seedbank state components must lie in [0,1]");
        }
        Ok(Self {
            x,
            y,
            colours,
            clip_events: 0,
            steps: 0,
        })
    }

    /// Every component equal to `v`.
    pub fn constant(sites: usize, colours: usize, v: f64) -> Self {
        Self {
            x: vec![v; sites],
            y: vec![v; sites * colours],
            colours,
            clip_events: 0,
            steps: 0,
        }
    }

    /// Per-site conserved-weight total `x + Σ K_m y^m`.
    pub fn weighted(&self, sizes: &[f64]) -> Vec<f64> {
        self.x
            .iter()
            .zip(self.y.chunks(self.colours.max(1)))
            .map(|(x, ys)| x + ys.iter().zip(sizes).map(|(y, k)| y * k).sum::<f64>())
            .collect()
    }
}

/// One step of the seedbank system driven by one normal per site. Dormant
/// components relax exactly towards the active value frozen at the start of
/// the step, and the active value moves by the opposite weighted amount, so
/// `x + Σ K_m y^m` changes only through migration and noise.
pub fn step_seedbank_with_noise(
    state: &mut SeedbankState,
    op: &MigrationOperator,
    params: &SeedbankParams,
    normals: &[f64],
) -> Result<()> {
    let sites = state.x.len();
    let mc = state.colours;
    if op.site_count() != sites || normals.len() != sites || mc != params.sizes.len() {
        return param("seedbank step: inconsistent dimensions");
    }
    let mut drift = vec![0.0; sites];
    if params.migration > 0.0 {
        op.apply(&state.x, 1, params.migration, &mut drift);
    }
    let relax: Vec<f64> = params
        .exchange
        .iter()
        .map(|e| -(-e * params.dt).exp_m1())
        .collect();
    for i in 0..sites {
        let x = state.x[i];
        let mut exchange = 0.0;
        let mut clipped = false;
        for (m, r) in relax.iter().enumerate().take(mc) {
            let y = &mut state.y[i * mc + m];
            let y_new = *y + (x - *y) * r;
            exchange += params.sizes[m] * (y_new - *y);
            *y = y_new.clamp(0.0, 1.0);
            clipped |= y_new != *y;
        }
        let var = match params.diffusion {
            Some(g) => g(x),
            None => x * (1.0 - x),
        };
        let noise = (params.resampling * params.dt * var.max(0.0)).sqrt() * normals[i];
        let x_new = x + drift[i] * params.dt - exchange + noise;
        if !x_new.is_finite() {
            return Err(Error::NumericalFailure {
                site: i,
                step: state.steps,
            });
        }
        let c = x_new.clamp(0.0, 1.0);
        clipped |= c != x_new;
        state.x[i] = c;
        state.clip_events += u64::from(clipped);
    }
    state.steps += 1;
    Ok(())
}

pub fn step_seedbank<R: Rng + ?Sized>(
    state: &mut SeedbankState,
    op: &MigrationOperator,
    params: &SeedbankParams,
    rng: &mut R,
) -> Result<()> {
    let normals: Vec<f64> = (0..state.x.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    step_seedbank_with_noise(state, op, params, &normals)
}

/// Exact transition over `dt` of `dx = c(θ − x)dt + √(d x(1−x)) dw` with
/// the factor `1 − min(x, 1−x)` frozen (see [`Scheme::BoundaryExact`]).
/// The conditional mean `θ + (x − θ)e^{−c dt}` is exact. Returns the new
/// value and whether it had to be clipped.
pub fn boundary_exact_transition<R: Rng + ?Sized>(
    x: f64,
    theta: f64,
    c: f64,
    d: f64,
    dt: f64,
    rng: &mut R,
) -> (f64, bool) {
    let lower = x < 0.5;
    let (z, th) = if lower {
        (x, theta)
    } else {
        (1.0 - x, 1.0 - theta)
    };
    let vol = d * (1.0 - z);
    let z_new = if vol <= 1e-300 {
        th + (z - th) * (-c * dt).exp()
    } else {
        // z_t = s · χ'^2_δ(λ) with χ'^2_δ(λ) = χ^2_{δ + 2N}, N ~ Poisson(λ/2).
        let s = if c > 0.0 {
            vol * -(-c * dt).exp_m1() / (4.0 * c)
        } else {
            vol * dt / 4.0
        };
        let delta = 4.0 * c * th / vol;
        let lambda = z * (-c * dt).exp() / s;
        let n = if lambda > 0.0 {
            Poisson::new(lambda / 2.0).expect("finite mean").sample(rng)
        } else {
            0.0
        };
        let shape = delta / 2.0 + n;
        let g = if shape > 0.0 {
            Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
        } else {
            0.0
        };
        2.0 * s * g
    };
    let clipped = z_new.clamp(0.0, 1.0);
    let out = if lower { clipped } else { 1.0 - clipped };
    (out, clipped != z_new)
}

/// Time-stepping scheme of the McKean–Vlasov process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Scheme {
    /// Euler–Maruyama with clipping; any number of types, all drifts.
    #[default]
    Euler,
    /// Two neutral types only. Each step draws the exact transition of the
    /// Cox–Ingersoll–Ross process `dz = c(θ_z − z)dt + √(d(1−z_0) z) dw`
    /// for `z = min(x, 1−x)` with the coefficient `1 − z` frozen at the start
    /// of the step. Near either boundary this reproduces the
    /// `z^{2cθ_z/d − 1}` behaviour of the stationary law, which clipping
    /// cannot.
    BoundaryExact,
}

/// Single-site McKean–Vlasov process `dx = c(θ − x)dt + …` with optional
/// Λ-jumps `x ↦ (1−r)x + r e_u`, `u ~ x`, at rate `Λ*([ε,1])`. The Kingman
/// mass of `Λ` adds to the resampling coefficient.
#[derive(Debug, Clone)]
pub struct McKeanVlasovParams {
    pub immigration: f64,
    pub local: DynamicsParams,
    pub lambda: Option<(LambdaMeasure, f64)>,
    pub scheme: Scheme,
}

impl McKeanVlasovParams {
    pub fn neutral(c: f64, d: f64, dt: f64) -> Self {
        Self {
            immigration: c,
            local: DynamicsParams::neutral(d, 0.0, dt),
            lambda: None,
            scheme: Scheme::Euler,
        }
    }
}

/// Stepper for the McKean–Vlasov process.
#[derive(Debug, Clone)]
pub struct McKeanVlasov {
    params: McKeanVlasovParams,
    theta: Vec<f64>,
    x: Vec<f64>,
    d_eff: f64,
    jumps: Option<StarSampler>,
    next_jump: f64,
    time: f64,
    pub clip_events: u64,
    steps: u64,
}

impl McKeanVlasov {
    pub fn new(params: McKeanVlasovParams, theta: &[f64], x0: &[f64]) -> Result<Self> {
        let k = theta.len();
        params.local.validate(k)?;
        if !(params.immigration.is_finite() && params.immigration >= 0.0) {
            return param("immigration rate c must be finite and >= 0");
        }
        TypeSimplexState::new(k, theta.to_vec())?;
        TypeSimplexState::new(k, x0.to_vec())?;
        if params.scheme == Scheme::BoundaryExact
            && (k != 2
                || params.local.mutation > 0.0
                || params.local.selection > 0.0
                || params.local.diffusion.is_some())
        {
            return param("the boundary-exact scheme needs two neutral Fisher–Wright types");
        }
        let mut d_eff = params.local.resampling;
        let jumps = match &params.lambda {
            Some((lam, eps)) => {
                d_eff += lam.kingman;
                let s = lam.star_sampler(*eps)?;
                (s.rate() > 0.0).then_some(s)
            }
            None => None,
        };
        Ok(Self {
            params,
            theta: theta.to_vec(),
            x: x0.to_vec(),
            d_eff,
            jumps,
            next_jump: f64::NAN,
            time: 0.0,
            clip_events: 0,
            steps: 0,
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> Result<()> {
        match self.params.scheme {
            Scheme::Euler => self.euler_step(dt, rng)?,
            Scheme::BoundaryExact => {
                let x = self.boundary_exact_step(dt, rng);
                if !x.is_finite() {
                    return Err(Error::NumericalFailure {
                        site: 0,
                        step: self.steps,
                    });
                }
                self.x[0] = x;
                self.x[1] = 1.0 - x;
            }
        }
        self.time += dt;
        self.steps += 1;
        self.apply_jumps(rng);
        Ok(())
    }

    fn boundary_exact_step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> f64 {
        let (x, clipped) = boundary_exact_transition(
            self.x[0],
            self.theta[0],
            self.params.immigration,
            self.d_eff,
            dt,
            rng,
        );
        self.clip_events += u64::from(clipped);
        x
    }

    fn euler_step<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> Result<()> {
        let k = self.x.len();
        let mut drift: Vec<f64> = self
            .theta
            .iter()
            .zip(&self.x)
            .map(|(t, x)| self.params.immigration * (t - x))
            .collect();
        local_drift(&self.x, &self.params.local, &mut drift);
        let per = normals_per_site(k);
        let mut z = [0.0f64; 8];
        let zs: Vec<f64>;
        let z: &[f64] = if per <= 8 {
            for v in z.iter_mut().take(per) {
                *v = rng.sample(StandardNormal);
            }
            &z[..per]
        } else {
            zs = (0..per).map(|_| rng.sample(StandardNormal)).collect();
            &zs
        };
        let clipped = site_update(
            &mut self.x,
            &drift,
            self.d_eff,
            self.params.local.diffusion,
            dt,
            z,
        );
        self.clip_events += u64::from(clipped);
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                site: 0,
                step: self.steps,
            });
        }
        Ok(())
    }

    fn apply_jumps<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.x.len();
        if let Some(s) = &self.jumps {
            if self.next_jump.is_nan() {
                self.next_jump = Exp::new(s.rate()).expect("positive rate").sample(rng);
            }
            while self.next_jump <= self.time {
                let r = s.sample_r(rng);
                let mut u = rng.random::<f64>();
                let mut ty = k - 1;
                for (i, &v) in self.x.iter().enumerate() {
                    if u < v {
                        ty = i;
                        break;
                    }
                    u -= v;
                }
                for (i, v) in self.x.iter_mut().enumerate() {
                    *v = (1.0 - r) * *v + if i == ty { r } else { 0.0 };
                }
                self.next_jump += Exp::new(s.rate()).expect("positive rate").sample(rng);
            }
        }
    }

    /// Advances to time `until` with steps of at most `dt`.
    pub fn advance<R: Rng + ?Sized>(&mut self, until: f64, rng: &mut R) -> Result<()> {
        let dt = self.params.local.dt;
        while self.time < until - 1e-12 * until.max(1.0) {
            let h = dt.min(until - self.time);
            self.step(h, rng)?;
        }
        Ok(())
    }
}

/// Trajectory of the McKean–Vlasov process at the requested (sorted) times.
pub fn run_mckean_vlasov<R: Rng + ?Sized>(
    params: &McKeanVlasovParams,
    theta: &[f64],
    x0: &[f64],
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return param("times must be nonnegative and sorted");
    }
    let mut mv = McKeanVlasov::new(params.clone(), theta, x0)?;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        mv.advance(t, rng)?;
        out.push(mv.state().to_vec());
    }
    Ok(out)
}

/// Settings for [`equilibrium_gmap`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmapSettings {
    pub burn_in: f64,
    pub horizon: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GmapEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub burn_in: f64,
    pub horizon: f64,
    pub samples: u64,
    /// First-half against second-half batch-mean z-score.
    pub half_split_z: f64,
}

/// Time-average estimate of `E_{ν_θ}[g(x)]` for the two-type McKean–Vlasov
/// process started at `θ`. Fails with [`Error::NonConvergence`] when the two
/// halves of the run disagree by more than 5 standard errors.
pub fn equilibrium_gmap<R: Rng + ?Sized>(
    params: &McKeanVlasovParams,
    theta: f64,
    g: impl Fn(f64) -> f64,
    settings: GmapSettings,
    rng: &mut R,
) -> Result<GmapEstimate> {
    if !(0.0..=1.0).contains(&theta) {
        return param("θ must lie in [0,1]");
    }
    if !(settings.burn_in >= 0.0 && settings.horizon > 0.0) || settings.batches < 2 {
        return param("need burn-in >= 0, horizon > 0 and at least 2 batches");
    }
    let th = [theta, 1.0 - theta];
    let mut mv = McKeanVlasov::new(params.clone(), &th, &th)?;
    mv.advance(settings.burn_in, rng)?;
    let dt = params.local.dt;
    let n = libm::ceil(settings.horizon / dt) as u64;
    let mut batches = BatchMeans::new(n, settings.batches);
    for _ in 0..n {
        mv.step(dt, rng)?;
        batches.push(g(mv.state()[0]));
    }
    let summary = batches.finish();
    let z = summary.half_split_z();
    if z.abs() > 5.0 {
        return Err(Error::NonConvergence(alloc::format!(
            "batch halves differ by {z:.2} standard errors"
        )));
    }
    Ok(GmapEstimate {
        mean: summary.mean,
        std_err: summary.std_err,
        burn_in: settings.burn_in,
        horizon: settings.horizon,
        samples: n,
        half_split_z: z,
    })
}

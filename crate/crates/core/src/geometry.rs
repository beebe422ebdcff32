//! Geographic arenas and migration kernels.
//!
//! Three arenas are supported:
//! - the truncated hierarchical group `Ω_{N,L}`: `L` digits in `Z_N` with
//!   digit-wise modular addition, sites being the leaves of an `N`-ary tree;
//! - the torus `Z^d / (2n+1)Z^d` with a finitely supported step law;
//! - the complete graph on `M` sites (mean-field migration, uniform over all
//!   sites including the starting one).
//!
//! # Level indexing on `Ω_{N,L}`
//!
//! A walker picks a ball and lands uniformly in it. The rate sequence
//! `c_0, c_1, …` is applied as: the ball of radius `k + 1` around the current
//! site is chosen at rate `c_k / N^k`, for `k = 0, …, L − 1`. So `c_0`
//! governs mixing inside the 1-ball (the `N` sites sharing all but the lowest
//! digit). Rates for `k ≥ L` do not fit in the truncated group; they are
//! dropped and reported by [`GeographySpec::dropped_rate`].

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{param, Error, Result};
use crate::stats::RunningStats;

/// Address in `Ω_{N,L}`. `digits[p]` is the coordinate at position `p`;
/// position 0 is the lowest (finest) level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HierAddress {
    branching: u32,
    digits: Vec<u32>,
}

impl HierAddress {
    pub fn new(branching: u32, digits: Vec<u32>) -> Result<Self> {
        if branching < 2 {
            return param("branching N must be >= 2");
        }
        if let Some(d) = digits.iter().find(|&&d| d >= branching) {
            return param(alloc::format!("digit {d} outside [0, {})", branching));
        }
        Ok(Self { branching, digits })
    }

    pub fn origin(branching: u32, levels: usize) -> Result<Self> {
        Self::new(branching, vec![0; levels])
    }

    /// Inverse of [`HierAddress::index`].
    pub fn from_index(branching: u32, levels: usize, mut index: u64) -> Result<Self> {
        let mut digits = Vec::with_capacity(levels);
        for _ in 0..levels {
            digits.push((index % branching as u64) as u32);
            index /= branching as u64;
        }
        if index != 0 {
            return param("index exceeds N^L");
        }
        Self::new(branching, digits)
    }

    /// Site index `Σ_p digits[p] N^p`. Balls are contiguous index ranges.
    pub fn index(&self) -> u64 {
        self.digits
            .iter()
            .rev()
            .fold(0u64, |acc, &d| acc * self.branching as u64 + d as u64)
    }

    pub fn branching(&self) -> u32 {
        self.branching
    }

    pub fn levels(&self) -> usize {
        self.digits.len()
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.branching != other.branching || self.levels() != other.levels() {
            return param(alloc::format!(
                "addresses from different groups: (N={}, L={}) vs (N={}, L={})",
                self.branching,
                self.levels(),
                other.branching,
                other.levels()
            ));
        }
        Ok(())
    }
}

/// Hierarchical distance: the smallest `k` such that the digits at all
/// positions `>= k` agree.
pub fn hier_distance(i: &HierAddress, j: &HierAddress) -> Result<usize> {
    i.check_compatible(j)?;
    Ok(i.digits
        .iter()
        .zip(&j.digits)
        .rposition(|(a, b)| a != b)
        .map_or(0, |p| p + 1))
}

/// Index range of the `k`-ball containing site `index` in `Ω_{N,L}`.
pub fn ball_range(branching: u32, k: usize, index: u64) -> Range<u64> {
    let size = (branching as u64).pow(k as u32);
    let base = index - index % size;
    base..base + size
}

/// All addresses at hierarchical distance `<= k` from `center`, in index
/// order.
pub fn ball_members(center: &HierAddress, k: usize) -> Result<Vec<HierAddress>> {
    if k > center.levels() {
        return param(alloc::format!(
            "ball level {k} exceeds L = {}",
            center.levels()
        ));
    }
    ball_range(center.branching, k, center.index())
        .map(|idx| HierAddress::from_index(center.branching, center.levels(), idx))
        .collect()
}

/// One support point of a torus step law.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Step {
    pub offset: Vec<i64>,
    pub prob: f64,
}

/// A finite geographic arena plus its migration rates.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GeographySpec {
    /// `Ω_{N,L}` with level rates `c_k` (see the module docs for indexing).
    Hier {
        branching: u32,
        levels: u32,
        rates: Vec<f64>,
    },
    /// `Z^d` modulo `2n + 1` with jump `rate` and step law `steps`.
    Torus {
        dim: u32,
        half_width: u32,
        steps: Vec<Step>,
        rate: f64,
    },
    /// Complete graph: jumps at `rate` to a uniform site (self included).
    MeanField { sites: u32, rate: f64 },
}

const MAX_SITES: u64 = 1 << 40;

impl GeographySpec {
    pub fn hier(branching: u32, levels: u32, rates: Vec<f64>) -> Result<Self> {
        let spec = Self::Hier {
            branching,
            levels,
            rates,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn torus(dim: u32, half_width: u32, steps: Vec<Step>, rate: f64) -> Result<Self> {
        let spec = Self::Torus {
            dim,
            half_width,
            steps,
            rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Nearest-neighbour walk on the `d`-dimensional torus at unit rate.
    pub fn simple_torus(dim: u32, half_width: u32) -> Result<Self> {
        let mut steps = Vec::new();
        for axis in 0..dim as usize {
            for sign in [-1i64, 1] {
                let mut offset = vec![0i64; dim as usize];
                offset[axis] = sign;
                steps.push(Step {
                    offset,
                    prob: 0.5 / dim as f64,
                });
            }
        }
        Self::torus(dim, half_width, steps, 1.0)
    }

    pub fn mean_field(sites: u32, rate: f64) -> Result<Self> {
        let spec = Self::MeanField { sites, rate };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the structural invariants. A kernel whose rates are all zero is
    /// accepted (a frozen walk); samplers then report [`Error::NoMotion`].
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Hier {
                branching,
                levels,
                rates,
            } => {
                if *branching < 2 {
                    return param("hier: N must be >= 2");
                }
                if *levels < 1 {
                    return param("hier: L must be >= 1");
                }
                if (*branching as f64).powi(*levels as i32) > MAX_SITES as f64 {
                    return param("hier: N^L too large");
                }
                if rates.is_empty() {
                    return param("hier: rate sequence c is empty");
                }
                if rates.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                    return param("hier: rates c_k must be finite and >= 0");
                }
            }
            Self::Torus {
                dim,
                half_width,
                steps,
                rate,
            } => {
                if *dim < 1 || *half_width < 1 {
                    return param("torus: need d >= 1 and n >= 1");
                }
                let side = 2.0 * *half_width as f64 + 1.0;
                if side.powi(*dim as i32) > MAX_SITES as f64 {
                    return param("torus: (2n+1)^d too large");
                }
                if !(rate.is_finite() && *rate >= 0.0) {
                    return param("torus: rate must be finite and >= 0");
                }
                if steps.is_empty() {
                    return param("torus: empty step law");
                }
                let mut total = 0.0;
                for s in steps {
                    if s.offset.len() != *dim as usize {
                        return param("torus: step offset dimension mismatch");
                    }
                    if !(s.prob.is_finite() && s.prob >= 0.0) {
                        return param("torus: step probabilities must be >= 0");
                    }
                    total += s.prob;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return param(alloc::format!("torus: step law sums to {total}, not 1"));
                }
            }
            Self::MeanField { sites, rate } => {
                if *sites < 1 {
                    return param("mean-field: need at least one site");
                }
                if !(rate.is_finite() && *rate >= 0.0) {
                    return param("mean-field: rate must be finite and >= 0");
                }
            }
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        match self {
            Self::Hier {
                branching, levels, ..
            } => (*branching as usize).pow(*levels),
            Self::Torus {
                dim, half_width, ..
            } => (2 * *half_width as usize + 1).pow(*dim),
            Self::MeanField { sites, .. } => *sites as usize,
        }
    }

    /// Per-level rates `c_k / N^k` for the levels that fit in the truncation.
    pub fn level_rates(&self) -> Vec<f64> {
        match self {
            Self::Hier {
                branching,
                levels,
                rates,
            } => rates
                .iter()
                .take(*levels as usize)
                .enumerate()
                .map(|(k, c)| c / (*branching as f64).powi(k as i32))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Rate mass `Σ_{k >= L} c_k / N^k` that the truncation discards.
    pub fn dropped_rate(&self) -> f64 {
        match self {
            Self::Hier {
                branching,
                levels,
                rates,
            } => rates
                .iter()
                .enumerate()
                .skip(*levels as usize)
                .map(|(k, c)| c / (*branching as f64).powi(k as i32))
                .fold(0.0, |a, x| a + x),
            _ => 0.0,
        }
    }

    /// Total jump rate per individual (null jumps onto the same site included).
    pub fn total_jump_rate(&self) -> f64 {
        match self {
            Self::Hier { .. } => self.level_rates().iter().sum(),
            Self::Torus { rate, .. } | Self::MeanField { rate, .. } => *rate,
        }
    }

    pub fn kernel(&self) -> MigrationKernel {
        MigrationKernel::new(self.clone(), false)
    }

    /// Kernel of the symmetrization `â(ξ,ξ') = (a(ξ,ξ') + a(ξ',ξ)) / 2`.
    pub fn symmetrized_kernel(&self) -> MigrationKernel {
        MigrationKernel::new(self.clone(), true)
    }

    /// Number of digits/levels for hierarchical arenas.
    pub fn hier_shape(&self) -> Option<(u32, u32)> {
        match self {
            Self::Hier {
                branching, levels, ..
            } => Some((*branching, *levels)),
            _ => None,
        }
    }
}

/// Sampler for jump destinations of a homogeneous kernel.
#[derive(Debug, Clone)]
pub struct MigrationKernel {
    spec: GeographySpec,
    total_rate: f64,
    /// Cumulative level weights (hier) or step weights (torus).
    cumulative: Vec<f64>,
    /// Torus steps used by the sampler (symmetrized if requested).
    steps: Vec<Step>,
}

impl MigrationKernel {
    fn new(spec: GeographySpec, symmetrize: bool) -> Self {
        let total_rate = spec.total_jump_rate();
        let mut steps = Vec::new();
        let weights: Vec<f64> = match &spec {
            GeographySpec::Hier { .. } => spec.level_rates(),
            GeographySpec::Torus { steps: law, .. } => {
                if symmetrize {
                    for s in law {
                        let neg: Vec<i64> = s.offset.iter().map(|v| -v).collect();
                        for (offset, p) in [(s.offset.clone(), s.prob / 2.0), (neg, s.prob / 2.0)] {
                            match steps.iter_mut().find(|t: &&mut Step| t.offset == offset) {
                                Some(t) => t.prob += p,
                                None => steps.push(Step { offset, prob: p }),
                            }
                        }
                    }
                } else {
                    steps = law.clone();
                }
                steps.iter().map(|s| s.prob).collect()
            }
            GeographySpec::MeanField { .. } => Vec::new(),
        };
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self {
            spec,
            total_rate,
            cumulative,
            steps,
        }
    }

    pub fn spec(&self) -> &GeographySpec {
        &self.spec
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    /// All supported kernels are translation invariant on their group.
    pub fn is_homogeneous(&self) -> bool {
        true
    }

    pub fn site_count(&self) -> usize {
        self.spec.site_count()
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Ball level `k + 1` chosen for a hierarchical jump.
    pub fn sample_level<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.total_rate <= 0.0 {
            return Err(Error::NoMotion);
        }
        Ok(self.pick(rng) + 1)
    }

    /// Destination site index of one jump from `from`.
    pub fn sample_jump<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> Result<usize> {
        if self.total_rate <= 0.0 {
            return Err(Error::NoMotion);
        }
        Ok(match &self.spec {
            GeographySpec::Hier { branching, .. } => {
                let level = self.pick(rng) + 1;
                let r = ball_range(*branching, level, from as u64);
                rng.random_range(r) as usize
            }
            GeographySpec::Torus {
                dim, half_width, ..
            } => {
                let step = &self.steps[self.pick(rng)];
                torus_shift(from, &step.offset, *dim, *half_width)
            }
            GeographySpec::MeanField { sites, .. } => rng.random_range(0..*sites as usize),
        })
    }
}

/// Site index of `from + offset` on the torus.
pub fn torus_shift(from: usize, offset: &[i64], dim: u32, half_width: u32) -> usize {
    let side = 2 * half_width as i64 + 1;
    let mut rest = from as i64;
    let mut out = 0i64;
    let mut scale = 1i64;
    for off in offset.iter().take(dim as usize) {
        let coord = rest % side;
        rest /= side;
        out += (coord + off).rem_euclid(side) * scale;
        scale *= side;
    }
    out as usize
}

/// One jump of the hierarchical walk started at `from`.
pub fn sample_hier_jump<R: Rng + ?Sized>(
    from: &HierAddress,
    spec: &GeographySpec,
    rng: &mut R,
) -> Result<HierAddress> {
    let Some((n, l)) = spec.hier_shape() else {
        return param("sample_hier_jump needs a hierarchical geography");
    };
    if from.branching() != n || from.levels() != l as usize {
        return param("address does not belong to the geography");
    }
    let kernel = spec.kernel();
    let to = kernel.sample_jump(from.index() as usize, rng)?;
    HierAddress::from_index(n, l as usize, to as u64)
}

/// Degree `log c / (log N − log c)` of the walk on `Ω_N` with `c_k = c^k`.
pub fn degree_geometric(c: f64, branching: u32) -> Result<f64> {
    if branching < 2 {
        return param("N must be >= 2");
    }
    if !(c > 0.0 && c.is_finite()) {
        return param("c must be positive");
    }
    let n = branching as f64;
    if c >= n {
        return param(alloc::format!(
            "degree formula needs c < N (c = {c}, N = {n})"
        ));
    }
    Ok(c.ln() / (n.ln() - c.ln()))
}

/// Degree of the supported infinite-space walk families, if recognized:
/// geometric `c_k = a c^k` on `Ω_N` (`c < N`), and mean-zero finitely
/// supported walks on `Z^d` (degree `d/2 − 1`).
pub fn walk_degree(spec: &GeographySpec) -> Option<f64> {
    match spec {
        GeographySpec::Hier {
            branching, rates, ..
        } => {
            if rates.len() < 2 || rates[0] <= 0.0 {
                return None;
            }
            let ratio = rates[1] / rates[0];
            let geometric = rates
                .windows(2)
                .all(|w| w[0] > 0.0 && ((w[1] / w[0]) - ratio).abs() <= 1e-9 * ratio.max(1.0));
            if !geometric {
                return None;
            }
            degree_geometric(ratio, *branching).ok()
        }
        GeographySpec::Torus {
            dim, steps, rate, ..
        } => {
            if *rate <= 0.0 {
                return None;
            }
            let mean_zero = (0..*dim as usize).all(|a| {
                steps
                    .iter()
                    .map(|s| s.prob * s.offset[a] as f64)
                    .sum::<f64>()
                    .abs()
                    < 1e-12
            });
            let moves = steps
                .iter()
                .any(|s| s.prob > 0.0 && s.offset.iter().any(|&v| v != 0));
            (mean_zero && moves).then(|| *dim as f64 / 2.0 - 1.0)
        }
        GeographySpec::MeanField { .. } => None,
    }
}

/// Where the Green-function walk lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WalkDomain {
    /// The finite arena itself (torus wraps around).
    Finite,
    /// For tori: the untruncated lattice `Z^d` with the same step law.
    InfiniteLattice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GreenEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub horizon: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RecurrenceEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub horizon: f64,
    pub replicas: usize,
    /// Weight exponent `(1 − γ)/γ`.
    pub exponent: f64,
    /// Bound `∫_T^∞ t^{-p} dt` on the truncated tail, finite when `p > 1`.
    pub tail_bound: Option<f64>,
}

enum Position {
    Site(usize),
    Lattice(Vec<i64>),
}

/// Runs one continuous-time walk of the symmetrized kernel from the origin
/// and reports the sojourn intervals at the origin inside `[0, horizon]`.
fn origin_sojourns<R: Rng + ?Sized>(
    kernel: &MigrationKernel,
    domain: WalkDomain,
    horizon: f64,
    rng: &mut R,
    mut visit: impl FnMut(f64, f64),
) {
    let rate = kernel.total_rate();
    if rate <= 0.0 {
        visit(0.0, horizon);
        return;
    }
    let hold = Exp::new(rate).expect("positive rate");
    let mut pos = match (domain, kernel.spec()) {
        (WalkDomain::InfiniteLattice, GeographySpec::Torus { dim, .. }) => {
            Position::Lattice(vec![0; *dim as usize])
        }
        _ => Position::Site(0),
    };
    let mut t = 0.0;
    while t < horizon {
        let dt = hold.sample(rng);
        let at_origin = match &pos {
            Position::Site(s) => *s == 0,
            Position::Lattice(v) => v.iter().all(|&c| c == 0),
        };
        if at_origin {
            visit(t, (t + dt).min(horizon));
        }
        t += dt;
        match &mut pos {
            Position::Site(s) => *s = kernel.sample_jump(*s, rng).expect("positive rate"),
            Position::Lattice(v) => {
                let step = &kernel.steps[kernel.pick(rng)];
                for (c, o) in v.iter_mut().zip(&step.offset) {
                    *c += o;
                }
            }
        }
    }
}

fn check_horizon(horizon: f64, replicas: usize) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return param("horizon T must be positive and finite");
    }
    if replicas == 0 {
        return param("replicas must be positive");
    }
    Ok(())
}

/// Monte Carlo estimate of the truncated Green function
/// `∫_0^T â_t(0,0) dt` (expected occupation time of the origin).
pub fn green_at_zero<R: Rng + ?Sized>(
    spec: &GeographySpec,
    domain: WalkDomain,
    horizon: f64,
    replicas: usize,
    rng: &mut R,
) -> Result<GreenEstimate> {
    check_horizon(horizon, replicas)?;
    let kernel = spec.symmetrized_kernel();
    let mut stats = RunningStats::new();
    for _ in 0..replicas {
        let mut occupied = 0.0;
        origin_sojourns(&kernel, domain, horizon, rng, |a, b| occupied += b - a);
        stats.push(occupied);
    }
    Ok(GreenEstimate {
        mean: stats.mean(),
        std_err: stats.std_err(),
        horizon,
        replicas,
    })
}

/// `∫_a^b t^{-p} dt` for `1 <= a <= b`.
fn power_integral(a: f64, b: f64, p: f64) -> f64 {
    if b <= a {
        0.0
    } else if (p - 1.0).abs() < 1e-12 {
        (b / a).ln()
    } else {
        (b.powf(1.0 - p) - a.powf(1.0 - p)) / (1.0 - p)
    }
}

/// Monte Carlo estimate of `∫_1^T t^{-(1−γ)/γ} â_t(0,0) dt`; `γ = 1` gives
/// the unweighted integral.
pub fn recurrence_integral<R: Rng + ?Sized>(
    spec: &GeographySpec,
    gamma: f64,
    domain: WalkDomain,
    horizon: f64,
    replicas: usize,
    rng: &mut R,
) -> Result<RecurrenceEstimate> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return param(alloc::format!("γ must lie in (0, 1], got {gamma}"));
    }
    check_horizon(horizon, replicas)?;
    if horizon <= 1.0 {
        return param("horizon T must exceed 1");
    }
    let p = (1.0 - gamma) / gamma;
    let kernel = spec.symmetrized_kernel();
    let mut stats = RunningStats::new();
    for _ in 0..replicas {
        let mut acc = 0.0;
        origin_sojourns(&kernel, domain, horizon, rng, |a, b| {
            acc += power_integral(a.max(1.0), b.max(1.0), p);
        });
        stats.push(acc);
    }
    let tail_bound = (p > 1.0).then(|| horizon.powf(1.0 - p) / (p - 1.0));
    Ok(RecurrenceEstimate {
        mean: stats.mean(),
        std_err: stats.std_err(),
        horizon,
        replicas,
        exponent: p,
        tail_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn addr(n: u32, d: &[u32]) -> HierAddress {
        HierAddress::new(n, d.to_vec()).unwrap()
    }

    #[test]
    fn distance_examples() {
        let i = addr(3, &[0, 0, 0, 0]);
        assert_eq!(hier_distance(&i, &i).unwrap(), 0);
        assert_eq!(hier_distance(&i, &addr(3, &[1, 0, 0, 0])).unwrap(), 1);
        assert_eq!(
            hier_distance(&addr(3, &[0, 2, 0, 0]), &addr(3, &[2, 1, 1, 0])).unwrap(),
            3
        );
    }

    #[test]
    fn distance_rejects_mismatched_groups() {
        let a = addr(3, &[0, 0]);
        assert!(hier_distance(&a, &addr(2, &[0, 0])).is_err());
        assert!(hier_distance(&a, &addr(3, &[0, 0, 0])).is_err());
    }

    #[test]
    fn ball_examples() {
        let c = addr(2, &[0, 0, 0]);
        assert_eq!(ball_members(&c, 0).unwrap(), vec![c.clone()]);
        assert_eq!(
            ball_members(&c, 1).unwrap(),
            vec![addr(2, &[0, 0, 0]), addr(2, &[1, 0, 0])]
        );
        for k in 0..=3 {
            assert_eq!(ball_members(&c, k).unwrap().len(), 1 << k);
        }
        assert!(ball_members(&c, 4).is_err());
    }

    #[test]
    fn index_roundtrip() {
        for idx in 0..81 {
            let a = HierAddress::from_index(3, 4, idx).unwrap();
            assert_eq!(a.index(), idx);
        }
        assert!(HierAddress::from_index(3, 4, 81).is_err());
    }

    #[test]
    fn degree_examples() {
        for n in [2, 3, 10, 100] {
            assert_eq!(degree_geometric(1.0, n).unwrap(), 0.0);
        }
        assert!((degree_geometric(2.0, 4).unwrap() - 1.0).abs() < 1e-15);
        let g = degree_geometric(0.5, 4).unwrap();
        assert!((g - (0.5f64.ln() / (4f64.ln() - 0.5f64.ln()))).abs() < 1e-15);
        assert!((g + 1.0 / 3.0).abs() < 1e-12);
        assert!(degree_geometric(4.0, 4).is_err());
        assert!(degree_geometric(5.0, 4).is_err());
    }

    #[test]
    fn degree_monotone_and_vanishing() {
        let mut prev = f64::NEG_INFINITY;
        for i in 1..40 {
            let g = degree_geometric(i as f64 * 0.1, 5).unwrap();
            assert!(g > prev);
            prev = g;
        }
        let small: f64 = degree_geometric(3.0, 1_000_000).unwrap();
        assert!(small > 0.0 && small < 0.1);
        let neg: f64 = degree_geometric(0.5, 1_000_000).unwrap();
        assert!(neg < 0.0 && neg > -0.1);
    }

    #[test]
    fn single_active_level_stays_in_one_ball() {
        let spec = GeographySpec::hier(3, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let from = addr(3, &[1, 2, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let to = sample_hier_jump(&from, &spec, &mut rng).unwrap();
            assert!(hier_distance(&from, &to).unwrap() <= 1);
            assert_eq!(&to.digits()[1..], &from.digits()[1..]);
        }
    }

    #[test]
    fn total_rate_and_dropped_mass() {
        let spec = GeographySpec::hier(2, 2, vec![1.0, 2.0, 4.0]).unwrap();
        // c_0 + c_1/2 = 2, dropped c_2/4 = 1.
        assert!((spec.total_jump_rate() - 2.0).abs() < 1e-15);
        assert!((spec.dropped_rate() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_kernel_reports_no_motion() {
        let spec = GeographySpec::hier(2, 2, vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let from = addr(2, &[0, 0]);
        assert_eq!(
            sample_hier_jump(&from, &spec, &mut rng),
            Err(Error::NoMotion)
        );
    }

    #[test]
    fn torus_shift_wraps() {
        // side 5 in 2d: site (4, 0) + (1, -1) = (0, 4) -> index 20.
        assert_eq!(torus_shift(4, &[1, -1], 2, 2), 20);
    }

    #[test]
    fn rate_zero_green_is_horizon() {
        let spec = GeographySpec::mean_field(5, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = green_at_zero(&spec, WalkDomain::Finite, 7.5, 10, &mut rng).unwrap();
        assert_eq!(g.mean, 7.5);
        assert_eq!(g.std_err, 0.0);
        let r = recurrence_integral(&spec, 0.5, WalkDomain::Finite, 50.0, 3, &mut rng).unwrap();
        assert!((r.mean - 50f64.ln()).abs() < 1e-12);
        assert!(r.tail_bound.is_none());
        let r1 = recurrence_integral(&spec, 1.0, WalkDomain::Finite, 50.0, 3, &mut rng).unwrap();
        assert!((r1.mean - 49.0).abs() < 1e-12);
    }

    #[test]
    fn recurrence_rejects_bad_gamma_and_reports_tail() {
        let spec = GeographySpec::mean_field(5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(recurrence_integral(&spec, 0.0, WalkDomain::Finite, 10.0, 1, &mut rng).is_err());
        assert!(recurrence_integral(&spec, -0.5, WalkDomain::Finite, 10.0, 1, &mut rng).is_err());
        let r = recurrence_integral(&spec, 0.25, WalkDomain::Finite, 10.0, 5, &mut rng).unwrap();
        // p = 3: tail bound T^{-2}/2.
        assert!((r.tail_bound.unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn walk_degree_families() {
        let geo = GeographySpec::hier(4, 3, vec![1.0, 2.0, 4.0]).unwrap();
        assert!((walk_degree(&geo).unwrap() - 1.0).abs() < 1e-12);
        let flat = GeographySpec::hier(4, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(walk_degree(&flat), Some(0.0));
        let irregular = GeographySpec::hier(4, 3, vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(walk_degree(&irregular), None);
        let z2 = GeographySpec::simple_torus(2, 3).unwrap();
        assert_eq!(walk_degree(&z2), Some(0.0));
        let z1 = GeographySpec::simple_torus(1, 3).unwrap();
        assert_eq!(walk_degree(&z1), Some(-0.5));
    }
}

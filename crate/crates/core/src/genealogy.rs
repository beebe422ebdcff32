//! Sampled genealogies: ultrametric distance matrices with marks.
//!
//! Distances are twice the time back to the most recent common ancestor.
//! Pairs without a common ancestor since time 0 carry distance `2t` together
//! with a censored flag; statistics see censored entries as `+∞`.

use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::cannings::{AncestryLog, Individual, ParticleSystem};
use crate::error::{param, Error, Result};
use crate::stats::RunningStats;

/// Tolerance of the ultrametric check, in time units.
pub const ULTRAMETRIC_TOL: f64 = 1e-9;

/// Location and type of a sampled individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mark {
    pub site: usize,
    pub ty: u32,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenealogySample {
    n: usize,
    time: f64,
    dist: Vec<f64>,
    censored: Vec<bool>,
    marks: Vec<Mark>,
}

impl GenealogySample {
    /// `dist` and `censored` are `n × n` row-major.
    pub fn new(time: f64, dist: Vec<f64>, censored: Vec<bool>, marks: Vec<Mark>) -> Result<Self> {
        let n = marks.len();
        if dist.len() != n * n || censored.len() != n * n {
            return param("distance matrix must be n×n with n = number of marks");
        }
        for i in 0..n {
            if dist[i * n + i] != 0.0 || censored[i * n + i] {
                return param("diagonal must be zero");
            }
            for j in 0..i {
                if dist[i * n + j] != dist[j * n + i] || censored[i * n + j] != censored[j * n + i]
                {
                    return param("distance matrix must be symmetric");
                }
                if !(dist[i * n + j] >= 0.0) {
                    return param("distances must be >= 0");
                }
            }
        }
        Ok(Self {
            n,
            time,
            dist,
            censored,
            marks,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn marks(&self) -> &[Mark] {
        &self.marks
    }

    /// Stored distance (`2t` for censored pairs).
    pub fn raw(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn is_censored(&self, i: usize, j: usize) -> bool {
        self.censored[i * self.n + j]
    }

    /// Distance with censored pairs at `+∞`.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        if self.is_censored(i, j) {
            f64::INFINITY
        } else {
            self.raw(i, j)
        }
    }

    pub fn any_censored(&self) -> bool {
        self.censored.iter().any(|&c| c)
    }

    /// Checks `d(i,j) <= max(d(i,k), d(k,j)) + tol` for all triples.
    pub fn check_ultrametric(&self, tol: f64) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            for j in (i + 1)..n {
                let dij = self.dist(i, j);
                for k in 0..n {
                    let bound = self.dist(i, k).max(self.dist(k, j));
                    if dij > bound + tol {
                        return Err(Error::NotUltrametric {
                            i,
                            j,
                            k,
                            dij,
                            bound,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Principal submatrix on `indices` (repeats allowed).
    pub fn subsample(&self, indices: &[usize]) -> Self {
        let m = indices.len();
        let mut dist = vec![0.0; m * m];
        let mut censored = vec![false; m * m];
        for (a, &i) in indices.iter().enumerate() {
            for (b, &j) in indices.iter().enumerate() {
                dist[a * m + b] = self.raw(i, j);
                censored[a * m + b] = self.is_censored(i, j);
            }
        }
        Self {
            n: m,
            time: self.time,
            dist,
            censored,
            marks: indices.iter().map(|&i| self.marks[i]).collect(),
        }
    }

    /// Divides every distance by `factor` (censored flags kept).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dist: self.dist.iter().map(|d| d / factor).collect(),
            ..self.clone()
        }
    }

    /// Parts for serialization: `(time, dist, censored, marks)`.
    pub fn parts(&self) -> (f64, &[f64], &[bool], &[Mark]) {
        (self.time, &self.dist, &self.censored, &self.marks)
    }
}

/// Sampling measure for [`extract_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SamplingLaw {
    /// Uniform over all individuals.
    Uniform,
    /// Uniform over the individuals at the listed sites.
    Sites(Vec<usize>),
}

struct BirthIndex<'a> {
    log: &'a AncestryLog,
}

impl<'a> BirthIndex<'a> {
    /// Validates ordering and uniqueness; children must appear with strictly
    /// increasing ids, each after its parent.
    fn new(log: &'a AncestryLog, t: f64) -> Result<Self> {
        let mut last_time = f64::NEG_INFINITY;
        let mut last_child = None;
        for (i, r) in log.records.iter().enumerate() {
            let bad = |reason: &str| {
                Err(Error::Integrity {
                    record: i,
                    reason: reason.into(),
                })
            };
            if !(r.time >= last_time) {
                return bad("records out of time order");
            }
            if r.time > t {
                return bad("record after the sampling time");
            }
            if r.child < log.founders {
                return bad("founder lineage has a birth record");
            }
            if last_child.is_some_and(|c| r.child <= c) {
                return bad("lineage born twice or ids not increasing");
            }
            if r.parent >= r.child {
                return bad("parent is younger than child");
            }
            last_time = r.time;
            last_child = Some(r.child);
        }
        Ok(Self { log })
    }

    fn birth(&self, id: u64) -> Option<(u64, f64)> {
        self.log
            .records
            .binary_search_by_key(&id, |r| r.child)
            .ok()
            .map(|i| (self.log.records[i].parent, self.log.records[i].time))
    }
}

/// Traces the given lineages back through the log. Returns the `n × n`
/// distances and censored flags.
pub fn trace_lineages(
    log: &AncestryLog,
    t: f64,
    lineages: &[u64],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let index = BirthIndex::new(log, t)?;
    let n = lineages.len();
    let mut dist = vec![0.0; n * n];
    let mut censored = vec![false; n * n];
    // group id -> members; active lineage -> group id
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut active: BTreeMap<u64, usize> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    for (i, &id) in lineages.iter().enumerate() {
        match active.get(&id) {
            Some(&g) => groups[g].push(i),
            None => {
                active.insert(id, groups.len());
                groups.push(vec![i]);
                heap.push(id);
            }
        }
    }
    while let Some(id) = heap.pop() {
        if active.len() == 1 {
            break;
        }
        let Some((parent, time)) = index.birth(id) else {
            if id >= log.founders {
                return Err(Error::Integrity {
                    record: log.records.len(),
                    reason: alloc::format!("lineage {id} has no birth record"),
                });
            }
            // every remaining lineage is a founder
            break;
        };
        let g = active.remove(&id).expect("active lineage");
        match active.get(&parent) {
            Some(&h) => {
                let d = 2.0 * (t - time);
                let moved = core::mem::take(&mut groups[g]);
                for &a in &moved {
                    for &b in &groups[h] {
                        dist[a * n + b] = d;
                        dist[b * n + a] = d;
                    }
                }
                groups[h].extend(moved);
            }
            None => {
                active.insert(parent, g);
                heap.push(parent);
            }
        }
    }
    let remaining: Vec<usize> = active.values().copied().collect();
    for (x, &g) in remaining.iter().enumerate() {
        for &h in &remaining[x + 1..] {
            for &a in &groups[g] {
                for &b in &groups[h] {
                    for (p, q) in [(a, b), (b, a)] {
                        dist[p * n + q] = 2.0 * t;
                        censored[p * n + q] = true;
                    }
                }
            }
        }
    }
    Ok((dist, censored))
}

/// Draws `n` individuals from the current population (with or without
/// replacement) and builds their genealogy at the system's current time.
pub fn extract_sample<R: Rng + ?Sized>(
    system: &ParticleSystem,
    n: usize,
    law: &SamplingLaw,
    with_replacement: bool,
    rng: &mut R,
) -> Result<GenealogySample> {
    let m = system.per_site();
    let pool: Vec<usize> = match law {
        SamplingLaw::Uniform => (0..system.population().len()).collect(),
        SamplingLaw::Sites(sites) => {
            if sites.iter().any(|&s| s >= system.sites()) {
                return param("sampling site outside the geography");
            }
            sites.iter().flat_map(|&s| s * m..(s + 1) * m).collect()
        }
    };
    if pool.is_empty() || (!with_replacement && n > pool.len()) {
        return param("sample size exceeds the sampled population");
    }
    let picks: Vec<usize> = if with_replacement {
        (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    } else {
        rand::seq::index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    sample_from_positions(system.log(), system.population(), m, system.time(), &picks)
}

/// Genealogy of the individuals at the given flat population positions.
pub fn sample_from_positions(
    log: &AncestryLog,
    population: &[Individual],
    per_site: usize,
    t: f64,
    positions: &[usize],
) -> Result<GenealogySample> {
    let lineages: Vec<u64> = positions.iter().map(|&p| population[p].lineage).collect();
    let (dist, censored) = trace_lineages(log, t, &lineages)?;
    let marks = positions
        .iter()
        .map(|&p| Mark {
            site: p / per_site,
            ty: population[p].ty,
        })
        .collect();
    GenealogySample::new(t, dist, censored, marks)
}

/// How tuples are drawn for a polynomial statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TupleMode {
    /// Ordered tuples with repeats (product sampling measure).
    WithReplacement,
    /// Ordered tuples of distinct indices.
    Distinct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolyOptions {
    pub mode: TupleMode,
    /// Enumerate all tuples when their number is at most this.
    pub max_exhaustive: u64,
    /// Random tuples drawn otherwise.
    pub draws: usize,
}

impl Default for PolyOptions {
    fn default() -> Self {
        Self {
            mode: TupleMode::WithReplacement,
            max_exhaustive: 1_000_000,
            draws: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PolyEstimate {
    pub value: f64,
    /// Zero when exhaustive.
    pub std_err: f64,
    pub exhaustive: bool,
    pub tuples: u64,
}

fn tuple_count(n: usize, degree: usize, mode: TupleMode) -> Option<u64> {
    let mut c: u64 = 1;
    for i in 0..degree {
        let f = match mode {
            TupleMode::WithReplacement => n as u64,
            TupleMode::Distinct => n.checked_sub(i)? as u64,
        };
        c = c.checked_mul(f)?;
    }
    Some(c)
}

/// Average of `φ(distances) · g(marks)` over ordered `degree`-tuples of the
/// sample. `φ` receives the `degree × degree` distance matrix (row-major,
/// censored pairs at `+∞`).
pub fn polynomial_statistic<R: Rng + ?Sized>(
    sample: &GenealogySample,
    degree: usize,
    phi: impl Fn(&[f64]) -> f64,
    g: impl Fn(&[Mark]) -> f64,
    options: PolyOptions,
    rng: &mut R,
) -> Result<PolyEstimate> {
    let n = sample.n();
    if degree == 0 {
        return Ok(PolyEstimate {
            value: phi(&[]) * g(&[]),
            std_err: 0.0,
            exhaustive: true,
            tuples: 1,
        });
    }
    if n == 0 || (options.mode == TupleMode::Distinct && degree > n) {
        return param("statistic degree exceeds the sample size");
    }
    let mut mat = vec![0.0; degree * degree];
    let mut marks = vec![Mark { site: 0, ty: 0 }; degree];
    let mut eval = |tuple: &[usize]| {
        for (a, &i) in tuple.iter().enumerate() {
            marks[a] = sample.marks[i];
            for (b, &j) in tuple.iter().enumerate() {
                mat[a * degree + b] = sample.dist(i, j);
            }
        }
        phi(&mat) * g(&marks)
    };
    let count = tuple_count(n, degree, options.mode);
    if let Some(total) = count.filter(|&c| c <= options.max_exhaustive) {
        let mut tuple = vec![0usize; degree];
        let mut acc = 0.0;
        let mut seen = 0u64;
        loop {
            let distinct = options.mode == TupleMode::WithReplacement
                || (0..degree).all(|a| (0..a).all(|b| tuple[a] != tuple[b]));
            if distinct {
                acc += eval(&tuple);
                seen += 1;
            }
            let mut pos = degree;
            loop {
                if pos == 0 {
                    debug_assert_eq!(seen, total);
                    return Ok(PolyEstimate {
                        value: acc / seen as f64,
                        std_err: 0.0,
                        exhaustive: true,
                        tuples: seen,
                    });
                }
                pos -= 1;
                tuple[pos] += 1;
                if tuple[pos] < n {
                    break;
                }
                tuple[pos] = 0;
            }
        }
    }
    if options.draws == 0 {
        return param("too many tuples to enumerate and no random draws requested");
    }
    let mut stats = RunningStats::new();
    let mut tuple = vec![0usize; degree];
    for _ in 0..options.draws {
        match options.mode {
            TupleMode::WithReplacement => {
                tuple.iter_mut().for_each(|v| *v = rng.random_range(0..n))
            }
            TupleMode::Distinct => {
                for (a, v) in rand::seq::index::sample(rng, n, degree)
                    .into_iter()
                    .enumerate()
                {
                    tuple[a] = v;
                }
            }
        }
        stats.push(eval(&tuple));
    }
    Ok(PolyEstimate {
        value: stats.mean(),
        std_err: stats.std_err(),
        exhaustive: false,
        tuples: options.draws as u64,
    })
}

/// Entrywise `r ↦ 1 − e^{−r}`; censored pairs map to 1 and lose the flag.
pub fn transform_distances(sample: &GenealogySample) -> GenealogySample {
    let dist = sample
        .dist
        .iter()
        .zip(&sample.censored)
        .map(|(&d, &c)| if c { 1.0 } else { -(-d).exp_m1() })
        .collect();
    GenealogySample {
        dist,
        censored: vec![false; sample.censored.len()],
        ..sample.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Tmrca {
    Time(f64),
    /// Some pair has no common ancestor since time 0.
    NoMrca,
}

/// Half the largest pairwise distance.
pub fn tmrca(sample: &GenealogySample) -> Tmrca {
    if sample.any_censored() {
        return Tmrca::NoMrca;
    }
    Tmrca::Time(sample.dist.iter().copied().fold(0.0, f64::max) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BallPartition {
    /// Classes in order of their smallest member.
    pub classes: Vec<Vec<usize>>,
    pub fractions: Vec<f64>,
}

/// Classes of the relation `d(i,j) < 2h`.
pub fn ball_decomposition(sample: &GenealogySample, h: f64) -> Result<BallPartition> {
    if !(h > 0.0) {
        return param("ball radius h must be positive");
    }
    sample.check_ultrametric(ULTRAMETRIC_TOL)?;
    let n = sample.n();
    let mut class_of = vec![usize::MAX; n];
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if class_of[i] != usize::MAX {
            continue;
        }
        let c = classes.len();
        let members: Vec<usize> = (i..n)
            .filter(|&j| class_of[j] == usize::MAX && sample.dist(i, j) < 2.0 * h)
            .collect();
        for &j in &members {
            class_of[j] = c;
        }
        classes.push(members);
    }
    let fractions = classes.iter().map(|c| c.len() as f64 / n as f64).collect();
    Ok(BallPartition { classes, fractions })
}

//! Dispatch of validated configurations to the simulation kernels.
//!
//! Replica `r` of every experiment draws from streams keyed by
//! `(seed, r, module, purpose)`, and results are merged in replica order, so
//! outputs do not depend on the number of worker threads.

use std::path::PathBuf;
use std::time::Instant;

use hiersim_core::cannings::{EventCounts, ParticleSystem};
use hiersim_core::dynamics::{
    equilibrium_gmap, run_mckean_vlasov, step_interacting_fv, step_seedbank, DynamicsParams,
    GmapSettings, MigrationOperator, SeedbankParams, SeedbankState, TypeSimplexState,
};
use hiersim_core::fss::{
    assemble_report, fss_replica, genealogical_rescale, theta_reference, FssPath,
};
use hiersim_core::genealogy::{
    ball_decomposition, extract_sample, polynomial_statistic, tmrca, transform_distances,
    GenealogySample, PolyOptions, SamplingLaw, Tmrca, TupleMode,
};
use hiersim_core::renorm::{
    classify_dichotomy, interaction_chain_sample, seedbank_regime, seedbank_tail, ChainEngine,
    RegimeMonteCarlo, WakeUpSampler,
};
use hiersim_core::rng::{stream, Module, SimRng, StreamKey};
use hiersim_core::stats::{hill_tail_index, RunningStats};
use hiersim_core::Error;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    DichotomyCase, DynamicsConfig, ExperimentConfig, ExperimentKind, InitialLawConfig,
    SequenceConfig,
};
use crate::output::{
    int, num, write_artifacts, write_manifest, Artifacts, CsvTable, RunManifest, RunStatus,
};
use crate::RunError;

/// How to execute a run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for replica jobs.
    pub jobs: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    /// Exit status of the CLI: 0 for complete runs, 3 when the budget cut
    /// the run short.
    pub fn exit_code(&self) -> u8 {
        match self.manifest.status {
            RunStatus::Complete => 0,
            RunStatus::BudgetExceeded => 3,
        }
    }
}

struct KindOutput {
    artifacts: Artifacts,
    completed: usize,
    diagnostics: serde_json::Value,
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    pool: rayon::ThreadPool,
}

impl Ctx<'_> {
    fn rng(&self, replica: u64, module: Module, purpose: u8) -> SimRng {
        stream(self.config.seed, StreamKey::new(replica, module, purpose))
    }

    /// Runs `f` for replicas `0..n` on the pool; the first error in replica
    /// order wins.
    fn replicas<T: Send>(
        &self,
        n: usize,
        f: impl Fn(u64) -> hiersim_core::Result<T> + Sync + Send,
    ) -> Result<Vec<T>, RunError> {
        let results: Vec<hiersim_core::Result<T>> = self
            .pool
            .install(|| (0..n as u64).into_par_iter().map(&f).collect());
        results
            .into_iter()
            .collect::<hiersim_core::Result<Vec<T>>>()
            .map_err(RunError::Core)
    }
}

/// Largest replica prefix whose cost fits under `cap`.
fn affordable(per_replica: f64, cap: Option<f64>, replicas: usize) -> usize {
    match cap {
        Some(cap) if per_replica > 0.0 => ((cap / per_replica).floor() as usize).min(replicas),
        _ => replicas,
    }
}

fn budget_json(
    unit: &str,
    per_replica: f64,
    cap: Option<f64>,
    requested: usize,
    completed: usize,
) -> serde_json::Value {
    json!({
        "unit": unit,
        "per_replica": per_replica,
        "needed": per_replica * requested as f64,
        "cap": cap,
        "replicas_completed": completed,
    })
}

/// `0, r, 2r, …` up to and including `t_max`.
pub fn record_times(t_max: f64, every: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * every;
        if t >= t_max - 1e-9 * every {
            out.push(t_max);
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

fn advance(
    t: &mut f64,
    target: f64,
    dt: f64,
    mut step: impl FnMut(f64) -> hiersim_core::Result<()>,
) -> hiersim_core::Result<()> {
    while *t < target - 1e-12 * target.max(1.0) {
        let h = dt.min(target - *t);
        step(h)?;
        *t += h;
    }
    *t = target;
    Ok(())
}

/// Validates, runs and writes all outputs plus `manifest.json` into
/// `options.out_dir`.
pub fn run(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome, RunError> {
    let errors = config.validate();
    if !errors.is_empty() {
        return Err(RunError::Config(crate::config::ConfigErrors(errors)));
    }
    let start = Instant::now();
    let jobs = options.jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    let ctx = Ctx { config, pool };
    let out = match config.kind {
        ExperimentKind::DiffusionRun => diffusion_run(&ctx)?,
        ExperimentKind::CanningsRun => cannings_run(&ctx)?,
        ExperimentKind::MckeanVlasov => mckean_vlasov(&ctx)?,
        ExperimentKind::InteractionChain => interaction_chain(&ctx)?,
        ExperimentKind::Dichotomy => dichotomy(&ctx)?,
        ExperimentKind::SeedbankTail => seedbank_tail_run(&ctx)?,
        ExperimentKind::SeedbankRegime => seedbank_regime_run(&ctx)?,
        ExperimentKind::Fss => fss(&ctx)?,
        ExperimentKind::GenealogyStats => genealogy_stats(&ctx)?,
    };
    let files = write_artifacts(&options.out_dir, &out.artifacts)?;
    let status = if out.completed < config.replicas {
        RunStatus::BudgetExceeded
    } else {
        RunStatus::Complete
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: config.kind.name().into(),
        config_hash: config.hash(),
        seed: config.seed,
        replicas_requested: config.replicas,
        replicas_completed: out.completed,
        jobs,
        status,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        files,
        diagnostics: out.diagnostics,
        config: serde_json::to_value(config).expect("configuration serializes to JSON"),
    };
    write_manifest(&options.out_dir, &manifest)?;
    Ok(RunOutcome {
        manifest,
        out_dir: options.out_dir.clone(),
    })
}

struct DiffusionReplica {
    rows: Vec<(f64, usize, usize, f64)>,
    summary: Vec<(f64, f64, f64, f64)>,
    clip_events: u64,
    steps: u64,
}

fn initial_sites(
    d: &DynamicsConfig,
    sites: usize,
    rng: &mut SimRng,
) -> hiersim_core::Result<Vec<f64>> {
    let k = d.initial.len();
    match d.initial_law {
        InitialLawConfig::Constant => Ok(d.initial.repeat(sites)),
        InitialLawConfig::Monotype => {
            let law = WeightedIndex::new(&d.initial)
                .map_err(|e| Error::Parameter(format!("initial: {e}")))?;
            let mut x = vec![0.0; sites * k];
            for s in 0..sites {
                x[s * k + law.sample(rng)] = 1.0;
            }
            Ok(x)
        }
    }
}

fn heterozygosity(site: &[f64]) -> f64 {
    1.0 - site.iter().map(|v| v * v).sum::<f64>()
}

fn fw_replica(
    d: &DynamicsConfig,
    params: &DynamicsParams,
    op: &MigrationOperator,
    sites: usize,
    times: &[f64],
    keep_rows: bool,
    rng: &mut SimRng,
) -> hiersim_core::Result<DiffusionReplica> {
    let k = d.initial.len();
    let mut state = TypeSimplexState::new(k, initial_sites(d, sites, rng)?)?;
    let mut out = DiffusionReplica {
        rows: Vec::new(),
        summary: Vec::new(),
        clip_events: 0,
        steps: 0,
    };
    let mut t = 0.0;
    for &target in times {
        advance(&mut t, target, params.dt, |h| {
            if h == params.dt {
                step_interacting_fv(&mut state, op, params, rng)
            } else {
                let p = DynamicsParams {
                    dt: h,
                    ..params.clone()
                };
                step_interacting_fv(&mut state, op, &p, rng)
            }
        })?;
        let mean = state.x.iter().step_by(k).sum::<f64>() / sites as f64;
        let het = (0..sites)
            .map(|s| heterozygosity(state.site(s)))
            .sum::<f64>()
            / sites as f64;
        out.summary.push((target, mean, mean, het));
        if keep_rows {
            for s in 0..sites {
                for (u, v) in state.site(s).iter().enumerate() {
                    out.rows.push((target, s, u, *v));
                }
            }
        }
    }
    out.clip_events = state.clip_events;
    out.steps = state.steps;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn seedbank_replica(
    d: &DynamicsConfig,
    params: &SeedbankParams,
    op: &MigrationOperator,
    sites: usize,
    times: &[f64],
    keep_rows: bool,
    rng: &mut SimRng,
) -> hiersim_core::Result<DiffusionReplica> {
    let colours = params.sizes.len();
    let x: Vec<f64> = initial_sites(d, sites, rng)?
        .into_iter()
        .step_by(2)
        .collect();
    let y: Vec<f64> = x
        .iter()
        .flat_map(|v| std::iter::repeat_n(*v, colours))
        .collect();
    let mut state = SeedbankState::new(x, y, colours)?;
    let total = 1.0 + params.sizes.iter().sum::<f64>();
    let mut out = DiffusionReplica {
        rows: Vec::new(),
        summary: Vec::new(),
        clip_events: 0,
        steps: 0,
    };
    let mut t = 0.0;
    for &target in times {
        advance(&mut t, target, params.dt, |h| {
            if h == params.dt {
                step_seedbank(&mut state, op, params, rng)
            } else {
                let p = SeedbankParams {
                    dt: h,
                    ..params.clone()
                };
                step_seedbank(&mut state, op, &p, rng)
            }
        })?;
        let n = sites as f64;
        let active = state.x.iter().sum::<f64>() / n;
        let conserved = state.weighted(&params.sizes).iter().sum::<f64>() / (n * total);
        let het = state.x.iter().map(|x| 2.0 * x * (1.0 - x)).sum::<f64>() / n;
        out.summary.push((target, active, conserved, het));
        if keep_rows {
            for s in 0..sites {
                out.rows.push((target, s, 0, state.x[s]));
                for m in 0..colours {
                    out.rows.push((target, s, m + 1, state.y[s * colours + m]));
                }
            }
        }
    }
    out.clip_events = state.clip_events;
    out.steps = state.steps;
    Ok(out)
}

fn diffusion_run(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let geo = config.geometry.as_ref().expect("validated").spec()?;
    let d = config.dynamics.as_ref().expect("validated");
    let op = MigrationOperator::new(&geo);
    let sites = geo.site_count();
    let times = record_times(d.t_max, d.record_every);
    let colours = config
        .seedbank
        .as_ref()
        .map(|s| s.spec().colours())
        .transpose()?;
    let components = colours
        .as_ref()
        .map_or(d.initial.len(), |c| 1 + c.sizes.len());
    let per_replica = sites as f64 * (d.t_max / d.dt).ceil() * components as f64;
    let cap = config.budget.max_site_steps;
    let n = affordable(per_replica, cap, config.replicas);
    let keep = config.output.trajectories;
    let results = match &colours {
        None => {
            let params = d.params();
            ctx.replicas(n, |r| {
                fw_replica(
                    d,
                    &params,
                    &op,
                    sites,
                    &times,
                    keep,
                    &mut ctx.rng(r, Module::Dynamics, 0),
                )
            })?
        }
        Some(c) => {
            let params = d.seedbank_params(c);
            ctx.replicas(n, |r| {
                seedbank_replica(
                    d,
                    &params,
                    &op,
                    sites,
                    &times,
                    keep,
                    &mut ctx.rng(r, Module::Dynamics, 0),
                )
            })?
        }
    };
    let component = if colours.is_some() { "colour" } else { "type" };
    let mut traj = CsvTable::new(&["replica", "time", "site", component, "frequency"]);
    let mut summary = CsvTable::new(&[
        "replica",
        "time",
        "mean_active",
        "mean_total",
        "heterozygosity",
    ]);
    for (r, rep) in results.iter().enumerate() {
        for &(t, s, u, v) in &rep.rows {
            traj.push(vec![
                r.to_string(),
                num(t),
                s.to_string(),
                u.to_string(),
                num(v),
            ]);
        }
        for &(t, a, m, h) in &rep.summary {
            summary.push(vec![r.to_string(), num(t), num(a), num(m), num(h)]);
        }
    }
    let mut artifacts = Artifacts::default();
    artifacts.csv("summary.csv", &summary);
    if keep {
        artifacts.csv("trajectories.csv", &traj);
    }
    let diagnostics = json!({
        "dynamics": {
            "sites": sites,
            "clip_events": results.iter().map(|r| r.clip_events).collect::<Vec<_>>(),
            "steps": results.iter().map(|r| r.steps).collect::<Vec<_>>(),
            "dropped_migration_rate": geo.dropped_rate(),
        },
        "budget": budget_json("site_steps", per_replica, cap, config.replicas, n),
    });
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics,
    })
}

struct CanningsReplica {
    frequencies: Vec<(f64, Vec<f64>)>,
    system: ParticleSystem,
}

fn cannings_run(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let geo = config.geometry.as_ref().expect("validated").spec()?;
    let c = config.cannings.as_ref().expect("validated");
    let template = ParticleSystem::two_type(geo, c.params(), c.per_site, c.x0)?;
    let per_replica = template.total_rate() * c.t_max;
    let cap = config.budget.max_events;
    let n = affordable(per_replica, cap, config.replicas);
    let times = record_times(c.t_max, c.record_every);
    let results = ctx.replicas(n, |r| {
        let mut rng = ctx.rng(r, Module::Cannings, 0);
        let mut system = template.clone();
        let mut frequencies = Vec::with_capacity(times.len());
        for &t in &times {
            system.advance(t, &mut rng)?;
            frequencies.push((t, system.type0_frequencies()));
        }
        Ok(CanningsReplica {
            frequencies,
            system,
        })
    })?;
    let mut freq = CsvTable::new(&["replica", "time", "site", "frequency"]);
    let mut ancestry = CsvTable::new(&["replica", "time", "child", "parent", "site", "level"]);
    let mut events = CsvTable::new(&[
        "replica",
        "migration",
        "kingman",
        "local_lambda",
        "block",
        "rebalance_corrections",
    ]);
    for (r, rep) in results.iter().enumerate() {
        for (t, f) in &rep.frequencies {
            for (s, v) in f.iter().enumerate() {
                freq.push(vec![r.to_string(), num(*t), s.to_string(), num(*v)]);
            }
        }
        if config.output.ancestry {
            for a in &rep.system.log().records {
                ancestry.push(vec![
                    r.to_string(),
                    num(a.time),
                    int(a.child),
                    int(a.parent),
                    a.site.to_string(),
                    int(a.level),
                ]);
            }
        }
        let e = rep.system.counts();
        events.push(vec![
            r.to_string(),
            int(e.migration),
            int(e.kingman),
            int(e.local_lambda),
            int(e.block.iter().sum::<u64>()),
            int(e.rebalance_corrections),
        ]);
    }
    let mut artifacts = Artifacts::default();
    artifacts.csv("events.csv", &events);
    if config.output.trajectories {
        artifacts.csv("frequencies.csv", &freq);
    }
    if config.output.ancestry {
        artifacts.csv("ancestry.csv", &ancestry);
    }
    let diagnostics = json!({
        "cannings": truncation_json(template.counts(), &template),
        "budget": budget_json("events", per_replica, cap, config.replicas, n),
    });
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics,
    })
}

fn truncation_json(counts: &EventCounts, system: &ParticleSystem) -> serde_json::Value {
    json!({
        "individuals": system.population().len(),
        "total_rate": system.total_rate(),
        "dropped_pair_rate": counts.dropped_pair_rate,
        "dropped_block_rate": counts.dropped_block_rate,
        "dropped_levels": counts.dropped_levels,
        "dropped_migration_rate": system.geography().dropped_rate(),
    })
}

#[derive(Serialize)]
struct EquilibriumSummary {
    function: &'static str,
    replicas: usize,
    converged: usize,
    mean: f64,
    std_err: f64,
    /// `2cθ(1−θ)/(2c+d)` for the diffusion without Λ-jumps.
    stationary_value: Option<f64>,
}

fn mckean_vlasov(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let m = config.mckean_vlasov.as_ref().expect("validated");
    let params = m.params();
    let times = record_times(m.t_max, m.record_every);
    let eq_steps = m
        .equilibrium
        .map_or(0.0, |q| ((q.burn_in + q.horizon) / m.dt).ceil());
    let per_replica = (m.t_max / m.dt).ceil() + eq_steps;
    let cap = config.budget.max_site_steps;
    let n = affordable(per_replica, cap, config.replicas);
    let theta = [m.theta, 1.0 - m.theta];
    let x0 = [m.x0, 1.0 - m.x0];
    let results = ctx.replicas(n, |r| {
        let path = run_mckean_vlasov(
            &params,
            &theta,
            &x0,
            &times,
            &mut ctx.rng(r, Module::Dynamics, 10),
        )?;
        let eq = match m.equilibrium {
            None => None,
            Some(q) => {
                let settings = GmapSettings {
                    burn_in: q.burn_in,
                    horizon: q.horizon,
                    batches: q.batches,
                };
                let mut rng = ctx.rng(r, Module::Dynamics, 11);
                match equilibrium_gmap(&params, m.theta, |x| x * (1.0 - x), settings, &mut rng) {
                    Ok(e) => Some(Ok(e)),
                    Err(Error::NonConvergence(msg)) => Some(Err(msg)),
                    Err(e) => return Err(e),
                }
            }
        };
        Ok((path, eq))
    })?;
    let mut traj = CsvTable::new(&["replica", "time", "x"]);
    let mut eq = CsvTable::new(&[
        "replica",
        "mean",
        "std_err",
        "half_split_z",
        "samples",
        "converged",
    ]);
    let mut pooled = RunningStats::new();
    for (r, (path, e)) in results.iter().enumerate() {
        for (t, x) in times.iter().zip(path) {
            traj.push(vec![r.to_string(), num(*t), num(x[0])]);
        }
        match e {
            Some(Ok(e)) => {
                pooled.push(e.mean);
                eq.push(vec![
                    r.to_string(),
                    num(e.mean),
                    num(e.std_err),
                    num(e.half_split_z),
                    int(e.samples),
                    "true".into(),
                ]);
            }
            Some(Err(_)) => eq.push(vec![
                r.to_string(),
                "nan".into(),
                "nan".into(),
                "nan".into(),
                "0".into(),
                "false".into(),
            ]),
            None => {}
        }
    }
    let mut artifacts = Artifacts::default();
    if config.output.trajectories {
        artifacts.csv("trajectories.csv", &traj);
    }
    if m.equilibrium.is_some() {
        artifacts.csv("equilibrium.csv", &eq);
        let c = m.immigration;
        let d = m.resampling;
        artifacts.json(
            "equilibrium.json",
            &EquilibriumSummary {
                function: "x(1-x)",
                replicas: n,
                converged: pooled.count() as usize,
                mean: pooled.mean(),
                std_err: pooled.std_err(),
                stationary_value: (m.lambda.is_none() && 2.0 * c + d > 0.0)
                    .then(|| 2.0 * c * m.theta * (1.0 - m.theta) / (2.0 * c + d)),
            },
        );
    }
    let diagnostics = json!({
        "dynamics": {
            "non_converged": results.iter().filter(|(_, e)| matches!(e, Some(Err(_)))).count(),
        },
        "budget": budget_json("site_steps", per_replica, cap, config.replicas, n),
    });
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics,
    })
}

#[derive(Serialize)]
struct LevelSummary {
    level: i64,
    mean: f64,
    variance: f64,
    std_err: f64,
}

#[derive(Serialize)]
struct ChainSummary {
    theta: f64,
    j: usize,
    replicas: usize,
    levels: Vec<LevelSummary>,
    /// `(mean of M_0 − θ)/SE`.
    mean_preservation_z: Option<f64>,
    sigma: Vec<f64>,
}

fn interaction_chain(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let ch = config.chain.as_ref().expect("validated");
    let spec = ch.spec()?;
    let engine: ChainEngine = ch.engine.into();
    let per_replica = match engine {
        ChainEngine::Beta => 0.0,
        ChainEngine::Simulated { burn_in, dt, .. } => (ch.j + 1) as f64 * (burn_in / dt).ceil(),
    };
    let cap = config.budget.max_site_steps;
    let n = affordable(per_replica, cap, config.replicas);
    let paths = ctx.replicas(n, |r| {
        interaction_chain_sample(
            ch.theta,
            &spec,
            ch.j,
            engine,
            &mut ctx.rng(r, Module::Renorm, 0),
        )
    })?;
    let mut samples = CsvTable::new(&["replica", "level", "value"]);
    let mut stats: Vec<(i64, RunningStats)> = (0..=ch.j as i64 + 1)
        .map(|i| (i - ch.j as i64 - 1, RunningStats::new()))
        .collect();
    for (r, p) in paths.iter().enumerate() {
        for (i, (k, v)) in p.iter().enumerate() {
            samples.push(vec![r.to_string(), k.to_string(), num(v)]);
            stats[i].1.push(v);
        }
    }
    let level0 = &stats.last().expect("at least two levels").1;
    let summary = ChainSummary {
        theta: ch.theta,
        j: ch.j,
        replicas: n,
        mean_preservation_z: (level0.std_err() > 0.0)
            .then(|| (level0.mean() - ch.theta) / level0.std_err()),
        levels: stats
            .iter()
            .map(|(k, s)| LevelSummary {
                level: *k,
                mean: s.mean(),
                variance: s.variance(),
                std_err: s.std_err(),
            })
            .collect(),
        sigma: spec.levels.iter().map(|l| l.sigma).collect(),
    };
    let mut artifacts = Artifacts::default();
    artifacts.csv("samples.csv", &samples);
    artifacts.json("summary.json", &summary);
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics: json!({ "budget": budget_json("site_steps", per_replica, cap, config.replicas, n) }),
    })
}

#[derive(Serialize)]
pub struct DichotomyEntry {
    pub case: usize,
    pub c: SequenceConfig,
    pub lambda: SequenceConfig,
    pub d0: f64,
    pub verdict: hiersim_core::renorm::DichotomyVerdict,
}

fn dichotomy(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let r = ctx.config.renorm.as_ref().expect("validated");
    let entries = r
        .all_cases()
        .into_iter()
        .enumerate()
        .map(|(i, DichotomyCase { c, lambda })| {
            let case = DichotomyCase { c, lambda };
            let verdict = classify_dichotomy(&r.params(&case), r.horizon)?;
            Ok(DichotomyEntry {
                case: i,
                c: case.c,
                lambda: case.lambda,
                d0: r.d0,
                verdict,
            })
        })
        .collect::<hiersim_core::Result<Vec<_>>>()?;
    let mut artifacts = Artifacts::default();
    artifacts.json("dichotomy.json", &entries);
    Ok(KindOutput {
        artifacts,
        completed: ctx.config.replicas,
        diagnostics: json!({ "renorm": { "cases": entries.len(), "horizon": r.horizon } }),
    })
}

#[derive(Serialize)]
struct HillSummary {
    k: usize,
    samples: usize,
    replicas: usize,
    mean: f64,
    std_err: f64,
    gamma: Option<f64>,
}

fn seedbank_tail_run(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let s = config.seedbank.as_ref().expect("validated");
    let spec = s.spec();
    let report = seedbank_tail(&spec, &s.grid)?;
    let mut tail = CsvTable::new(&["time", "tail"]);
    for (t, p) in report.grid.iter().zip(&report.tail) {
        tail.push(vec![num(*t), num(*p)]);
    }
    let mut artifacts = Artifacts::default();
    artifacts.csv("tail.csv", &tail);
    artifacts.json("tail.json", &report);
    let mut completed = config.replicas;
    let mut diagnostics = json!({
        "seedbank": {
            "truncation_bound": report.truncation_bound,
            "colours": spec.colours()?.sizes.len(),
        }
    });
    if s.samples > 0 {
        let per_replica = s.samples as f64;
        let cap = config.budget.max_events;
        completed = affordable(per_replica, cap, config.replicas);
        let sampler = WakeUpSampler::new(&spec.colours()?)?;
        let k = s.hill_order();
        let results = ctx.replicas(completed, |r| {
            let mut rng = ctx.rng(r, Module::Renorm, 10);
            let mut draws: Vec<f64> = (0..s.samples).map(|_| sampler.sample(&mut rng)).collect();
            let empirical: Vec<f64> = s
                .grid
                .iter()
                .map(|t| draws.iter().filter(|x| *x > t).count() as f64 / s.samples as f64)
                .collect();
            let gamma = hill_tail_index(&mut draws, k);
            Ok((empirical, gamma))
        })?;
        let mut emp = CsvTable::new(&["replica", "time", "tail"]);
        let mut hill = CsvTable::new(&["replica", "k", "gamma_hat"]);
        let mut pooled = RunningStats::new();
        for (r, (e, g)) in results.iter().enumerate() {
            for (t, p) in s.grid.iter().zip(e) {
                emp.push(vec![r.to_string(), num(*t), num(*p)]);
            }
            hill.push(vec![r.to_string(), k.to_string(), num(*g)]);
            pooled.push(*g);
        }
        artifacts.csv("empirical_tail.csv", &emp);
        artifacts.csv("hill.csv", &hill);
        artifacts.json(
            "hill.json",
            &HillSummary {
                k,
                samples: s.samples,
                replicas: completed,
                mean: pooled.mean(),
                std_err: pooled.std_err(),
                gamma: report.gamma,
            },
        );
        diagnostics["budget"] = budget_json("events", per_replica, cap, config.replicas, completed);
    }
    Ok(KindOutput {
        artifacts,
        completed,
        diagnostics,
    })
}

fn seedbank_regime_run(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let walk = config.geometry.as_ref().expect("validated").spec()?;
    let s = config.seedbank.as_ref().expect("validated");
    let mc = (config.replicas > 0).then_some(RegimeMonteCarlo {
        horizon: s.regime_horizon,
        replicas: config.replicas,
    });
    let report = seedbank_regime(&walk, &s.spec(), mc, &mut ctx.rng(0, Module::Renorm, 20))?;
    let mut artifacts = Artifacts::default();
    artifacts.json("regime.json", &report);
    Ok(KindOutput {
        artifacts,
        completed: config.replicas,
        diagnostics: json!({ "renorm": { "criterion": report.criterion, "rho_truncated": report.rho_truncated } }),
    })
}

fn fss(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let f = config.fss.as_ref().expect("validated");
    let per_replica = f.experiment(1, None).site_steps();
    let cap = config.budget.max_site_steps;
    let n = affordable(per_replica, cap, config.replicas);
    let exp = f.experiment(n, None);
    exp.validate()?;
    let reference = theta_reference(&exp, &mut ctx.rng(0, Module::Fss, 0))?;
    let mut rungs: Vec<Vec<FssPath>> = Vec::with_capacity(exp.ladder.len());
    for (i, &size) in exp.ladder.iter().enumerate() {
        let purpose = u8::try_from(i + 1)
            .map_err(|_| Error::Config("fss: at most 254 ladder rungs".into()))?;
        rungs.push(ctx.replicas(n, |r| {
            fss_replica(&exp, size, &mut ctx.rng(r, Module::Fss, purpose))
        })?);
    }
    let report = assemble_report(&exp, reference, &rungs);
    let mut moments = CsvTable::new(&["n", "sites", "time", "moment", "std_err", "reference", "z"]);
    for e in &report.entries {
        for (i, t) in report.times.iter().enumerate() {
            moments.push(vec![
                e.n.to_string(),
                e.sites.to_string(),
                num(*t),
                num(e.moment[i]),
                num(e.moment_std_err[i]),
                num(report.reference_curve[i]),
                e.z[i].map_or(String::new(), num),
            ]);
        }
    }
    let mut paths = CsvTable::new(&["n", "replica", "time", "theta_hat"]);
    for (&size, rung) in exp.ladder.iter().zip(&rungs) {
        for (r, p) in rung.iter().enumerate() {
            for (t, th) in exp.times.iter().zip(&p.theta_hat) {
                paths.push(vec![size.to_string(), r.to_string(), num(*t), num(*th)]);
            }
        }
    }
    let mut artifacts = Artifacts::default();
    artifacts.json("fss.json", &report);
    artifacts.csv("moments.csv", &moments);
    if config.output.trajectories {
        artifacts.csv("theta_paths.csv", &paths);
    }
    let diagnostics = json!({
        "fss": {
            "clip_events": report.entries.iter().map(|e| e.clip_events).collect::<Vec<_>>(),
            "green": report.reference.green,
            "kappa": report.reference.kappa,
        },
        "budget": budget_json("site_steps", per_replica, cap, config.replicas, n),
    });
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics,
    })
}

struct GenealogyReplica {
    sample: GenealogySample,
    tmrca: Tmrca,
    mean_distance: f64,
    mean_transformed: f64,
    balls: Vec<(f64, usize, f64)>,
}

fn genealogy_stats(ctx: &Ctx) -> Result<KindOutput, RunError> {
    let config = ctx.config;
    let geo = config.geometry.as_ref().expect("validated").spec()?;
    let c = config.cannings.as_ref().expect("validated");
    let g = config.genealogy.as_ref().expect("validated");
    let template = ParticleSystem::two_type(geo, c.params(), c.per_site, c.x0)?;
    let sites = template.sites();
    let per_replica = template.total_rate() * g.time;
    let cap = config.budget.max_events;
    let n = affordable(per_replica, cap, config.replicas);
    let law = match &g.sites {
        None => SamplingLaw::Uniform,
        Some(s) => SamplingLaw::Sites(s.clone()),
    };
    let options = PolyOptions {
        mode: TupleMode::Distinct,
        max_exhaustive: 1_000_000,
        draws: g.poly_draws,
    };
    let results = ctx.replicas(n, |r| {
        let mut system = template.clone();
        system.advance(g.time, &mut ctx.rng(r, Module::Cannings, 0))?;
        let mut rng = ctx.rng(r, Module::Genealogy, 0);
        let mut sample =
            extract_sample(&system, g.sample_size, &law, g.with_replacement, &mut rng)?;
        if g.rescale {
            sample = genealogical_rescale(&sample, sites)?;
        }
        let pair = |d: &[f64]| d[1];
        let mean_distance =
            polynomial_statistic(&sample, 2, pair, |_| 1.0, options, &mut rng)?.value;
        let transformed = transform_distances(&sample);
        let mean_transformed =
            polynomial_statistic(&transformed, 2, pair, |_| 1.0, options, &mut rng)?.value;
        let balls = g
            .radii
            .iter()
            .map(|&h| {
                let p = ball_decomposition(&sample, h)?;
                let largest = p.fractions.iter().copied().fold(0.0, f64::max);
                Ok((h, p.classes.len(), largest))
            })
            .collect::<hiersim_core::Result<Vec<_>>>()?;
        Ok(GenealogyReplica {
            tmrca: tmrca(&sample),
            sample,
            mean_distance,
            mean_transformed,
            balls,
        })
    })?;
    let mut dist = CsvTable::new(&["replica", "i", "j", "distance", "censored"]);
    let mut marks = CsvTable::new(&["replica", "individual", "site", "type"]);
    let mut stats = CsvTable::new(&[
        "replica",
        "tmrca",
        "mean_pair_distance",
        "mean_transformed_distance",
        "censored_pairs",
    ]);
    let mut balls = CsvTable::new(&["replica", "radius", "classes", "largest_fraction"]);
    for (r, rep) in results.iter().enumerate() {
        let s = &rep.sample;
        let mut censored = 0u64;
        for i in 0..s.n() {
            for j in i + 1..s.n() {
                let cens = s.is_censored(i, j);
                censored += u64::from(cens);
                dist.push(vec![
                    r.to_string(),
                    i.to_string(),
                    j.to_string(),
                    num(s.dist(i, j)),
                    cens.to_string(),
                ]);
            }
        }
        for (i, m) in s.marks().iter().enumerate() {
            marks.push(vec![
                r.to_string(),
                i.to_string(),
                m.site.to_string(),
                int(m.ty),
            ]);
        }
        let t = match rep.tmrca {
            Tmrca::Time(t) => num(t),
            Tmrca::NoMrca => "inf".into(),
        };
        stats.push(vec![
            r.to_string(),
            t,
            num(rep.mean_distance),
            num(rep.mean_transformed),
            int(censored),
        ]);
        for &(h, k, f) in &rep.balls {
            balls.push(vec![r.to_string(), num(h), k.to_string(), num(f)]);
        }
    }
    let mut artifacts = Artifacts::default();
    artifacts.csv("distances.csv", &dist);
    artifacts.csv("marks.csv", &marks);
    artifacts.csv("stats.csv", &stats);
    if !g.radii.is_empty() {
        artifacts.csv("balls.csv", &balls);
    }
    let diagnostics = json!({
        "cannings": truncation_json(template.counts(), &template),
        "genealogy": {
            "censored_samples": results.iter().filter(|r| r.sample.any_censored()).count(),
        },
        "budget": budget_json("events", per_replica, cap, config.replicas, n),
    });
    Ok(KindOutput {
        artifacts,
        completed: n,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_times_include_endpoint() {
        assert_eq!(record_times(1.0, 0.5), vec![0.0, 0.5, 1.0]);
        assert_eq!(
            record_times(1.0, 0.3),
            vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]
        );
        assert_eq!(record_times(0.0, 1.0), vec![0.0]);
    }

    #[test]
    fn affordable_prefix() {
        assert_eq!(affordable(10.0, Some(35.0), 8), 3);
        assert_eq!(affordable(10.0, None, 8), 8);
        assert_eq!(affordable(0.0, Some(0.0), 8), 8);
        assert_eq!(affordable(10.0, Some(1e9), 8), 8);
    }
}

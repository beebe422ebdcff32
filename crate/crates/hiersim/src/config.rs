//! Experiment configuration: TOML parsing, defaults, validation and hashing.
//!
//! Every block has explicit defaults, so the canonical form of a parsed
//! configuration lists every setting that influences a run. Unknown keys are
//! found by comparing the input table against the canonical form, which
//! catches them at any nesting depth, inside tagged blocks as well.

use hiersim_core::cannings::{BlockLevel, CanningsParams, ContinuousPart, LambdaMeasure};
use hiersim_core::dynamics::{DynamicsParams, McKeanVlasovParams, Scheme, SeedbankParams};
use hiersim_core::fss::{FssExperiment, FssGeometry, FssModel, GreenSettings, InitialLaw};
use hiersim_core::geometry::{GeographySpec, Step};
use hiersim_core::renorm::{
    ChainEngine, ChainSpec, Colours, RenormParams, SeedbankSpec, SeedbankTailParams, Sequence,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    DiffusionRun,
    CanningsRun,
    MckeanVlasov,
    InteractionChain,
    Dichotomy,
    SeedbankTail,
    SeedbankRegime,
    Fss,
    GenealogyStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Block {
    Geometry,
    Dynamics,
    Cannings,
    MckeanVlasov,
    Renorm,
    Chain,
    Seedbank,
    Fss,
    Genealogy,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::Geometry,
        Block::Dynamics,
        Block::Cannings,
        Block::MckeanVlasov,
        Block::Renorm,
        Block::Chain,
        Block::Seedbank,
        Block::Fss,
        Block::Genealogy,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Block::Geometry => "geometry",
            Block::Dynamics => "dynamics",
            Block::Cannings => "cannings",
            Block::MckeanVlasov => "mckean_vlasov",
            Block::Renorm => "renorm",
            Block::Chain => "chain",
            Block::Seedbank => "seedbank",
            Block::Fss => "fss",
            Block::Genealogy => "genealogy",
        }
    }
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::DiffusionRun,
        ExperimentKind::CanningsRun,
        ExperimentKind::MckeanVlasov,
        ExperimentKind::InteractionChain,
        ExperimentKind::Dichotomy,
        ExperimentKind::SeedbankTail,
        ExperimentKind::SeedbankRegime,
        ExperimentKind::Fss,
        ExperimentKind::GenealogyStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DiffusionRun => "diffusion-run",
            ExperimentKind::CanningsRun => "cannings-run",
            ExperimentKind::MckeanVlasov => "mckean-vlasov",
            ExperimentKind::InteractionChain => "interaction-chain",
            ExperimentKind::Dichotomy => "dichotomy",
            ExperimentKind::SeedbankTail => "seedbank-tail",
            ExperimentKind::SeedbankRegime => "seedbank-regime",
            ExperimentKind::Fss => "fss",
            ExperimentKind::GenealogyStats => "genealogy-stats",
        }
    }

    pub fn required(self) -> &'static [Block] {
        match self {
            ExperimentKind::DiffusionRun => &[Block::Geometry, Block::Dynamics],
            ExperimentKind::CanningsRun => &[Block::Geometry, Block::Cannings],
            ExperimentKind::MckeanVlasov => &[Block::MckeanVlasov],
            ExperimentKind::InteractionChain => &[Block::Chain],
            ExperimentKind::Dichotomy => &[Block::Renorm],
            ExperimentKind::SeedbankTail => &[Block::Seedbank],
            ExperimentKind::SeedbankRegime => &[Block::Geometry, Block::Seedbank],
            ExperimentKind::Fss => &[Block::Fss],
            ExperimentKind::GenealogyStats => &[Block::Geometry, Block::Cannings, Block::Genealogy],
        }
    }

    pub fn optional(self) -> &'static [Block] {
        match self {
            ExperimentKind::DiffusionRun => &[Block::Seedbank],
            _ => &[],
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            ExperimentKind::DiffusionRun => {
                "Interacting Fleming-Viot diffusion (or the coloured seedbank system when a seedbank block is \
                 given) on a geography. Writes per-site trajectories and per-replica summaries."
            }
            ExperimentKind::CanningsRun => {
                "Event-driven Cannings particle system with Λ-resampling and block resampling. Writes type-0 \
                 frequencies per site and the ancestry log."
            }
            ExperimentKind::MckeanVlasov => {
                "Single-site McKean-Vlasov process. Writes trajectories and optional time-average equilibrium \
                 estimates of E[x(1-x)]."
            }
            ExperimentKind::InteractionChain => {
                "Samples of the interaction chain M_{-(j+1)} = θ, ..., M_0 with Beta or simulated transitions."
            }
            ExperimentKind::Dichotomy => {
                "Clustering versus local coexistence for a list or grid of (c_k, λ_k) families. Deterministic."
            }
            ExperimentKind::SeedbankTail => {
                "Wake-up time tail of a seedbank, with optional Monte Carlo draws and Hill estimates."
            }
            ExperimentKind::SeedbankRegime => "Long-time regime of the seedbank system on the given migration walk.",
            ExperimentKind::Fss => {
                "Finite system scheme: moments of the empirical mean along a size ladder against the macroscopic \
                 diffusion."
            }
            ExperimentKind::GenealogyStats => {
                "Genealogies sampled from a Cannings system: distance matrices, tMRCA, ball decompositions and \
                 polynomial statistics."
            }
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cannings: Option<CanningsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mckean_vlasov: Option<McKeanVlasovConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub renorm: Option<RenormConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seedbank: Option<SeedbankConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fss: Option<FssConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genealogy: Option<GenealogyConfig>,
}

fn one_usize() -> usize {
    1
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Output directory; `--out-dir` overrides it. Not part of the config hash.
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Write per-site or per-replica trajectories.
    #[serde(default = "yes")]
    pub trajectories: bool,
    /// Write the ancestry log of Cannings runs.
    #[serde(default = "yes")]
    pub ancestry: bool,
}

fn default_dir() -> String {
    "hiersim-out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            trajectories: true,
            ancestry: true,
        }
    }
}

/// Compute caps. Site steps count one unit per site, component and time
/// step; events count expected particle events or random draws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_site_steps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum GeometryConfig {
    Hier {
        branching: u32,
        levels: u32,
        rates: Vec<f64>,
    },
    Torus {
        dim: u32,
        half_width: u32,
        #[serde(default = "one")]
        rate: f64,
        /// Empty means nearest-neighbour steps.
        #[serde(default)]
        steps: Vec<StepConfig>,
    },
    MeanField {
        sites: u32,
        #[serde(default = "one")]
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub offset: Vec<i64>,
    pub prob: f64,
}

impl GeometryConfig {
    pub fn spec(&self) -> hiersim_core::Result<GeographySpec> {
        match self {
            GeometryConfig::Hier {
                branching,
                levels,
                rates,
            } => GeographySpec::hier(*branching, *levels, rates.clone()),
            GeometryConfig::Torus {
                dim,
                half_width,
                rate,
                steps,
            } => {
                if steps.is_empty() {
                    let GeographySpec::Torus { steps, .. } =
                        GeographySpec::simple_torus(*dim, *half_width)?
                    else {
                        unreachable!()
                    };
                    GeographySpec::torus(*dim, *half_width, steps, *rate)
                } else {
                    let steps = steps
                        .iter()
                        .map(|s| Step {
                            offset: s.offset.clone(),
                            prob: s.prob,
                        })
                        .collect();
                    GeographySpec::torus(*dim, *half_width, steps, *rate)
                }
            }
            GeometryConfig::MeanField { sites, rate } => GeographySpec::mean_field(*sites, *rate),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeConfig {
    #[default]
    Euler,
    BoundaryExact,
}

impl From<SchemeConfig> for Scheme {
    fn from(s: SchemeConfig) -> Self {
        match s {
            SchemeConfig::Euler => Scheme::Euler,
            SchemeConfig::BoundaryExact => Scheme::BoundaryExact,
        }
    }
}

/// Initial law of a spatial system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialLawConfig {
    /// Every site at the initial frequency vector.
    #[default]
    Constant,
    /// Each site monotype, its type drawn from the initial frequencies.
    Monotype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    #[serde(default = "one")]
    pub resampling: f64,
    #[serde(default = "one")]
    pub migration: f64,
    #[serde(default)]
    pub mutation: f64,
    #[serde(default)]
    pub mutation_kernel: Vec<Vec<f64>>,
    #[serde(default)]
    pub selection: f64,
    #[serde(default)]
    pub fitness: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "one")]
    pub t_max: f64,
    #[serde(default = "default_record")]
    pub record_every: f64,
    #[serde(default)]
    pub scheme: SchemeConfig,
    /// Type frequencies at time 0; its length sets the number of types.
    #[serde(default = "half_half")]
    pub initial: Vec<f64>,
    #[serde(default)]
    pub initial_law: InitialLawConfig,
}

fn default_dt() -> f64 {
    0.01
}

fn default_record() -> f64 {
    0.1
}

fn half_half() -> Vec<f64> {
    vec![0.5, 0.5]
}

impl DynamicsConfig {
    pub fn params(&self) -> DynamicsParams {
        DynamicsParams {
            resampling: self.resampling,
            migration: self.migration,
            mutation: self.mutation,
            mutation_kernel: self.mutation_kernel.clone(),
            selection: self.selection,
            fitness: self.fitness.clone(),
            dt: self.dt,
            scheme: self.scheme.into(),
            diffusion: None,
        }
    }

    pub fn seedbank_params(&self, colours: &Colours) -> SeedbankParams {
        SeedbankParams {
            resampling: self.resampling,
            migration: self.migration,
            exchange: colours.exchange.clone(),
            sizes: colours.sizes.clone(),
            dt: self.dt,
            residual_size: 0.0,
            diffusion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ContinuousConfig {
    #[default]
    None,
    Uniform {
        mass: f64,
    },
    Beta {
        a: f64,
        b: f64,
        mass: f64,
    },
}

/// A finite measure on `[0,1]`: Kingman mass at 0, atoms `[r, mass]` and a
/// continuous part.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaConfig {
    #[serde(default)]
    pub kingman: f64,
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub continuous: ContinuousConfig,
}

impl LambdaConfig {
    pub fn measure(&self) -> LambdaMeasure {
        LambdaMeasure {
            kingman: self.kingman,
            atoms: self.atoms.clone(),
            continuous: match self.continuous {
                ContinuousConfig::None => ContinuousPart::None,
                ContinuousConfig::Uniform { mass } => ContinuousPart::Uniform { mass },
                ContinuousConfig::Beta { a, b, mass } => ContinuousPart::Beta { a, b, mass },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub level: u32,
    pub mu: f64,
    pub lambda: LambdaConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanningsConfig {
    #[serde(default = "default_per_site")]
    pub per_site: usize,
    #[serde(default = "one")]
    pub resampling: f64,
    #[serde(default)]
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub blocks: Vec<BlockConfig>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "one")]
    pub t_max: f64,
    #[serde(default = "default_record")]
    pub record_every: f64,
    /// Initial type-0 fraction at every site.
    #[serde(default = "half")]
    pub x0: f64,
}

fn default_per_site() -> usize {
    20
}

fn default_cutoff() -> f64 {
    1e-3
}

fn half() -> f64 {
    0.5
}

impl CanningsConfig {
    pub fn params(&self) -> CanningsParams {
        CanningsParams {
            resampling: self.resampling,
            lambda: self.lambda.measure(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockLevel {
                    level: b.level,
                    mu: b.mu,
                    lambda: b.lambda.measure(),
                })
                .collect(),
            cutoff: self.cutoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumConfig {
    pub burn_in: f64,
    pub horizon: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_batches() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McKeanVlasovConfig {
    /// Immigration rate `c` towards `θ`.
    #[serde(default = "one")]
    pub immigration: f64,
    #[serde(default = "one")]
    pub resampling: f64,
    #[serde(default = "half")]
    pub theta: f64,
    #[serde(default = "half")]
    pub x0: f64,
    #[serde(default = "default_mv_dt")]
    pub dt: f64,
    #[serde(default = "default_mv_t")]
    pub t_max: f64,
    #[serde(default = "one")]
    pub record_every: f64,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaConfig>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equilibrium: Option<EquilibriumConfig>,
}

fn default_mv_dt() -> f64 {
    1e-3
}

fn default_mv_t() -> f64 {
    10.0
}

impl McKeanVlasovConfig {
    pub fn params(&self) -> McKeanVlasovParams {
        McKeanVlasovParams {
            immigration: self.immigration,
            local: DynamicsParams::neutral(self.resampling, 0.0, self.dt),
            lambda: self.lambda.as_ref().map(|l| (l.measure(), self.cutoff)),
            scheme: self.scheme.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SequenceConfig {
    /// `scale · ratio^k`.
    Geometric { scale: f64, ratio: f64 },
    /// Finitely many explicit terms.
    Values { values: Vec<f64> },
}

impl SequenceConfig {
    pub fn sequence(&self) -> Sequence {
        match self {
            SequenceConfig::Geometric { scale, ratio } => Sequence::Geometric {
                scale: *scale,
                ratio: *ratio,
            },
            SequenceConfig::Values { values } => Sequence::Values(values.clone()),
        }
    }
}

fn zero_sequence() -> SequenceConfig {
    SequenceConfig::Geometric {
        scale: 0.0,
        ratio: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCase {
    pub c: SequenceConfig,
    #[serde(default = "zero_sequence")]
    pub lambda: SequenceConfig,
}

/// Product grid of geometric families `c_k = c_scale · r^k`,
/// `λ_k = s · q^k` over `r ∈ c_ratios`, `s ∈ lambda_scales`,
/// `q ∈ lambda_ratios`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyGrid {
    #[serde(default = "one")]
    pub c_scale: f64,
    pub c_ratios: Vec<f64>,
    #[serde(default = "zero_vec")]
    pub lambda_scales: Vec<f64>,
    #[serde(default = "one_vec")]
    pub lambda_ratios: Vec<f64>,
}

fn zero_vec() -> Vec<f64> {
    vec![0.0]
}

fn one_vec() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormConfig {
    #[serde(default = "one")]
    pub d0: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub cases: Vec<DichotomyCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<DichotomyGrid>,
}

fn default_horizon() -> usize {
    200
}

impl RenormConfig {
    /// Explicit cases first, then the grid in row-major order
    /// (c ratio, λ scale, λ ratio).
    pub fn all_cases(&self) -> Vec<DichotomyCase> {
        let mut out = self.cases.clone();
        if let Some(g) = &self.grid {
            for &r in &g.c_ratios {
                for &s in &g.lambda_scales {
                    for &q in &g.lambda_ratios {
                        out.push(DichotomyCase {
                            c: SequenceConfig::Geometric {
                                scale: g.c_scale,
                                ratio: r,
                            },
                            lambda: SequenceConfig::Geometric { scale: s, ratio: q },
                        });
                    }
                }
            }
        }
        out
    }

    pub fn params(&self, case: &DichotomyCase) -> RenormParams {
        RenormParams {
            c: case.c.sequence(),
            lambda: case.lambda.sequence(),
            d0: self.d0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ChainEngineConfig {
    #[default]
    Beta,
    Simulated {
        burn_in: f64,
        dt: f64,
        #[serde(default = "default_cutoff")]
        cutoff: f64,
    },
}

impl From<ChainEngineConfig> for ChainEngine {
    fn from(e: ChainEngineConfig) -> Self {
        match e {
            ChainEngineConfig::Beta => ChainEngine::Beta,
            ChainEngineConfig::Simulated {
                burn_in,
                dt,
                cutoff,
            } => ChainEngine::Simulated {
                burn_in,
                dt,
                cutoff,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(default = "half")]
    pub theta: f64,
    #[serde(default = "one_usize")]
    pub j: usize,
    pub c: SequenceConfig,
    #[serde(default = "zero_sequence")]
    pub lambda: SequenceConfig,
    /// Level-0 volatility `σ_0` (quadratic variation `σ x(1−x)`).
    #[serde(default = "two")]
    pub sigma0: f64,
    #[serde(default)]
    pub engine: ChainEngineConfig,
}

fn two() -> f64 {
    2.0
}

impl ChainConfig {
    pub fn spec(&self) -> hiersim_core::Result<ChainSpec> {
        ChainSpec::from_recursion(
            &self.c.sequence(),
            &self.lambda.sequence(),
            self.sigma0,
            self.j,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SeedbankModelConfig {
    /// `K_m = a m^{−α}`, `e_m = b m^{−β}` for `m = 1, …, m_max`.
    PowerLaw {
        a: f64,
        b: f64,
        alpha: f64,
        beta: f64,
        m_max: usize,
    },
    Colours {
        sizes: Vec<f64>,
        exchange: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedbankConfig {
    pub model: SeedbankModelConfig,
    /// Times at which the wake-up tail is evaluated.
    #[serde(default = "default_tail_grid")]
    pub grid: Vec<f64>,
    /// Wake-up draws per replica (0 skips the Monte Carlo part).
    #[serde(default)]
    pub samples: usize,
    /// Order statistics used by the Hill estimator; 0 means `samples/100`.
    #[serde(default)]
    pub hill_k: usize,
    /// Horizon of the Green-type integral when the walk is not recognized.
    #[serde(default = "default_regime_horizon")]
    pub regime_horizon: f64,
}

fn default_tail_grid() -> Vec<f64> {
    vec![1.0, 10.0, 100.0, 1000.0]
}

fn default_regime_horizon() -> f64 {
    1000.0
}

impl SeedbankConfig {
    pub fn spec(&self) -> SeedbankSpec {
        match &self.model {
            SeedbankModelConfig::PowerLaw {
                a,
                b,
                alpha,
                beta,
                m_max,
            } => SeedbankSpec::PowerLaw(SeedbankTailParams {
                a: *a,
                b: *b,
                alpha: *alpha,
                beta: *beta,
                m_max: *m_max,
            }),
            SeedbankModelConfig::Colours { sizes, exchange } => SeedbankSpec::Colours(Colours {
                sizes: sizes.clone(),
                exchange: exchange.clone(),
            }),
        }
    }

    pub fn hill_order(&self) -> usize {
        if self.hill_k > 0 {
            self.hill_k
        } else {
            (self.samples / 100).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FssModelKind {
    #[default]
    FisherWright,
    Seedbank,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FssGeometryKind {
    #[default]
    MeanField,
    Torus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FssInitialConfig {
    #[default]
    Constant,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FssConfig {
    #[serde(default)]
    pub model: FssModelKind,
    #[serde(default)]
    pub geometry: FssGeometryKind,
    /// Torus dimension.
    #[serde(default = "one_u32")]
    pub dim: u32,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "one")]
    pub d: f64,
    /// Seedbank exchange rates `e_m`.
    #[serde(default)]
    pub exchange: Vec<f64>,
    /// Seedbank relative sizes `K_m`.
    #[serde(default)]
    pub sizes: Vec<f64>,
    pub ladder: Vec<u32>,
    #[serde(default = "half")]
    pub theta0: f64,
    #[serde(default)]
    pub initial: FssInitialConfig,
    pub times: Vec<f64>,
    #[serde(default = "default_fss_dt")]
    pub dt: f64,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default = "one")]
    pub qv_interval: f64,
    #[serde(default = "default_green_replicas")]
    pub green_replicas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub green_horizon: Option<f64>,
}

fn one_u32() -> u32 {
    1
}

fn default_fss_dt() -> f64 {
    0.02
}

fn default_green_replicas() -> usize {
    200
}

impl FssConfig {
    pub fn experiment(&self, replicas: usize, max_site_steps: Option<f64>) -> FssExperiment {
        let model = match self.model {
            FssModelKind::FisherWright => FssModel::FisherWright {
                geometry: match self.geometry {
                    FssGeometryKind::MeanField => FssGeometry::MeanField,
                    FssGeometryKind::Torus => FssGeometry::Torus { dim: self.dim },
                },
                c: self.c,
                d: self.d,
            },
            FssModelKind::Seedbank => FssModel::Seedbank {
                c: self.c,
                d: self.d,
                exchange: self.exchange.clone(),
                sizes: self.sizes.clone(),
            },
        };
        FssExperiment {
            model,
            ladder: self.ladder.clone(),
            theta0: self.theta0,
            initial: match self.initial {
                FssInitialConfig::Constant => InitialLaw::Constant,
                FssInitialConfig::Bernoulli => InitialLaw::Bernoulli,
            },
            times: self.times.clone(),
            replicas,
            dt: self.dt,
            scheme: self.scheme.into(),
            qv_interval: self.qv_interval,
            green: GreenSettings {
                replicas: self.green_replicas,
                horizon: self.green_horizon,
            },
            max_site_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenealogyConfig {
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Sampling time; the Cannings system is run up to it.
    pub time: f64,
    #[serde(default)]
    pub with_replacement: bool,
    /// Restrict sampling to these sites.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sites: Option<Vec<usize>>,
    /// Radii `h` of the ball decompositions.
    #[serde(default)]
    pub radii: Vec<f64>,
    /// Divide distances by the number of sites.
    #[serde(default)]
    pub rescale: bool,
    /// Random tuples for the polynomial statistics when enumeration is too large.
    #[serde(default = "default_draws")]
    pub poly_draws: usize,
}

fn default_sample_size() -> usize {
    10
}

fn default_draws() -> usize {
    100_000
}

/// All problems found in a configuration.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigErrors(pub Vec<String>);

/// Parses, fills defaults and validates. Reports every unknown key and every
/// constraint violation found; syntax and type errors stop parsing early.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigErrors(vec![e.to_string()]))?;
    let config: ExperimentConfig = table
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| ConfigErrors(vec![e.message().trim().to_string()]))?;
    let canonical =
        toml::Table::try_from(&config).map_err(|e| ConfigErrors(vec![e.to_string()]))?;
    let mut errors = Vec::new();
    unknown_keys(&table, &canonical, "", &mut errors);
    errors.extend(config.validate());
    if errors.is_empty() {
        Ok(config)
    } else {
        Err(ConfigErrors(errors))
    }
}

fn unknown_keys(input: &toml::Table, known: &toml::Table, path: &str, errors: &mut Vec<String>) {
    for (key, value) in input {
        let here = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match known.get(key) {
            None => errors.push(format!("unknown key `{here}`")),
            Some(k) => unknown_in_value(value, k, &here, errors),
        }
    }
}

fn unknown_in_value(
    input: &toml::Value,
    known: &toml::Value,
    path: &str,
    errors: &mut Vec<String>,
) {
    match (input, known) {
        (toml::Value::Table(a), toml::Value::Table(b)) => unknown_keys(a, b, path, errors),
        (toml::Value::Array(a), toml::Value::Array(b)) => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                unknown_in_value(x, y, &format!("{path}[{i}]"), errors);
            }
        }
        _ => {}
    }
}

fn check(errors: &mut Vec<String>, block: &str, ok: bool, msg: impl std::fmt::Display) {
    if !ok {
        errors.push(format!("{block}: {msg}"));
    }
}

fn core(errors: &mut Vec<String>, block: &str, r: hiersim_core::Result<()>) {
    if let Err(e) = r {
        errors.push(format!("{block}: {e}"));
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn nonneg(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

fn check_horizon(errors: &mut Vec<String>, block: &str, dt: f64, t_max: f64, record_every: f64) {
    check(errors, block, positive(dt), "dt must be positive");
    check(
        errors,
        block,
        nonneg(t_max),
        "t_max must be finite and >= 0",
    );
    check(
        errors,
        block,
        positive(record_every),
        "record_every must be positive",
    );
}

impl ExperimentConfig {
    /// Minimal configuration of the given kind with every block defaulted.
    pub fn example(kind: ExperimentKind) -> Self {
        let mut c = Self {
            kind,
            seed: 1,
            replicas: 4,
            output: OutputConfig::default(),
            budget: BudgetConfig::default(),
            geometry: None,
            dynamics: None,
            cannings: None,
            mckean_vlasov: None,
            renorm: None,
            chain: None,
            seedbank: None,
            fss: None,
            genealogy: None,
        };
        let hier = GeometryConfig::Hier {
            branching: 3,
            levels: 2,
            rates: vec![1.0, 0.5],
        };
        let text = match kind {
            ExperimentKind::DiffusionRun => "[dynamics]\n",
            ExperimentKind::CanningsRun => "[cannings]\nper_site = 10\n",
            ExperimentKind::MckeanVlasov => "[mckean_vlasov]\nt_max = 2.0\n",
            ExperimentKind::InteractionChain => "[chain]\nc = { type = \"geometric\", scale = 1.0, ratio = 2.0 }\n",
            ExperimentKind::Dichotomy => "[renorm.grid]\nc_ratios = [0.5, 1.0, 2.0]\nlambda_scales = [0.0, 1.0]\n",
            ExperimentKind::SeedbankTail => {
                "[seedbank]\nsamples = 10000\nhill_k = 100\n[seedbank.model]\ntype = \"power-law\"\na = 1.0\nb = 1.0\n\
                 alpha = 0.5\nbeta = 1.0\nm_max = 1000000\n"
            }
            ExperimentKind::SeedbankRegime => {
                "[seedbank.model]\ntype = \"colours\"\nsizes = [1.0]\nexchange = [1.0]\n"
            }
            ExperimentKind::Fss => "[fss]\nladder = [10, 20]\ntimes = [0.0, 0.5, 1.0]\nscheme = \"boundary-exact\"\n",
            ExperimentKind::GenealogyStats => "[cannings]\nper_site = 10\n[genealogy]\ntime = 50.0\nradii = [0.25, 1.0]\n",
        };
        let blocks: ExperimentConfig =
            toml::from_str(&format!("kind = \"{kind}\"\n{text}")).expect("example");
        c.dynamics = blocks.dynamics;
        c.cannings = blocks.cannings;
        c.mckean_vlasov = blocks.mckean_vlasov;
        c.renorm = blocks.renorm;
        c.chain = blocks.chain;
        c.seedbank = blocks.seedbank;
        c.fss = blocks.fss;
        c.genealogy = blocks.genealogy;
        if kind.required().contains(&Block::Geometry) {
            c.geometry = Some(hier);
        }
        c
    }

    fn has(&self, b: Block) -> bool {
        match b {
            Block::Geometry => self.geometry.is_some(),
            Block::Dynamics => self.dynamics.is_some(),
            Block::Cannings => self.cannings.is_some(),
            Block::MckeanVlasov => self.mckean_vlasov.is_some(),
            Block::Renorm => self.renorm.is_some(),
            Block::Chain => self.chain.is_some(),
            Block::Seedbank => self.seedbank.is_some(),
            Block::Fss => self.fss.is_some(),
            Block::Genealogy => self.genealogy.is_some(),
        }
    }

    /// Every constraint violation, in block order.
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        let kind = self.kind;
        for b in Block::ALL {
            let needed = kind.required().contains(&b);
            let allowed = needed || kind.optional().contains(&b);
            if needed && !self.has(b) {
                e.push(format!(
                    "missing required block [{}] for kind {kind}",
                    b.key()
                ));
            }
            if !allowed && self.has(b) {
                e.push(format!("block [{}] is not used by kind {kind}", b.key()));
            }
        }
        if self.replicas >= 1 << 48 {
            e.push("replicas: too many replicas".into());
        }
        for (name, cap) in [
            ("max_site_steps", self.budget.max_site_steps),
            ("max_events", self.budget.max_events),
        ] {
            if let Some(v) = cap {
                check(
                    &mut e,
                    "budget",
                    v.is_finite() && v >= 0.0,
                    format!("{name} must be finite and >= 0"),
                );
            }
        }
        if let Some(g) = &self.geometry {
            core(&mut e, "geometry", g.spec().map(|_| ()));
        }
        if let Some(d) = &self.dynamics {
            self.validate_dynamics(d, &mut e);
        }
        if let Some(s) = &self.seedbank {
            core(&mut e, "seedbank", s.spec().colours().map(|_| ()));
            check(
                &mut e,
                "seedbank",
                s.grid.iter().all(|t| nonneg(*t)),
                "grid times must be finite and >= 0",
            );
            check(
                &mut e,
                "seedbank",
                positive(s.regime_horizon),
                "regime_horizon must be positive",
            );
            if s.samples > 0 {
                check(
                    &mut e,
                    "seedbank",
                    s.hill_order() < s.samples,
                    "hill_k must be below samples",
                );
            }
        }
        if let Some(c) = &self.cannings {
            self.validate_cannings(c, &mut e);
        }
        if let Some(m) = &self.mckean_vlasov {
            let b = "mckean_vlasov";
            check_horizon(&mut e, b, m.dt, m.t_max, m.record_every);
            check(
                &mut e,
                b,
                (0.0..=1.0).contains(&m.theta),
                "theta must lie in [0,1]",
            );
            check(
                &mut e,
                b,
                (0.0..=1.0).contains(&m.x0),
                "x0 must lie in [0,1]",
            );
            check(
                &mut e,
                b,
                nonneg(m.immigration),
                "immigration must be finite and >= 0",
            );
            check(
                &mut e,
                b,
                nonneg(m.resampling),
                "resampling must be finite and >= 0",
            );
            if let Some(l) = &m.lambda {
                core(&mut e, b, l.measure().validate());
                check(
                    &mut e,
                    b,
                    m.cutoff > 0.0 && m.cutoff < 1.0,
                    "cutoff must lie in (0,1)",
                );
            }
            if m.scheme == SchemeConfig::BoundaryExact && m.lambda.is_some() {
                e.push(format!(
                    "{b}: the boundary-exact scheme does not support Λ-jumps"
                ));
            }
            if let Some(q) = &m.equilibrium {
                check(
                    &mut e,
                    b,
                    nonneg(q.burn_in),
                    "equilibrium.burn_in must be >= 0",
                );
                check(
                    &mut e,
                    b,
                    positive(q.horizon),
                    "equilibrium.horizon must be positive",
                );
                check(
                    &mut e,
                    b,
                    q.batches >= 2,
                    "equilibrium.batches must be >= 2",
                );
            }
        }
        if let Some(r) = &self.renorm {
            let cases = r.all_cases();
            check(
                &mut e,
                "renorm",
                !cases.is_empty(),
                "no cases: give `cases` or `grid`",
            );
            check(&mut e, "renorm", r.horizon >= 2, "horizon must be >= 2");
            for (i, case) in cases.iter().enumerate() {
                core(
                    &mut e,
                    &format!("renorm case {i}"),
                    r.params(case).validate(),
                );
            }
        }
        if let Some(c) = &self.chain {
            check(
                &mut e,
                "chain",
                (0.0..=1.0).contains(&c.theta),
                "theta must lie in [0,1]",
            );
            core(&mut e, "chain", c.spec().map(|_| ()));
            if let ChainEngineConfig::Simulated {
                burn_in,
                dt,
                cutoff,
            } = c.engine
            {
                check(&mut e, "chain", positive(dt), "engine.dt must be positive");
                check(
                    &mut e,
                    "chain",
                    nonneg(burn_in),
                    "engine.burn_in must be >= 0",
                );
                check(
                    &mut e,
                    "chain",
                    cutoff > 0.0 && cutoff < 1.0,
                    "engine.cutoff must lie in (0,1)",
                );
            }
        }
        if let Some(f) = &self.fss {
            let exp = f.experiment(self.replicas.max(1), None);
            core(&mut e, "fss", exp.validate());
            check(
                &mut e,
                "fss",
                f.green_replicas >= 1,
                "green_replicas must be >= 1",
            );
        }
        if let Some(g) = &self.genealogy {
            let b = "genealogy";
            check(&mut e, b, g.sample_size >= 2, "sample_size must be >= 2");
            check(&mut e, b, nonneg(g.time), "time must be finite and >= 0");
            check(
                &mut e,
                b,
                g.radii.iter().all(|h| positive(*h)),
                "radii must be positive",
            );
            if let (Some(sites), Some(geo)) = (&g.sites, &self.geometry) {
                if let Ok(spec) = geo.spec() {
                    let n = spec.site_count();
                    check(&mut e, b, !sites.is_empty(), "sites must not be empty");
                    check(
                        &mut e,
                        b,
                        sites.iter().all(|s| *s < n),
                        "sampling site outside the geography",
                    );
                }
            }
            if let Some(c) = &self.cannings {
                let pool = match &g.sites {
                    Some(s) => s.len() * c.per_site,
                    None => {
                        self.geometry
                            .as_ref()
                            .and_then(|g| g.spec().ok())
                            .map_or(0, |s| s.site_count())
                            * c.per_site
                    }
                };
                check(
                    &mut e,
                    b,
                    g.with_replacement || g.sample_size <= pool,
                    "sample_size exceeds the sampled population",
                );
            }
        }
        e
    }

    fn validate_dynamics(&self, d: &DynamicsConfig, e: &mut Vec<String>) {
        let b = "dynamics";
        check_horizon(e, b, d.dt, d.t_max, d.record_every);
        let types = d.initial.len();
        check(
            e,
            b,
            types >= 2,
            "initial needs at least two type frequencies",
        );
        check(
            e,
            b,
            d.initial.iter().all(|v| (0.0..=1.0).contains(v))
                && (d.initial.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            "initial must be a probability vector",
        );
        if let Some(s) = &self.seedbank {
            check(e, b, types == 2, "the seedbank system has two types");
            check(
                e,
                b,
                d.mutation == 0.0 && d.selection == 0.0,
                "the seedbank system is neutral (no mutation or selection)",
            );
            check(
                e,
                b,
                d.scheme == SchemeConfig::Euler,
                "the seedbank system is stepped with Euler",
            );
            if let Ok(colours) = s.spec().colours() {
                core(e, b, d.seedbank_params(&colours).validate());
            }
        } else if types >= 2 {
            core(e, b, d.params().validate(types));
        }
    }

    fn validate_cannings(&self, c: &CanningsConfig, e: &mut Vec<String>) {
        let b = "cannings";
        check_horizon(e, b, 1.0, c.t_max, c.record_every);
        check(e, b, c.per_site >= 1, "per_site must be >= 1");
        check(e, b, (0.0..=1.0).contains(&c.x0), "x0 must lie in [0,1]");
        check(
            e,
            b,
            c.cutoff > 0.0 && c.cutoff < 1.0,
            "cutoff must lie in (0,1)",
        );
        let Some(geo) = self.geometry.as_ref().and_then(|g| g.spec().ok()) else {
            core(e, b, c.lambda.measure().validate());
            return;
        };
        let sites = geo.site_count() as f64 * c.per_site as f64;
        if sites > 1e8 {
            e.push(format!(
                "{b}: population of {sites} individuals is too large"
            ));
            return;
        }
        core(
            e,
            b,
            hiersim_core::cannings::ParticleSystem::two_type(geo, c.params(), c.per_site, c.x0)
                .map(|_| ()),
        );
    }

    /// Canonical TOML text; re-parsing it gives the same configuration.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Canonical JSON text with all defaults filled in.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes to JSON")
    }

    /// SHA-256 of the canonical JSON with `output.dir` blanked, as hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir.clear();
        hex::encode(Sha256::digest(c.canonical_json().as_bytes()))
    }
}

//! Experiment configuration and the command runner behind the CLI.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoding::{
    commutator, derive_seed, stress_test, DecodeState, Divergence, Scheduler, StressConfig, UpdateOperator,
};
use crate::dependence::{dependence_report, total_correlation};
use crate::error::{cap, contract, Error, Result};
use crate::math::entropy_from_log;
use crate::model::{decode_row_major, ConditionalOracle, Model, ModelFile, PartialContext, Perturbation, PerturbedConditionalModel};
use crate::order_error::{order_cross_entropy, rank_orders, stratify_contexts};
use crate::pseudo_joint::{
    curl_scan, inverse_cdf, order_consistency_check, planned_samples, swap_decomposition, SamplingPlan, SwapPath,
    DEFAULT_CONSISTENCY_TOL, DEFAULT_EPSILON,
};
use crate::report::{
    CommutatorEntry, CommutatorRow, ConsistencyEntry, CurlSampleRow, CurlScanEntry, DependenceEntry,
    DiagnosticReport, ModelSummary, OrderErrorEntry, OrderErrorSection, OrderGapEntry, OrderGapRow, SynthSection,
    TrainSection, WallClock,
};
use crate::synthetic::{
    context_patterns, generate_joint, mean_ecirc_over_patterns, train_tabular, PatternKind, SyntheticTaskSpec,
    TrainConfig, TrainedTabularOracle,
};

/// Largest number of block assignments the order-gap section enumerates.
pub const MAX_ORDER_GAP_ASSIGNMENTS: usize = 4096;

/// Where the model under diagnosis comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    File {
        path: PathBuf,
    },
    /// A generated joint, diagnosed as its Bayes oracle unless a perturbation
    /// or a training config is given.
    Synthetic {
        task: SyntheticTaskSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perturbation: Option<Perturbation>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train: Option<TrainConfig>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContextSource {
    /// One context: nothing observed, every position in the block.
    #[default]
    FullBlock,
    Explicit { contexts: Vec<PartialContext> },
    /// `count` contexts, each observing `observed` positions of a draw from
    /// the joint.
    Sampled { count: usize, observed: usize },
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_tolerance() -> f64 {
    DEFAULT_CONSISTENCY_TOL
}
fn default_plan() -> SamplingPlan {
    SamplingPlan::Exhaustive
}
fn default_operator() -> UpdateOperator {
    UpdateOperator::SampleCommit
}
fn default_widths() -> Vec<usize> {
    vec![1, 2]
}
fn default_schedulers() -> Vec<Scheduler> {
    vec![Scheduler::LeftToRight, Scheduler::Confidence]
}
fn default_runs() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurlScanParams {
    #[serde(default = "default_plan")]
    pub plan: SamplingPlan,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for CurlScanParams {
    fn default() -> Self {
        Self { plan: default_plan(), epsilon: default_epsilon() }
    }
}

/// Start and end orders default to the sorted block and its reverse; the
/// path defaults to bubble sort between them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderGapParams {
    #[serde(default)]
    pub start: Option<Vec<usize>>,
    #[serde(default)]
    pub end: Option<Vec<usize>>,
    /// Explicit swap slots; overrides `end`.
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
    /// Block assignments to decompose; all of them when absent.
    #[serde(default)]
    pub assignments: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderErrorParams {
    /// Orders to rank; every order of the block when absent.
    #[serde(default)]
    pub candidates: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommutatorParams {
    #[serde(default = "default_operator")]
    pub operator: UpdateOperator,
    /// Pairs to compare; every block pair when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl Default for CommutatorParams {
    fn default() -> Self {
        Self { operator: default_operator(), pairs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressParams {
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_schedulers")]
    pub schedulers: Vec<Scheduler>,
    #[serde(default = "default_operator")]
    pub operator: UpdateOperator,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

impl Default for StressParams {
    fn default() -> Self {
        Self {
            widths: default_widths(),
            schedulers: default_schedulers(),
            operator: default_operator(),
            runs: default_runs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyParams {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self { tolerance: default_tolerance() }
    }
}

/// Per-diagnostic parameters; a missing entry means defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    #[serde(default)]
    pub curl_scan: CurlScanParams,
    #[serde(default)]
    pub order_gap: OrderGapParams,
    #[serde(default)]
    pub order_error: OrderErrorParams,
    #[serde(default)]
    pub commutator: CommutatorParams,
    #[serde(default)]
    pub stress: StressParams,
    #[serde(default)]
    pub consistency: ConsistencyParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub contexts: ContextSource,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the CLI's `--out` wins over it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses JSON, mapping every failure (syntax, unknown field, type) to
    /// [`Error::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CurlScan,
    OrderGap,
    Tc,
    OrderError,
    Commutator,
    Stress,
    SynthGen,
    Train,
    Consistency,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::CurlScan,
        Command::OrderGap,
        Command::Tc,
        Command::OrderError,
        Command::Commutator,
        Command::Stress,
        Command::SynthGen,
        Command::Train,
        Command::Consistency,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Command::CurlScan => "curl-scan",
            Command::OrderGap => "order-gap",
            Command::Tc => "tc",
            Command::OrderError => "order-error",
            Command::Commutator => "commutator",
            Command::Stress => "stress",
            Command::SynthGen => "synth-gen",
            Command::Train => "train",
            Command::Consistency => "consistency",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// Everything a command produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: DiagnosticReport,
    /// Model file to write next to the report (`synth-gen` and `train`).
    pub model_file: Option<ModelFile>,
}

struct Loaded {
    model: Model,
    trained: Option<TrainedTabularOracle>,
}

fn load_model(source: &ModelSource) -> Result<Loaded> {
    match source {
        ModelSource::File { path } => Ok(Loaded { model: Model::load(path)?, trained: None }),
        ModelSource::Synthetic { task, perturbation, train } => {
            let joint = generate_joint(task)?;
            match (perturbation, train) {
                (Some(_), Some(_)) => Err(Error::Config("a synthetic model takes a perturbation or a train config, not both".into())),
                (Some(p), None) => Ok(Loaded {
                    model: Model::Perturbed(PerturbedConditionalModel::new(joint, p.delta, p.seed)?),
                    trained: None,
                }),
                (None, Some(cfg)) => {
                    let trained = train_tabular(&joint, cfg)?;
                    Ok(Loaded { model: Model::Trained { joint, table: trained.table.clone() }, trained: Some(trained) })
                }
                (None, None) => Ok(Loaded { model: Model::Bayes(joint), trained: None }),
            }
        }
    }
}

/// Resolves the context list. Sampled contexts draw a full assignment from the
/// joint and a uniformly random observed set, seeded by `seed`.
pub fn resolve_contexts(source: &ContextSource, model: &Model, seed: u64) -> Result<Vec<PartialContext>> {
    let joint = model.joint();
    let m = joint.positions();
    let contexts = match source {
        ContextSource::FullBlock => vec![PartialContext::full_block(m)],
        ContextSource::Explicit { contexts } => contexts.clone(),
        ContextSource::Sampled { count, observed } => {
            if *observed >= m {
                return Err(contract(format!("observing {observed} of {m} positions leaves an empty block")));
            }
            let v = joint.vocab().size();
            let mut tokens = vec![0; m];
            (0..*count)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC0, k as u64]));
                    decode_row_major(inverse_cdf(joint.log_mass(), rng.random()), v, &mut tokens);
                    let mut order: Vec<usize> = (0..m).collect();
                    order.shuffle(&mut rng);
                    let mut seen = order[..*observed].to_vec();
                    seen.sort_unstable();
                    let block = (0..m).filter(|p| !seen.contains(p)).collect();
                    PartialContext::new(seen.iter().map(|&p| (p, tokens[p])).collect(), block)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if contexts.is_empty() {
        return Err(contract("no contexts to diagnose"));
    }
    for ctx in &contexts {
        ctx.validate(joint.vocab(), m)?;
    }
    Ok(contexts)
}

fn model_summary(model: &Model) -> Result<ModelSummary> {
    let file = model.to_file();
    Ok(ModelSummary {
        kind: model.kind().into(),
        vocab_size: file.vocab_size,
        positions: file.positions,
        model_id: sha256_hex(serde_json::to_string(&file)?.as_bytes()),
    })
}

/// Runs one command on a config. Nothing is written; see
/// [`crate::report::write_artifacts`].
pub fn run(config: &ExperimentConfig, command: Command) -> Result<RunOutput> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let config_hash = config.hash()?;
    let loaded = load_model(&config.model)?;
    let model = &loaded.model;
    let contexts = resolve_contexts(&config.contexts, model, config.seed)?;
    let mut report = DiagnosticReport {
        tool_version: crate::VERSION.into(),
        command: command.label().into(),
        config_hash,
        seed: config.seed,
        model: model_summary(model)?,
        contexts: contexts.clone(),
        curl_scan: None,
        dependence: None,
        order_error: None,
        order_gap: None,
        commutator: None,
        stress: None,
        consistency: None,
        synth: None,
        train: None,
        wall_clock: WallClock::default(),
    };
    let mut model_file = None;
    let oracle = model.oracle();
    let joint = model.joint();
    let d = &config.diagnostics;
    match command {
        Command::CurlScan => {
            let p = &d.curl_scan;
            report.curl_scan = Some(
                contexts
                    .iter()
                    .enumerate()
                    .map(|(cid, ctx)| {
                        let stats = curl_scan(oracle, ctx, &p.plan, p.epsilon)?;
                        let samples = planned_samples(oracle, ctx, &p.plan)?
                            .into_iter()
                            .map(|s| CurlSampleRow {
                                i: s.i,
                                j: s.j,
                                a: s.a,
                                b: s.b,
                                curl: s.value,
                                normalized: crate::pseudo_joint::curl_normalized(&s, p.epsilon)
                                    .expect("epsilon checked by curl_scan"),
                            })
                            .collect();
                        Ok(CurlScanEntry { context_id: cid, stats, samples })
                    })
                    .collect::<Result<_>>()?,
            );
        }
        Command::Tc => {
            report.dependence = Some(
                contexts
                    .iter()
                    .enumerate()
                    .map(|(cid, ctx)| Ok(DependenceEntry { context_id: cid, report: dependence_report(oracle, joint, ctx)? }))
                    .collect::<Result<_>>()?,
            );
        }
        Command::OrderError => {
            let mut entries = Vec::new();
            let mut profiles = Vec::new();
            for (cid, ctx) in contexts.iter().enumerate() {
                let rankings = rank_orders(oracle, joint, ctx, d.order_error.candidates.as_deref())?;
                for r in &rankings {
                    profiles.push(order_cross_entropy(oracle, joint, ctx, &r.order)?);
                }
                entries.push(OrderErrorEntry { context_id: cid, rankings });
            }
            report.order_error = Some(OrderErrorSection { entries, strata: stratify_contexts(&profiles) });
        }
        Command::OrderGap => {
            report.order_gap = Some(
                contexts
                    .iter()
                    .enumerate()
                    .map(|(cid, ctx)| order_gap_entry(oracle, ctx, cid, &d.order_gap))
                    .collect::<Result<_>>()?,
            );
        }
        Command::Commutator => {
            report.commutator = Some(
                contexts
                    .iter()
                    .enumerate()
                    .map(|(cid, ctx)| commutator_entry(oracle, ctx, cid, &d.commutator, config.seed))
                    .collect::<Result<_>>()?,
            );
        }
        Command::Stress => {
            let p = &d.stress;
            let cfg = StressConfig { operator: p.operator, runs: p.runs, seed: config.seed };
            report.stress = Some(stress_test(oracle, joint, &contexts, &p.widths, &p.schedulers, &cfg)?);
        }
        Command::Consistency => {
            report.consistency = Some(
                contexts
                    .iter()
                    .enumerate()
                    .map(|(cid, ctx)| {
                        Ok(ConsistencyEntry {
                            context_id: cid,
                            report: order_consistency_check(oracle, ctx, d.consistency.tolerance)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            );
        }
        Command::SynthGen => {
            let ModelSource::Synthetic { task, .. } = &config.model else {
                return Err(Error::Config("synth-gen needs a synthetic model source".into()));
            };
            let full = PartialContext::full_block(joint.positions());
            report.synth = Some(SynthSection {
                task: task.clone(),
                tc: total_correlation(joint, &full)?,
                joint_entropy: entropy_from_log(joint.log_mass()),
            });
            model_file = Some(Model::Bayes(joint.clone()).to_file());
        }
        Command::Train => {
            let Some(trained) = &loaded.trained else {
                return Err(Error::Config("train needs a synthetic model source with a train config".into()));
            };
            let m = joint.positions();
            let mean_over = |kind| {
                let patterns = context_patterns(m, kind);
                if patterns.is_empty() {
                    Ok(0.0)
                } else {
                    mean_ecirc_over_patterns(trained, joint, &patterns)
                }
            };
            report.train = Some(TrainSection {
                config: trained.config.clone(),
                history: trained.history.clone(),
                ecirc_prefix_like: mean_over(PatternKind::PrefixLike)?,
                ecirc_random_mask: mean_over(PatternKind::RandomMask)?,
            });
            model_file = Some(model.to_file());
        }
    }
    report.wall_clock = WallClock { started_unix_ms: started, elapsed_ms: clock.elapsed().as_millis() };
    Ok(RunOutput { report, model_file })
}

fn order_gap_entry(
    oracle: &dyn ConditionalOracle,
    ctx: &PartialContext,
    cid: usize,
    p: &OrderGapParams,
) -> Result<OrderGapEntry> {
    let mut sorted = ctx.block.clone();
    sorted.sort_unstable();
    let start = p.start.clone().unwrap_or_else(|| sorted.clone());
    let path = match (&p.steps, &p.end) {
        (Some(steps), _) => SwapPath::new(start, steps.clone())?,
        (None, Some(end)) => SwapPath::bubble(&start, end)?,
        (None, None) => SwapPath::bubble(&start, &sorted.iter().rev().copied().collect::<Vec<_>>())?,
    };
    let v = oracle.vocab().size();
    let assignments: Vec<Vec<usize>> = match &p.assignments {
        Some(a) => a.clone(),
        None => {
            let n = v
                .checked_pow(ctx.block.len() as u32)
                .filter(|&n| n <= MAX_ORDER_GAP_ASSIGNMENTS)
                .ok_or_else(|| cap(format!("order-gap enumerates at most {MAX_ORDER_GAP_ASSIGNMENTS} assignments")))?;
            let mut t = vec![0; ctx.block.len()];
            (0..n)
                .map(|flat| {
                    decode_row_major(flat, v, &mut t);
                    t.clone()
                })
                .collect()
        }
    };
    let rows: Vec<OrderGapRow> = assignments
        .iter()
        .map(|a| {
            let dec = swap_decomposition(oracle, ctx, &path, a)?;
            Ok(OrderGapRow { assignment: a.clone(), log_gap: dec.log_gap, curl_sum: dec.sum, residual: dec.residual })
        })
        .collect::<Result<_>>()?;
    Ok(OrderGapEntry {
        context_id: cid,
        end: path.end(),
        start: path.start,
        steps: path.steps,
        max_abs_residual: rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max),
        rows,
    })
}

fn commutator_entry(
    oracle: &dyn ConditionalOracle,
    ctx: &PartialContext,
    cid: usize,
    p: &CommutatorParams,
    seed: u64,
) -> Result<CommutatorEntry> {
    p.operator.validate()?;
    let state = DecodeState::new(oracle, ctx.clone(), derive_seed(seed, &[cid as u64]))?;
    let pairs: Vec<(usize, usize)> = match &p.pairs {
        Some(pairs) => pairs.clone(),
        None => ctx.block.iter().copied().sorted().tuple_combinations().collect(),
    };
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (i, j) in pairs {
        match commutator(oracle, &state, p.operator, i, j, Divergence::SqrtJs) {
            Ok(r) => rows.push(CommutatorRow { i, j, value: r.value }),
            Err(Error::DegenerateComparison { .. }) => excluded.push((i, j)),
            Err(e) => return Err(e),
        }
    }
    Ok(CommutatorEntry {
        context_id: cid,
        operator: p.operator,
        conflict: rows.iter().map(|r| r.value).sum(),
        pairs: rows,
        excluded,
    })
}

//! Experiment protocols: matched-budget arm comparison and train-set-size
//! sweep.
//!
//! The disjoint baseline runs two modality-specific towers that share
//! nothing (own CLS, own projection, no shared layers). Shared arms deepen
//! the shared stack until the total parameter count, excluding modality
//! identifiers, lands within 2% of the baseline — mirroring the
//! two-k-layer-towers versus one-2k-layer-stack construction. Early/late
//! arms add modality-specific layers around the matched shared stack and are
//! reported with their own (larger) counts.
//!
//! Every arm x seed x fraction cell trains on the same subsampled corpus and
//! reports test-split retrieval. Relative differences follow the
//! shared-over-specific percentage convention.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Split};
use crate::encoder::{default_modality_dim, IdentifierKind, ModelConfig};
use crate::eval::{evaluate_retrieval, Direction, EvalContext, RetrievalReport};
use crate::metrics::CsvRow;
use crate::runfile::{config_hash, train_config_canonical, KeyValues};
use crate::train::{train_with_hash, TrainConfig, TrainOutcome};
use crate::{Error, Result};

/// Relative parameter-budget tolerance between matched arms.
pub const BUDGET_TOLERANCE: f64 = 0.02;
/// Search bound for the matched shared depth.
const MAX_SHARED_DEPTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Two modality-specific towers, nothing shared.
    Disjoint,
    /// One shared stack, no modality information.
    FullyShared,
    /// Shared stack plus a learned modality token.
    SharedToken,
    /// Shared stack plus a learned modality feature vector.
    SharedVector,
    /// Shared-vector arm with modality-specific layers before the stack.
    EarlySpecific,
    /// Shared-vector arm with modality-specific layers after the stack.
    LateSpecific,
    /// Both early and late modality-specific layers.
    Both,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Disjoint,
        Arm::FullyShared,
        Arm::SharedToken,
        Arm::SharedVector,
        Arm::EarlySpecific,
        Arm::LateSpecific,
        Arm::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Disjoint => "disjoint",
            Arm::FullyShared => "fully-shared",
            Arm::SharedToken => "shared-token",
            Arm::SharedVector => "shared-vector",
            Arm::EarlySpecific => "early-specific",
            Arm::LateSpecific => "late-specific",
            Arm::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }

    /// Arms whose budget must match the disjoint baseline within tolerance.
    pub fn is_budget_matched(self) -> bool {
        matches!(
            self,
            Arm::Disjoint | Arm::FullyShared | Arm::SharedToken | Arm::SharedVector
        )
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::parse(s)
    }
}

/// Comparison / sweep specification: which arms, seeds and train fractions
/// to run, the disjoint baseline depth, and the base training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSpec {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    /// Per-tower depth of the disjoint baseline.
    pub disjoint_layers: usize,
    /// Modality-specific layer count for the early/late/both arms.
    pub specific_layers: usize,
    /// Base config; its layer counts and identifier are overridden per arm.
    pub base: TrainConfig,
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config("arms: at least one arm required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed required".into()));
        }
        if self.fractions.is_empty() {
            return Err(Error::Config("fractions: at least one fraction required".into()));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "fractions: {f} outside (0, 1]"
                )));
            }
        }
        if self.disjoint_layers == 0 {
            return Err(Error::Config("disjoint_layers: must be >= 1".into()));
        }
        self.base.validate()
    }
}

/// Parse a comparison spec file: the train-config schema plus `arms`,
/// `seeds`, `fractions`, `disjoint_layers` and `specific_layers`.
pub fn parse_comparison_spec_text(text: &str) -> Result<ComparisonSpec> {
    let mut kv = KeyValues::parse(text)?;
    let arms = kv.take_list(
        "arms",
        Some(vec![Arm::Disjoint, Arm::FullyShared, Arm::SharedVector]),
    )?;
    let seeds = kv.take_list("seeds", Some(vec![0, 1, 2]))?;
    let fractions = kv.take_list("fractions", Some(vec![1.0, 0.5, 0.25]))?;
    let disjoint_layers = kv.take("disjoint_layers", Some(2))?;
    let specific_layers = kv.take("specific_layers", Some(2))?;
    // Remaining keys form the base train config (unknown keys surface there).
    let base_text = crate::runfile::canonical_text(&kv.into_entries());
    let base = crate::runfile::parse_train_config_text(&base_text)?;
    let spec = ComparisonSpec {
        arms,
        seeds,
        fractions,
        disjoint_layers,
        specific_layers,
        base,
    };
    spec.validate()?;
    Ok(spec)
}

/// Model configuration for one arm under this spec's budget rule.
pub fn arm_model_config(spec: &ComparisonSpec, arm: Arm) -> Result<ModelConfig> {
    let width = spec.base.model.width();
    let mut config = spec.base.model.clone();
    config.identifier = IdentifierKind::None;
    config.modality_dim = 0;
    config.embed_dim = width;
    config.layers_early = 0;
    config.layers_shared = 0;
    config.layers_late = 0;
    config.per_modality_head = false;
    match arm {
        Arm::Disjoint => {
            config.layers_early = spec.disjoint_layers;
            config.per_modality_head = true;
        }
        Arm::FullyShared => {
            config.layers_shared = matched_shared_depth(spec)?;
        }
        Arm::SharedToken => {
            config.layers_shared = matched_shared_depth(spec)?;
            config.identifier = IdentifierKind::Token;
        }
        Arm::SharedVector | Arm::EarlySpecific | Arm::LateSpecific | Arm::Both => {
            config.layers_shared = matched_shared_depth(spec)?;
            config.identifier = IdentifierKind::FeatureVector;
            config.modality_dim = default_modality_dim(width);
            config.embed_dim = width - config.modality_dim;
            match arm {
                Arm::EarlySpecific => config.layers_early = spec.specific_layers,
                Arm::LateSpecific => config.layers_late = spec.specific_layers,
                Arm::Both => {
                    config.layers_early = spec.specific_layers;
                    config.layers_late = spec.specific_layers;
                }
                _ => {}
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Smallest shared depth whose parameter total (identifiers excluded) lands
/// within tolerance of the disjoint baseline.
pub fn matched_shared_depth(spec: &ComparisonSpec) -> Result<usize> {
    let disjoint = disjoint_config(spec)?;
    let target = skeleton_params(&disjoint);
    let mut probe = disjoint.clone();
    probe.per_modality_head = false;
    probe.layers_early = 0;
    for depth in 1..=MAX_SHARED_DEPTH {
        probe.layers_shared = depth;
        let total = skeleton_params(&probe);
        if budget_gap(target, total) <= BUDGET_TOLERANCE {
            return Ok(depth);
        }
        if total > target {
            break; // passed the target without entering the band
        }
    }
    Err(Error::Config(format!(
        "no shared depth within {:.1}% of the disjoint baseline ({target} params)",
        BUDGET_TOLERANCE * 100.0
    )))
}

fn disjoint_config(spec: &ComparisonSpec) -> Result<ModelConfig> {
    let width = spec.base.model.width();
    let mut config = spec.base.model.clone();
    config.identifier = IdentifierKind::None;
    config.modality_dim = 0;
    config.embed_dim = width;
    config.layers_early = spec.disjoint_layers;
    config.layers_shared = 0;
    config.layers_late = 0;
    config.per_modality_head = true;
    config.validate()?;
    Ok(config)
}

fn budget_gap(reference: usize, candidate: usize) -> f64 {
    (candidate as f64 - reference as f64).abs() / reference as f64
}

/// The identifier-agnostic parameter count used for budget matching: the
/// modality identifier is excluded along with the width it reallocates away
/// from the embedders (a feature vector consumes part of a fixed width, it
/// does not add to the budget).
fn skeleton_params(config: &ModelConfig) -> usize {
    let mut skeleton = config.clone();
    skeleton.embed_dim = config.width();
    skeleton.modality_dim = 0;
    skeleton.identifier = IdentifierKind::None;
    skeleton.count_params().total()
}

/// Verify every budget-matched arm against the disjoint baseline. Returns
/// `(arm, total params)` for each configured arm; fails before any training
/// when a matched arm is off budget. Matching compares identifier-agnostic
/// skeletons; the returned totals are the true counts.
pub fn check_budgets(spec: &ComparisonSpec) -> Result<Vec<(Arm, usize)>> {
    let reference = skeleton_params(&disjoint_config(spec)?);
    let mut totals = Vec::with_capacity(spec.arms.len());
    for &arm in &spec.arms {
        let config = arm_model_config(spec, arm)?;
        if arm.is_budget_matched() {
            let gap = budget_gap(reference, skeleton_params(&config));
            if gap > BUDGET_TOLERANCE {
                return Err(Error::Config(format!(
                    "arm {}: parameter budget differs from the disjoint baseline by {:.2}% (> {:.0}%)",
                    arm.name(),
                    gap * 100.0,
                    BUDGET_TOLERANCE * 100.0
                )));
            }
        }
        totals.push((arm, config.count_params().total()));
    }
    Ok(totals)
}

/// Resolved per-run training configuration.
pub fn arm_train_config(
    spec: &ComparisonSpec,
    arm: Arm,
    seed: u64,
    fraction: f64,
) -> Result<TrainConfig> {
    let mut config = spec.base.clone();
    config.model = arm_model_config(spec, arm)?;
    config.seed = seed;
    config.train_fraction = fraction;
    Ok(config)
}

/// A finished arm x seed x fraction training run.
pub struct CompletedRun {
    pub arm: Arm,
    pub seed: u64,
    pub fraction: f64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub params_total: usize,
    pub outcome: TrainOutcome,
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
}

/// Callback for per-run artifacts (checkpoints, metric streams). Invoked
/// from worker threads.
pub trait RunSink: Sync {
    fn on_run(&self, run: &CompletedRun) -> Result<()>;
}

/// Discards per-run artifacts.
pub struct NullSink;

impl RunSink for NullSink {
    fn on_run(&self, _run: &CompletedRun) -> Result<()> {
        Ok(())
    }
}

/// Lightweight per-run summary kept in the report.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub arm: Arm,
    pub seed: u64,
    pub fraction: f64,
    pub params: usize,
    pub final_loss: Option<f32>,
    pub i2t: RetrievalReport,
    pub t2i: RetrievalReport,
}

/// Mean recall of one arm at one (fraction, direction, k) with per-seed
/// values and the relative difference against the disjoint baseline.
#[derive(Debug, Clone, Serialize)]
pub struct CellSummary {
    pub fraction: f64,
    pub direction: Direction,
    pub k: usize,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// `(shared - specific) / specific * 100`; absent without a baseline.
    pub relative_diff_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub params: usize,
    pub cells: Vec<CellSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunResult>,
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    /// One CSV row per run x direction x k.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            for report in [&run.i2t, &run.t2i] {
                for &(k, recall) in &report.recall {
                    rows.push(CsvRow {
                        arm: run.arm.name().to_string(),
                        seed: run.seed,
                        fraction: run.fraction,
                        params: run.params,
                        direction: report.direction.name().to_string(),
                        k,
                        recall,
                    });
                }
            }
        }
        rows
    }

    /// Human-readable relative-difference table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for arm in &self.arms {
            out.push_str(&format!("arm {} ({} params)\n", arm.arm.name(), arm.params));
            for cell in &arm.cells {
                let diff = match cell.relative_diff_pct {
                    Some(d) => format!("{d:+.2}%"),
                    None => "-".to_string(),
                };
                let seeds: Vec<String> = cell
                    .per_seed
                    .iter()
                    .map(|(s, r)| format!("s{s}={r:.4}"))
                    .collect();
                out.push_str(&format!(
                    "  fraction {:<5} {} R@{:<4} mean {:.4} rel-diff {} [{}]\n",
                    cell.fraction,
                    cell.direction.name(),
                    cell.k,
                    cell.mean,
                    diff,
                    seeds.join(" ")
                ));
            }
        }
        out
    }
}

/// Table-convention relative difference in percent.
pub fn relative_difference_pct(specific: f64, shared: f64) -> Option<f64> {
    if specific == 0.0 {
        None
    } else {
        Some((shared - specific) / specific * 100.0)
    }
}

/// Budget check, then every arm x seed trained at full fraction.
pub fn run_comparison(
    spec: &ComparisonSpec,
    jobs: usize,
    sink: &dyn RunSink,
) -> Result<ComparisonReport> {
    run_matrix(spec, &[1.0], jobs, sink)
}

/// Budget check, then every arm x seed x configured fraction.
pub fn run_size_sweep(
    spec: &ComparisonSpec,
    jobs: usize,
    sink: &dyn RunSink,
) -> Result<ComparisonReport> {
    run_matrix(spec, &spec.fractions.clone(), jobs, sink)
}

fn run_matrix(
    spec: &ComparisonSpec,
    fractions: &[f64],
    jobs: usize,
    sink: &dyn RunSink,
) -> Result<ComparisonReport> {
    spec.validate()?;
    check_budgets(spec)?;

    let full = data::generate_dataset(spec.base.n_pairs, spec.base.data_seed)?;
    let mut datasets: Vec<(f64, Dataset)> = Vec::with_capacity(fractions.len());
    for &f in fractions {
        datasets.push((f, data::subsample(&full, f, spec.base.data_seed)?));
    }

    // Job list in report order: arm, then fraction, then seed.
    let mut jobs_list = Vec::new();
    for &arm in &spec.arms {
        for (fidx, &(fraction, _)) in datasets.iter().enumerate() {
            for &seed in &spec.seeds {
                jobs_list.push((arm, fidx, fraction, seed));
            }
        }
    }

    let workers = jobs.max(1).min(jobs_list.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..jobs_list.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= jobs_list.len() {
                    break;
                }
                let (arm, fidx, fraction, seed) = jobs_list[idx];
                let outcome = execute_run(spec, arm, seed, fraction, &datasets[fidx].1, sink);
                results.lock().expect("no poisoned lock")[idx] = Some(outcome);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs_list.len());
    for slot in results.into_inner().expect("no poisoned lock") {
        runs.push(slot.expect("every job ran")?);
    }
    let arms = summarize(spec, fractions, &runs);
    Ok(ComparisonReport { runs, arms })
}

fn execute_run(
    spec: &ComparisonSpec,
    arm: Arm,
    seed: u64,
    fraction: f64,
    dataset: &Dataset,
    sink: &dyn RunSink,
) -> Result<RunResult> {
    let config = arm_train_config(spec, arm, seed, fraction)?;
    let hash = config_hash(&train_config_canonical(&config));
    let params_total = config.model.count_params().total();
    let outcome = train_with_hash(&config, dataset, hash.clone())?;
    let test = dataset.split_examples(Split::Test);
    if test.is_empty() {
        return Err(Error::Input("comparison: dataset has no test split".into()));
    }
    let ctx = EvalContext {
        seed,
        config_hash: hash.clone(),
        train_fraction: fraction,
    };
    let (i2t, t2i) = evaluate_retrieval(&outcome.model, &test, &config.eval_ks, &ctx)?;
    let completed = CompletedRun {
        arm,
        seed,
        fraction,
        config,
        config_hash: hash,
        params_total,
        outcome,
        i2t: i2t.clone(),
        t2i: t2i.clone(),
    };
    sink.on_run(&completed)?;
    Ok(RunResult {
        arm,
        seed,
        fraction,
        params: params_total,
        final_loss: completed.outcome.loss_trace.last().copied(),
        i2t,
        t2i,
    })
}

fn summarize(spec: &ComparisonSpec, fractions: &[f64], runs: &[RunResult]) -> Vec<ArmReport> {
    let ks = {
        let mut ks = spec.base.eval_ks.clone();
        ks.sort_unstable();
        ks.dedup();
        ks
    };
    let mean_for = |arm: Arm, fraction: f64, direction: Direction, k: usize| -> Option<(Vec<(u64, f64)>, f64)> {
        let mut per_seed = Vec::new();
        for run in runs.iter().filter(|r| r.arm == arm && r.fraction == fraction) {
            let report = match direction {
                Direction::I2T => &run.i2t,
                Direction::T2I => &run.t2i,
            };
            if let Some(&(_, recall)) = report.recall.iter().find(|(kk, _)| *kk == k) {
                per_seed.push((run.seed, recall));
            }
        }
        if per_seed.is_empty() {
            return None;
        }
        let mean = per_seed.iter().map(|(_, r)| r).sum::<f64>() / per_seed.len() as f64;
        Some((per_seed, mean))
    };

    let has_baseline = spec.arms.contains(&Arm::Disjoint);
    let mut reports = Vec::new();
    for &arm in &spec.arms {
        let params = runs
            .iter()
            .find(|r| r.arm == arm)
            .map(|r| r.params)
            .unwrap_or(0);
        let mut cells = Vec::new();
        for &fraction in fractions {
            for direction in [Direction::I2T, Direction::T2I] {
                for &k in &ks {
                    let Some((per_seed, mean)) = mean_for(arm, fraction, direction, k) else {
                        continue;
                    };
                    let relative_diff_pct = if has_baseline && arm != Arm::Disjoint {
                        mean_for(Arm::Disjoint, fraction, direction, k)
                            .and_then(|(_, base)| relative_difference_pct(base, mean))
                    } else {
                        None
                    };
                    cells.push(CellSummary {
                        fraction,
                        direction,
                        k,
                        per_seed,
                        mean,
                        relative_diff_pct,
                    });
                }
            }
        }
        reports.push(ArmReport { arm, params, cells });
    }
    reports
}

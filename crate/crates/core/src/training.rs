//! Phase-ordered SGD, the shuffled-pool baseline, and the loss ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::alignment::{batch_loss_gradients, LossMode, Schedule};
use crate::curriculum::{
    partition_dataset, ConceptLexicon, OverflowPolicy, PhasePartition, PolicyEvent,
    PriorPolicyState,
};
use crate::data::{seeded_rng, Dataset, EncodedSample};
use crate::error::{Error, Result};
use crate::eval::{classify_objects, EvalReport, LabelSet};
use crate::model::{init_params, Checkpoint, ModelDims, ModelParams};

const SUBSAMPLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phases: usize,
    pub epochs_per_phase: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate at each step boundary.
    pub lr_step_factor: f64,
    /// Step boundary spacing as a fraction of the total iteration count.
    pub lr_step_fraction: f64,
    pub loss_mode: LossMode,
    pub data_fraction: f64,
    pub seed: u64,
    pub curriculum: bool,
    pub overflow: OverflowPolicy,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: 4,
            epochs_per_phase: 4,
            batch_size: 32,
            learning_rate: 0.005,
            lr_step_factor: 0.1,
            lr_step_fraction: 0.75,
            loss_mode: LossMode::Cp,
            data_fraction: 1.0,
            seed: 0,
            curriculum: true,
            overflow: OverflowPolicy::Drop,
            embed_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.phases == 0 {
            return bad("phases must be at least 1");
        }
        if self.epochs_per_phase == 0 {
            return bad("epochs_per_phase must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.lr_step_factor > 0.0 && self.lr_step_factor.is_finite()) {
            return bad("lr_step_factor must be positive");
        }
        if !(self.lr_step_fraction > 0.0 && self.lr_step_fraction.is_finite()) {
            return bad("lr_step_fraction must be positive");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1");
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based iteration `i` of `total`.
    pub fn learning_rate_at(&self, i: usize, total: usize) -> f64 {
        let interval = ((self.lr_step_fraction * total as f64).round() as usize).max(1);
        let steps = (i / interval) as i32;
        self.learning_rate * self.lr_step_factor.powi(steps)
    }
}

/// One row of training telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// 0 for the baseline, which has no phases.
    pub phase: usize,
    pub epoch: usize,
    pub loss: f64,
    pub t_over_total: f64,
    pub learning_rate: f64,
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("iter,phase,epoch,loss,t_over_T,lr\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.phase, r.epoch, r.loss, r.t_over_total, r.learning_rate
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedStep {
    pub phase: usize,
    pub epoch: usize,
    /// Indices into the encoded sample list.
    pub batch: Vec<usize>,
    /// Last step of its phase.
    pub ends_phase: bool,
}

/// The full sequence of optimizer steps, fixed before training starts.
#[derive(Debug, Clone)]
pub struct TrainingPlan {
    pub samples: Vec<EncodedSample>,
    pub steps: Vec<PlannedStep>,
    pub partition: PhasePartition,
}

impl TrainingPlan {
    pub fn total_iterations(&self) -> usize {
        self.steps.len()
    }
}

/// Keeps `ceil(fraction * n)` ids of each phase, chosen by a seeded shuffle.
fn subsample_phases(partition: &PhasePartition, fraction: f64, seed: u64) -> Vec<Vec<String>> {
    let mut rng = seeded_rng(seed, SUBSAMPLE_STREAM);
    partition
        .phases()
        .map(|(_, ids)| {
            if fraction >= 1.0 {
                return ids.to_vec();
            }
            let keep = ((fraction * ids.len() as f64).ceil() as usize).min(ids.len());
            let mut shuffled = ids.to_vec();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(keep);
            shuffled.sort();
            shuffled
        })
        .collect()
}

/// Partitions, subsamples and batches the data for `config`.
///
/// Curriculum runs `epochs_per_phase` epochs over each phase in order. The
/// baseline shuffles the union of the same samples and runs epochs until it
/// has taken exactly as many steps as the curriculum would.
pub fn plan_training(
    dataset: &Dataset,
    lexicon: &ConceptLexicon,
    config: &TrainConfig,
) -> Result<TrainingPlan> {
    config.validate()?;
    let partition = partition_dataset(dataset, lexicon, config.phases, config.overflow)?;
    let phase_ids = subsample_phases(&partition, config.data_fraction, config.seed);
    if phase_ids[0].is_empty() && config.curriculum {
        return Err(Error::InvalidConfig(
            "curriculum needs at least one phase-1 sample".into(),
        ));
    }

    let samples = dataset.encode_all()?;
    let position: BTreeMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let to_indices =
        |ids: &[String]| -> Vec<usize> { ids.iter().map(|id| position[id.as_str()]).collect() };

    let mut curriculum_steps = Vec::new();
    let mut epoch_counter = 0u64;
    for (p_idx, ids) in phase_ids.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let indices = to_indices(ids);
        for e in 0..config.epochs_per_phase {
            for batch in
                crate::data::make_batches(&indices, config.batch_size, config.seed, epoch_counter)?
            {
                curriculum_steps.push(PlannedStep {
                    phase: p_idx + 1,
                    epoch: e,
                    batch,
                    ends_phase: false,
                });
            }
            epoch_counter += 1;
        }
        if let Some(last) = curriculum_steps.last_mut() {
            last.ends_phase = true;
        }
    }
    if curriculum_steps.is_empty() {
        return Err(Error::InvalidConfig(
            "no samples fall into any phase".into(),
        ));
    }

    let steps = if config.curriculum {
        curriculum_steps
    } else {
        let total = curriculum_steps.len();
        let pool: Vec<usize> = to_indices(&phase_ids.concat());
        let mut steps = Vec::with_capacity(total);
        let mut epoch = 0u64;
        while steps.len() < total {
            for batch in crate::data::make_batches(&pool, config.batch_size, config.seed, epoch)? {
                if steps.len() == total {
                    break;
                }
                steps.push(PlannedStep {
                    phase: 0,
                    epoch: epoch as usize,
                    batch,
                    ends_phase: false,
                });
            }
            epoch += 1;
        }
        steps
    };

    Ok(TrainingPlan {
        samples,
        steps,
        partition,
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub initial_params: ModelParams,
    pub params: ModelParams,
    pub metrics: Vec<MetricsRecord>,
    pub partition: PhasePartition,
}

impl TrainRun {
    pub fn checkpoint(&self, dataset: &Dataset, seed: u64) -> Result<Checkpoint> {
        let last_phase = self.metrics.last().map_or(0, |m| m.phase);
        Checkpoint::new(
            self.params.clone(),
            dataset.vocabulary().tokens().to_vec(),
            seed,
            self.metrics.len(),
            last_phase,
        )
    }
}

/// Trains from a fresh seeded initialization.
pub fn train(
    dataset: &Dataset,
    lexicon: &ConceptLexicon,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let dims = ModelDims::new(
        dataset.vocabulary().len(),
        config.embed_dim,
        dataset.feature_dim(),
    )?;
    let init = init_params(dims, config.seed)?;
    train_from(dataset, lexicon, config, init)
}

/// Trains starting from `init`.
pub fn train_from(
    dataset: &Dataset,
    lexicon: &ConceptLexicon,
    config: &TrainConfig,
    init: ModelParams,
) -> Result<TrainRun> {
    let plan = plan_training(dataset, lexicon, config)?;
    let expected = ModelDims {
        vocab_size: dataset.vocabulary().len(),
        embed_dim: config.embed_dim,
        visual_feat_dim: dataset.feature_dim(),
    };
    if init.dims() != expected {
        return Err(Error::InvalidConfig(format!(
            "initial parameters have dims {:?}, expected {expected:?}",
            init.dims()
        )));
    }

    let total = plan.total_iterations();
    let mut params = init.clone();
    let mut policy = PriorPolicyState::new(config.loss_mode);
    let mut metrics = Vec::with_capacity(total);
    for (i, step) in plan.steps.iter().enumerate() {
        let sched = Schedule::new(i + 1, total)?;
        let batch: Vec<&EncodedSample> = step.batch.iter().map(|&s| &plan.samples[s]).collect();
        let (loss, grads) =
            batch_loss_gradients(&batch, &params, policy.snapshot(), sched, config.loss_mode)?;
        let lr = config.learning_rate_at(i, total);
        params.add_scaled(-lr, &grads)?;
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after update"));
        }
        metrics.push(MetricsRecord {
            iteration: i,
            phase: step.phase,
            epoch: step.epoch,
            loss,
            t_over_total: sched.fraction(),
            learning_rate: lr,
        });
        policy.update(
            PolicyEvent::StepCompleted {
                iteration: i + 1,
                phase: step.phase,
            },
            &params,
        );
        if step.ends_phase {
            policy.update(
                PolicyEvent::PhaseCompleted {
                    iteration: i + 1,
                    phase: step.phase,
                },
                &params,
            );
        }
    }
    Ok(TrainRun {
        initial_params: init,
        params,
        metrics,
        partition: plan.partition,
    })
}

/// Trains and evaluates on `eval`, labelling against every lexicon concept.
pub fn train_and_evaluate(
    train_set: &Dataset,
    eval_set: &Dataset,
    lexicon: &ConceptLexicon,
    config: &TrainConfig,
) -> Result<(TrainRun, EvalReport)> {
    let run = train(train_set, lexicon, config)?;
    let report = evaluate(&run.params, train_set, eval_set, lexicon, &run.partition)?;
    Ok((run, report))
}

pub fn evaluate(
    params: &ModelParams,
    train_set: &Dataset,
    eval_set: &Dataset,
    lexicon: &ConceptLexicon,
    partition: &PhasePartition,
) -> Result<EvalReport> {
    let labels = LabelSet::from_lexicon(lexicon, train_set.vocabulary())?;
    let predictions = classify_objects(eval_set, params, &labels)?;
    EvalReport::build(&predictions, partition.introduced_at())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Curriculum,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Curriculum => "curriculum",
        }
    }
}

/// Arm/loss combinations compared by the ablation, in report order.
pub const ABLATION_GRID: [(Arm, LossMode); 5] = [
    (Arm::Baseline, LossMode::Plain),
    (Arm::Baseline, LossMode::Cr),
    (Arm::Curriculum, LossMode::Plain),
    (Arm::Curriculum, LossMode::Cr),
    (Arm::Curriculum, LossMode::Cp),
];

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub seed: u64,
    pub arm: Arm,
    pub mode: LossMode,
    pub run: TrainRun,
    pub report: EvalReport,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}_{}_seed{}", self.arm.as_str(), self.mode, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, seed: u64, arm: Arm, mode: LossMode) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.seed == seed && c.arm == arm && c.mode == mode)
    }

    /// Mean over seeds of `metric` for one grid cell.
    pub fn mean(&self, arm: Arm, mode: LossMode, metric: impl Fn(&EvalReport) -> f64) -> f64 {
        let values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.arm == arm && c.mode == mode)
            .map(|c| metric(&c.report))
            .collect();
        if values.is_empty() {
            return f64::NAN;
        }
        values.iter().sum::<f64>() / values.len() as f64
    }

    fn phase_columns(&self) -> Vec<usize> {
        let mut phases: Vec<usize> = self
            .cells
            .iter()
            .flat_map(|c| c.report.per_phase.keys().copied())
            .collect();
        phases.sort_unstable();
        phases.dedup();
        phases
    }

    /// One row per (seed, cell).
    pub fn grid_csv(&self) -> String {
        let phases = self.phase_columns();
        let mut out = String::from("seed,arm,mode,top1,top5");
        for p in &phases {
            let _ = write!(out, ",phase{p}_top1,phase{p}_top5");
        }
        out.push('\n');
        for c in &self.cells {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                c.seed,
                c.arm.as_str(),
                c.mode,
                c.report.overall.top1,
                c.report.overall.top5
            );
            for p in &phases {
                match c.report.per_phase.get(p) {
                    Some(g) => {
                        let _ = write!(out, ",{},{}", g.top1, g.top5);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Mean over seeds for each grid cell, in grid order.
    pub fn summary_csv(&self) -> String {
        let phases = self.phase_columns();
        let mut out = String::from("arm,mode,seeds,top1_mean,top5_mean");
        for p in &phases {
            let _ = write!(out, ",phase{p}_top1_mean");
        }
        out.push('\n');
        for (arm, mode) in ABLATION_GRID {
            let n = self
                .cells
                .iter()
                .filter(|c| c.arm == arm && c.mode == mode)
                .count();
            if n == 0 {
                continue;
            }
            let _ = write!(
                out,
                "{},{},{},{},{}",
                arm.as_str(),
                mode,
                n,
                self.mean(arm, mode, |r| r.overall.top1),
                self.mean(arm, mode, |r| r.overall.top5)
            );
            for &p in &phases {
                let _ = write!(
                    out,
                    ",{}",
                    self.mean(arm, mode, |r| r.per_phase.get(&p).map_or(0.0, |g| g.top1))
                );
            }
            out.push('\n');
        }
        out
    }

    /// Grid, summary, and per-cell metrics and checkpoints under `dir`.
    pub fn write(&self, dir: &Path, train_set: &Dataset) -> Result<()> {
        let put = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        put("ablation.csv", &self.grid_csv())?;
        put("ablation_summary.csv", &self.summary_csv())?;
        for c in &self.cells {
            let label = c.label();
            put(
                &format!("metrics_{label}.csv"),
                &metrics_csv(&c.run.metrics),
            )?;
            c.run
                .checkpoint(train_set, c.seed)?
                .save(&dir.join(format!("checkpoint_{label}.json")))?;
        }
        Ok(())
    }
}

/// Runs every grid cell for every seed. `base` supplies all other settings.
pub fn run_ablation(
    train_set: &Dataset,
    eval_set: &Dataset,
    lexicon: &ConceptLexicon,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    run_ablation_cells(train_set, eval_set, lexicon, base, seeds, &ABLATION_GRID)
}

/// As [`run_ablation`] restricted to `cells`.
pub fn run_ablation_cells(
    train_set: &Dataset,
    eval_set: &Dataset,
    lexicon: &ConceptLexicon,
    base: &TrainConfig,
    seeds: &[u64],
    cells: &[(Arm, LossMode)],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut out = Vec::with_capacity(seeds.len() * cells.len());
    for &seed in seeds {
        for &(arm, mode) in cells {
            let config = TrainConfig {
                seed,
                loss_mode: mode,
                curriculum: arm == Arm::Curriculum,
                ..base.clone()
            };
            let (run, report) = train_and_evaluate(train_set, eval_set, lexicon, &config)?;
            out.push(AblationCell {
                seed,
                arm,
                mode,
                run,
                report,
            });
        }
    }
    Ok(AblationReport { cells: out })
}

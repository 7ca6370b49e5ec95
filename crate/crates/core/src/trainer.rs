//! Training: fixed-objective epochs, exploration with weight restoration, and
//! the progressive search that alternates exploration of hyperparameter
//! candidates with exploitation of the Expected-Improvement winner.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{EmbeddingBatch, MetricConfig};
use crate::bayes::{
    initial_design, propose, ExplorationRecord, GpState, KernelForm, DEFAULT_EXPECTED_DROP,
};
use crate::data::{LabeledDataset, SplitTag};
use crate::error::{PlaError, Result};
use crate::loss::{cross_entropy_grad, gbh_loss_grad, LossBreakdown};
use crate::model::{Checkpoint, ModelShape, ToyModel};
use crate::optim::{lr_schedule, OptimizerConfig};
use crate::params::{HyperBox, HyperParams};
use crate::sampler::{BatchSpec, PkSampler};

/// Training rows with labels remapped to dense class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    features: DMatrix<f64>,
    classes: Vec<usize>,
    identities: Vec<usize>,
}

impl TrainSet {
    pub fn new(features: DMatrix<f64>, labels: &[usize]) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(PlaError::invalid(
                "feature rows and labels differ in length",
            ));
        }
        if labels.is_empty() {
            return Err(PlaError::invalid("empty training set"));
        }
        let mut identities = labels.to_vec();
        identities.sort_unstable();
        identities.dedup();
        let index: BTreeMap<usize, usize> = identities
            .iter()
            .enumerate()
            .map(|(c, &id)| (id, c))
            .collect();
        Ok(Self {
            features,
            classes: labels.iter().map(|l| index[l]).collect(),
            identities,
        })
    }

    /// Rows of `dataset` tagged as training data.
    pub fn from_dataset(dataset: &LabeledDataset) -> Result<Self> {
        let (features, labels) = dataset.subset(SplitTag::Train);
        Self::new(features, &labels)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    /// Dense class index of every row.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.identities.len()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// What a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Progressive search over `(λ, m, k, p)`.
    #[default]
    Pla,
    /// Composite loss with `k = p = 1`.
    BatchHard,
    /// Cross-entropy alone.
    CeOnly,
    /// Generalized triplet loss alone.
    TripletOnly,
    /// Composite loss at the configured hyperparameters.
    CompositeFixed,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        Self::Pla,
        Self::BatchHard,
        Self::CeOnly,
        Self::TripletOnly,
        Self::CompositeFixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pla => "pla",
            Self::BatchHard => "batch_hard",
            Self::CeOnly => "ce_only",
            Self::TripletOnly => "triplet_only",
            Self::CompositeFixed => "composite_fixed",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = PlaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                PlaError::invalid(format!(
                    "unknown mode {s:?} (expected pla, batch_hard, ce_only, triplet_only, composite_fixed)"
                ))
            })
    }
}

/// Weighted loss for one run: `ce_weight · CE + λ · GBH`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub ce_weight: f64,
    pub w: HyperParams,
    pub metric: MetricConfig,
}

impl Objective {
    pub fn composite(w: HyperParams, metric: MetricConfig) -> Self {
        Self {
            ce_weight: 1.0,
            w,
            metric,
        }
    }

    /// The objective of a fixed-hyperparameter mode built from `w`.
    pub fn for_mode(mode: TrainMode, w: HyperParams, metric: MetricConfig) -> Result<Self> {
        let w = match mode {
            TrainMode::Pla => {
                return Err(PlaError::Config("pla mode has no fixed objective".into()))
            }
            TrainMode::BatchHard => HyperParams { k: 1, p: 1, ..w },
            TrainMode::CeOnly => HyperParams { lambda: 0.0, ..w },
            TrainMode::TripletOnly | TrainMode::CompositeFixed => w,
        };
        let ce_weight = if mode == TrainMode::TripletOnly {
            0.0
        } else {
            1.0
        };
        if ce_weight == 0.0 && w.lambda == 0.0 {
            return Err(PlaError::Config("triplet_only needs lambda > 0".into()));
        }
        Ok(Self {
            ce_weight,
            w,
            metric,
        })
    }

    fn uses_triplet(&self) -> bool {
        self.w.lambda != 0.0
    }

    fn uses_ce(&self) -> bool {
        self.ce_weight != 0.0
    }
}

/// Mean losses of one epoch. Terms that the objective switches off are 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Fresh model and optimizer state for `shape`, initialized from `seed`.
pub fn init_checkpoint(shape: ModelShape, seed: u64) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Checkpoint::new(ToyModel::init(shape, &mut rng)?))
}

fn batch_step(
    state: &mut Checkpoint,
    data: &TrainSet,
    obj: &Objective,
    idx: &[usize],
    opt: &OptimizerConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let x = data.features.select_rows(idx.iter());
    let labels: Vec<usize> = idx.iter().map(|&i| data.classes[i]).collect();
    let pass = state.model.forward(&x)?;

    let mut loss = LossBreakdown::default();
    let grad_logits = if obj.uses_ce() {
        let (ce, mut g) = cross_entropy_grad(&pass.logits, &labels)?;
        g *= obj.ce_weight;
        loss.softmax_term = ce;
        g
    } else {
        DMatrix::zeros(pass.logits.nrows(), pass.logits.ncols())
    };
    let grad_triplet = if obj.uses_triplet() {
        let batch = EmbeddingBatch::new(pass.triplet.clone(), labels)?;
        let (gbh, mut g) = gbh_loss_grad(&batch, &obj.w, &obj.metric)?;
        g *= obj.w.lambda;
        loss.gbh_term = gbh;
        g
    } else {
        DMatrix::zeros(pass.triplet.nrows(), pass.triplet.ncols())
    };
    loss.total = obj.ce_weight * loss.softmax_term + obj.w.lambda * loss.gbh_term;

    let grads = state.model.backward(&x, &pass, &grad_triplet, &grad_logits);
    state
        .model
        .adam_step(&grads, &mut state.optimizer, opt, state.epoch, lr)?;
    Ok(loss)
}

/// Trains `n_epochs` epochs of `ceil(len / (P·K))` batches each, advancing
/// the checkpoint's epoch counter, and returns per-epoch mean losses.
pub fn train_epochs(
    state: &mut Checkpoint,
    data: &TrainSet,
    obj: &Objective,
    n_epochs: usize,
    spec: &BatchSpec,
    sampler: &mut PkSampler,
    opt: &OptimizerConfig,
) -> Result<Vec<EpochLoss>> {
    if data.dim() != state.model.shape().input_dim {
        return Err(PlaError::invalid(format!(
            "training features have {} columns, model expects {}",
            data.dim(),
            state.model.shape().input_dim
        )));
    }
    if data.class_count() > state.model.shape().classes {
        return Err(PlaError::invalid(format!(
            "{} training identities but the classifier has {} outputs",
            data.class_count(),
            state.model.shape().classes
        )));
    }
    let batches = spec.batches_per_epoch(data.len());
    let mut out = Vec::with_capacity(n_epochs);
    for _ in 0..n_epochs {
        let lr = lr_schedule(state.epoch, opt);
        let mut sum = LossBreakdown::default();
        for _ in 0..batches {
            let idx = sampler.sample(spec)?;
            let l = batch_step(state, data, obj, &idx, opt, lr)?;
            sum.softmax_term += l.softmax_term;
            sum.gbh_term += l.gbh_term;
            sum.total += l.total;
        }
        let n = batches as f64;
        out.push(EpochLoss {
            epoch: state.epoch,
            lr,
            loss: LossBreakdown {
                softmax_term: sum.softmax_term / n,
                gbh_term: sum.gbh_term / n,
                total: sum.total / n,
            },
        });
        state.epoch += 1;
    }
    Ok(out)
}

/// Which candidates are re-explored in every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReExplorePolicy {
    /// Every candidate in the design, every round.
    #[default]
    All,
    /// Only candidates without an objective value yet.
    Stale,
}

/// Budget and search settings of a progressive run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaConfig {
    /// Epoch budget `M`, counting exploration and exploitation epochs.
    pub max_epochs: usize,
    /// Size `N` of the initial design.
    pub initial_design: usize,
    pub explore_epochs: usize,
    pub exploit_epochs: usize,
    /// Epochs in each half of an exploration.
    pub objective_split: usize,
    pub expected_drop: f64,
    pub batch_spec: BatchSpec,
    pub pool_size: usize,
    pub re_explore_policy: ReExplorePolicy,
    pub kernel: KernelForm,
    pub metric: MetricConfig,
    /// Explore candidates on worker threads (only under the `all` policy).
    pub parallel_explore: bool,
}

impl Default for PlaConfig {
    /// Desk-scale budget.
    fn default() -> Self {
        Self {
            max_epochs: 120,
            initial_design: 4,
            explore_epochs: 6,
            exploit_epochs: 30,
            objective_split: 3,
            expected_drop: DEFAULT_EXPECTED_DROP,
            batch_spec: BatchSpec::default(),
            pool_size: 256,
            re_explore_policy: ReExplorePolicy::All,
            kernel: KernelForm::default(),
            metric: MetricConfig::default(),
            parallel_explore: true,
        }
    }
}

impl PlaConfig {
    pub const FULL_SCALE_MAX_EPOCHS: usize = 3000;
    pub const FULL_SCALE_EXPLORE_EPOCHS: usize = 20;
    pub const FULL_SCALE_EXPLOIT_EPOCHS: usize = 300;

    /// Full-scale budget: `M = 3000`, 20-epoch explorations, 300-epoch
    /// exploitations, `N = 8`.
    pub fn full_scale() -> Self {
        Self {
            max_epochs: Self::FULL_SCALE_MAX_EPOCHS,
            initial_design: 8,
            explore_epochs: Self::FULL_SCALE_EXPLORE_EPOCHS,
            exploit_epochs: Self::FULL_SCALE_EXPLOIT_EPOCHS,
            objective_split: Self::FULL_SCALE_EXPLORE_EPOCHS / 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_epochs", self.max_epochs),
            ("initial_design", self.initial_design),
            ("explore_epochs", self.explore_epochs),
            ("exploit_epochs", self.exploit_epochs),
            ("objective_split", self.objective_split),
            ("pool_size", self.pool_size),
        ] {
            if v == 0 {
                return Err(PlaError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.explore_epochs != 2 * self.objective_split {
            return Err(PlaError::Config(format!(
                "explore_epochs ({}) must equal 2 × objective_split ({})",
                self.explore_epochs, self.objective_split
            )));
        }
        if !self.expected_drop.is_finite() {
            return Err(PlaError::Config("expected_drop must be finite".into()));
        }
        self.batch_spec.validate()
    }
}

/// Trains `cfg.explore_epochs` epochs under `w`, scores the loss drop between
/// the two halves, and restores `state` to what it was on entry, whether or
/// not training succeeded.
pub fn explore(
    state: &mut Checkpoint,
    data: &TrainSet,
    w: &HyperParams,
    cfg: &PlaConfig,
    opt: &OptimizerConfig,
    sampler: &mut PkSampler,
) -> Result<(ExplorationRecord, Vec<EpochLoss>)> {
    let saved = state.clone();
    let obj = Objective::composite(*w, cfg.metric);
    let trained = train_epochs(
        state,
        data,
        &obj,
        cfg.explore_epochs,
        &cfg.batch_spec,
        sampler,
        opt,
    );
    *state = saved;
    let losses = trained?;
    let half = cfg.objective_split;
    let mean = |s: &[EpochLoss]| s.iter().map(|e| e.loss.total).sum::<f64>() / s.len() as f64;
    let record = ExplorationRecord::new(
        *w,
        mean(&losses[..half]),
        mean(&losses[half..]),
        cfg.expected_drop,
    )?;
    Ok((record, losses))
}

/// Training phase of an epoch row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Explore,
    Exploit,
    Train,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Explore => "explore",
            Self::Exploit => "exploit",
            Self::Train => "train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub phase: Phase,
    pub round: usize,
    /// Index into the design, for exploration and exploitation rows.
    pub candidate: Option<usize>,
    pub w: HyperParams,
    pub loss: EpochLoss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationRow {
    pub round: usize,
    pub candidate: usize,
    pub record: ExplorationRecord,
}

/// One exploitation round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub chosen: HyperParams,
    pub candidate: usize,
    pub expected_improvement: f64,
    pub best_objective: f64,
    /// Diagonal of the bandwidth matrix used for the proposal.
    pub bandwidth: Vec<f64>,
    pub exploit_epochs: usize,
    pub mean_loss: f64,
}

/// Everything a run records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    /// `key = value` lines written at the top of every CSV.
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochRow>,
    pub explorations: Vec<ExplorationRow>,
    pub rounds: Vec<RoundRow>,
    /// Epochs consumed, exploration included.
    pub total_epochs: usize,
    /// Lowest exploitation-round mean epoch loss (final-epoch loss for
    /// fixed-objective runs); `None` when no such epoch ran.
    pub best_loss: Option<f64>,
}

fn hyper_cols(w: &HyperParams) -> String {
    format!("{:.17},{:.17},{},{}", w.lambda, w.margin, w.k, w.p)
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|c| c.to_string()).unwrap_or_default()
}

impl RunReport {
    fn preamble(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            writeln!(out, "# {k} = {v}").unwrap();
        }
        writeln!(out, "# total_epochs = {}", self.total_epochs).unwrap();
        match self.best_loss {
            Some(b) => writeln!(out, "# best_loss = {b:.17}").unwrap(),
            None => writeln!(out, "# best_loss = none").unwrap(),
        }
        out
    }

    /// One row per epoch: `phase,round,candidate,epoch,lambda,margin,k,p,lr,ce,gbh,total`.
    pub fn epochs_csv(&self) -> String {
        let mut out = self.preamble();
        out.push_str("phase,round,candidate,epoch,lambda,margin,k,p,lr,ce,gbh,total\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{:.17e},{:.17},{:.17},{:.17}",
                r.phase.as_str(),
                r.round,
                opt_usize(r.candidate),
                r.loss.epoch,
                hyper_cols(&r.w),
                r.loss.lr,
                r.loss.loss.softmax_term,
                r.loss.loss.gbh_term,
                r.loss.loss.total
            )
            .unwrap();
        }
        out
    }

    pub fn explorations_csv(&self) -> String {
        let mut out = self.preamble();
        out.push_str("round,candidate,lambda,margin,k,p,first_half,second_half,objective\n");
        for r in &self.explorations {
            writeln!(
                out,
                "{},{},{},{:.17},{:.17},{:.17}",
                r.round,
                r.candidate,
                hyper_cols(&r.record.hyperparams),
                r.record.mean_loss_first_half,
                r.record.mean_loss_second_half,
                r.record.objective_value
            )
            .unwrap();
        }
        out
    }

    pub fn rounds_csv(&self) -> String {
        let mut out = self.preamble();
        out.push_str(
            "round,candidate,lambda,margin,k,p,expected_improvement,best_objective,bw_lambda,bw_margin,bw_k,bw_p,exploit_epochs,mean_loss\n",
        );
        for r in &self.rounds {
            let bw: Vec<String> = r.bandwidth.iter().map(|b| format!("{b:.17e}")).collect();
            writeln!(
                out,
                "{},{},{},{:.17e},{:.17},{},{},{:.17}",
                r.round,
                r.candidate,
                hyper_cols(&r.chosen),
                r.expected_improvement,
                r.best_objective,
                bw.join(","),
                r.exploit_epochs,
                r.mean_loss
            )
            .unwrap();
        }
        out
    }

    /// Writes `epochs.csv`, and for progressive runs `explorations.csv` and
    /// `rounds.csv`, into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| PlaError::io(path, e))
        };
        write("epochs.csv", self.epochs_csv())?;
        if self.epochs.iter().any(|r| r.phase != Phase::Train) {
            write("explorations.csv", self.explorations_csv())?;
            write("rounds.csv", self.rounds_csv())?;
        }
        Ok(())
    }

    /// `k` chosen in each exploitation round.
    pub fn chosen_k(&self) -> Vec<usize> {
        self.rounds.iter().map(|r| r.chosen.k).collect()
    }

    /// Mean total loss of the last recorded training or exploitation epoch.
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .rev()
            .find(|r| r.phase != Phase::Explore)
            .map(|r| r.loss.loss.total)
    }
}

/// A run that stopped on an error, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct RunAborted {
    #[source]
    pub source: PlaError,
    pub report: Box<RunReport>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// The model with the lowest tracked loss (the initialization if nothing
    /// was exploited).
    pub best: Checkpoint,
    /// The state at the end of the run.
    pub last: Checkpoint,
    pub report: RunReport,
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const DESIGN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EXPLORE_STREAM_BASE: u64 = 2;

fn base_header(
    mode: TrainMode,
    seed: u64,
    spec: &BatchSpec,
    opt: &OptimizerConfig,
) -> Vec<(String, String)> {
    let mut h = vec![
        ("mode".to_string(), mode.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("batch_p".to_string(), spec.identities.to_string()),
        ("batch_k".to_string(), spec.per_identity.to_string()),
    ];
    for (k, v) in [
        ("alpha0", opt.alpha0.to_string()),
        ("e0", opt.e0.to_string()),
        ("e1", opt.e1.to_string()),
        ("beta1_early", opt.beta1_early.to_string()),
        ("beta1_late", opt.beta1_late.to_string()),
        ("beta1_switch_epoch", opt.beta1_switch_epoch.to_string()),
        ("beta2", opt.beta2.to_string()),
    ] {
        h.push((k.to_string(), v));
    }
    h
}

/// Trains a fixed objective for `epochs` epochs. The best checkpoint is the
/// final one.
#[allow(clippy::too_many_arguments)]
pub fn train_fixed(
    data: &TrainSet,
    obj: &Objective,
    mode: TrainMode,
    epochs: usize,
    spec: &BatchSpec,
    opt: &OptimizerConfig,
    init: Checkpoint,
    seed: u64,
) -> std::result::Result<RunOutcome, RunAborted> {
    let mut report = RunReport {
        header: base_header(mode, seed, spec, opt),
        ..RunReport::default()
    };
    report.header.push(("epochs".into(), epochs.to_string()));
    report
        .header
        .push(("hyperparams".into(), obj.w.to_string()));
    report
        .header
        .push(("ce_weight".into(), obj.ce_weight.to_string()));
    let abort = |source, report| RunAborted {
        source,
        report: Box::new(report),
    };
    if let Err(e) = opt.validate().and_then(|_| spec.validate()) {
        return Err(abort(e, report));
    }
    let mut state = init;
    let mut sampler = PkSampler::with_rng(data.classes(), stream(seed, TRAIN_STREAM));
    match train_epochs(&mut state, data, obj, epochs, spec, &mut sampler, opt) {
        Ok(losses) => {
            report.total_epochs = losses.len();
            report.best_loss = losses.last().map(|l| l.loss.total);
            report.epochs = losses
                .into_iter()
                .map(|loss| EpochRow {
                    phase: Phase::Train,
                    round: 0,
                    candidate: None,
                    w: obj.w,
                    loss,
                })
                .collect();
            Ok(RunOutcome {
                best: state.clone(),
                last: state,
                report,
            })
        }
        Err(e) => Err(abort(e, report)),
    }
}

/// The progressive loop.
///
/// Starting from an `N`-point stratified design in `bounds`, each round
/// explores candidates (all of them, or only unscored ones under
/// [`ReExplorePolicy::Stale`]) from a common checkpoint with a shared batch
/// stream, fits the Gaussian process to the drop-rate objectives, proposes
/// the Expected-Improvement maximizer `w'`, adds it to the design and trains
/// up to `exploit_epochs` epochs under it. The loop ends once `max_epochs`
/// epochs have been consumed; exploitation is cut short to respect the
/// budget, exploration is not.
pub fn run_pla(
    data: &TrainSet,
    cfg: &PlaConfig,
    opt: &OptimizerConfig,
    bounds: &HyperBox,
    init: Checkpoint,
    seed: u64,
) -> std::result::Result<RunOutcome, RunAborted> {
    let mut report = RunReport {
        header: base_header(TrainMode::Pla, seed, &cfg.batch_spec, opt),
        ..RunReport::default()
    };
    for (k, v) in [
        ("max_epochs", cfg.max_epochs.to_string()),
        ("initial_design", cfg.initial_design.to_string()),
        ("explore_epochs", cfg.explore_epochs.to_string()),
        ("exploit_epochs", cfg.exploit_epochs.to_string()),
        ("objective_split", cfg.objective_split.to_string()),
        ("expected_drop", cfg.expected_drop.to_string()),
        ("pool_size", cfg.pool_size.to_string()),
        (
            "re_explore_policy",
            format!("{:?}", cfg.re_explore_policy).to_lowercase(),
        ),
        (
            "kernel",
            match cfg.kernel {
                KernelForm::SquaredExponential => "squared_exponential",
                KernelForm::Literal => "literal",
            }
            .to_string(),
        ),
        ("bandwidth", "re-estimated every round".to_string()),
        (
            "full_scale_max_epochs",
            PlaConfig::FULL_SCALE_MAX_EPOCHS.to_string(),
        ),
        (
            "full_scale_explore_epochs",
            PlaConfig::FULL_SCALE_EXPLORE_EPOCHS.to_string(),
        ),
        (
            "full_scale_exploit_epochs",
            PlaConfig::FULL_SCALE_EXPLOIT_EPOCHS.to_string(),
        ),
    ] {
        report.header.push((k.to_string(), v));
    }
    let mut state = init;
    let best = state.clone();
    let mut run = PlaRun {
        data,
        cfg,
        opt,
        bounds,
        seed,
        report,
        best,
    };
    match run.execute(&mut state) {
        Ok(()) => Ok(RunOutcome {
            best: run.best,
            last: state,
            report: run.report,
        }),
        Err(source) => Err(RunAborted {
            source,
            report: Box::new(run.report),
        }),
    }
}

struct PlaRun<'a> {
    data: &'a TrainSet,
    cfg: &'a PlaConfig,
    opt: &'a OptimizerConfig,
    bounds: &'a HyperBox,
    seed: u64,
    report: RunReport,
    best: Checkpoint,
}

impl PlaRun<'_> {
    fn execute(&mut self, state: &mut Checkpoint) -> Result<()> {
        let cfg = self.cfg;
        cfg.validate()?;
        self.opt.validate()?;
        self.bounds.validate()?;
        if self.data.class_count() < cfg.batch_spec.identities {
            return Err(PlaError::InsufficientData {
                needed: cfg.batch_spec.identities,
                found: self.data.class_count(),
            });
        }

        let mut design_rng = stream(self.seed, DESIGN_STREAM);
        let mut exploit_sampler =
            PkSampler::with_rng(self.data.classes(), stream(self.seed, TRAIN_STREAM));
        let mut design = initial_design(cfg.initial_design, self.bounds, &mut design_rng);
        let mut scores: Vec<Option<f64>> = vec![None; design.len()];
        let mut consumed = 0usize;

        for round in 0.. {
            let pending: Vec<usize> = match cfg.re_explore_policy {
                ReExplorePolicy::All => (0..design.len()).collect(),
                ReExplorePolicy::Stale => {
                    (0..design.len()).filter(|&i| scores[i].is_none()).collect()
                }
            };
            let explored = self.explore_round(state, &design, &pending, round)?;
            for (i, (record, losses)) in pending.iter().copied().zip(explored) {
                scores[i] = Some(record.objective_value);
                self.report.explorations.push(ExplorationRow {
                    round,
                    candidate: i,
                    record,
                });
                self.report
                    .epochs
                    .extend(losses.into_iter().map(|loss| EpochRow {
                        phase: Phase::Explore,
                        round,
                        candidate: Some(i),
                        w: design[i],
                        loss,
                    }));
                consumed += cfg.explore_epochs;
                self.report.total_epochs = consumed;
            }
            if consumed >= cfg.max_epochs {
                break;
            }

            let (points, values): (Vec<HyperParams>, Vec<f64>) = design
                .iter()
                .zip(&scores)
                .filter_map(|(w, s)| s.map(|v| (*w, v)))
                .unzip();
            let gp = GpState::from_observations(points, values, self.bounds)?.with_form(cfg.kernel);
            let proposal = propose(&gp, self.bounds, cfg.pool_size, &mut design_rng)?;
            let chosen = proposal.params;
            let candidate = match design.iter().position(|w| *w == chosen) {
                Some(i) => i,
                None => {
                    design.push(chosen);
                    scores.push(None);
                    design.len() - 1
                }
            };

            let n = cfg.exploit_epochs.min(cfg.max_epochs - consumed);
            state.epoch = consumed;
            let obj = Objective::composite(chosen, cfg.metric);
            let losses = train_epochs(
                state,
                self.data,
                &obj,
                n,
                &cfg.batch_spec,
                &mut exploit_sampler,
                self.opt,
            )?;
            consumed += n;
            self.report.total_epochs = consumed;
            let mean_loss = losses.iter().map(|l| l.loss.total).sum::<f64>() / n as f64;
            self.report
                .epochs
                .extend(losses.into_iter().map(|loss| EpochRow {
                    phase: Phase::Exploit,
                    round,
                    candidate: Some(candidate),
                    w: chosen,
                    loss,
                }));
            self.report.rounds.push(RoundRow {
                round,
                chosen,
                candidate,
                expected_improvement: proposal.expected_improvement,
                best_objective: gp.best_value(),
                bandwidth: gp.bandwidth().to_vec(),
                exploit_epochs: n,
                mean_loss,
            });
            if self.report.best_loss.is_none_or(|b| mean_loss < b) {
                self.report.best_loss = Some(mean_loss);
                self.best = state.clone();
            }
            if consumed >= cfg.max_epochs {
                break;
            }
        }
        Ok(())
    }

    /// Explores `pending` candidates from `state` with a batch stream shared
    /// by the whole round. Results are in `pending` order.
    fn explore_round(
        &self,
        state: &Checkpoint,
        design: &[HyperParams],
        pending: &[usize],
        round: usize,
    ) -> Result<Vec<(ExplorationRecord, Vec<EpochLoss>)>> {
        let sampler = PkSampler::with_rng(
            self.data.classes(),
            stream(self.seed, EXPLORE_STREAM_BASE + round as u64),
        );
        let one = |i: usize| {
            let mut st = state.clone();
            let mut s = sampler.clone();
            explore(&mut st, self.data, &design[i], self.cfg, self.opt, &mut s)
        };
        let parallel =
            self.cfg.parallel_explore && self.cfg.re_explore_policy == ReExplorePolicy::All;
        if parallel {
            pending.par_iter().map(|&i| one(i)).collect()
        } else {
            pending.iter().map(|&i| one(i)).collect()
        }
    }
}

//! Task sequencing, the SGD training loop with early stopping, and the
//! incremental-learning strategies.
//!
//! Task 1 trains a network from scratch with the student loss and freezes it as
//! the first teacher. Every later task clones the teacher into a student, trains
//! the student against the teacher under the chosen strategy, and promotes the
//! student to be the next teacher.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{cutmix, SampleSet, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::metrics::{EpochLog, EpochRecord, ExperimentReport, RunMeta, TaskMetrics, TaskResult, POSITIVE_CLASS};
use crate::network::{Network, DEFAULT_LAYERS, NUM_CLASSES};
use crate::repmem::{self, BlockSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Student, distillation and representation losses.
    #[serde(rename = "CoReD")]
    CoReD,
    /// Plain fine-tuning with the student loss.
    #[serde(rename = "TF")]
    FineTune,
    /// Student loss plus an L2-SP pull towards the source weights.
    #[serde(rename = "TG")]
    L2Sp,
    /// Student and distillation losses.
    #[serde(rename = "DL")]
    Distill,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::CoReD => "CoReD",
            StrategyKind::FineTune => "TF",
            StrategyKind::L2Sp => "TG",
            StrategyKind::Distill => "DL",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CoReD" | "cored" => Ok(StrategyKind::CoReD),
            "TF" | "tf" => Ok(StrategyKind::FineTune),
            "TG" | "tg" | "TG_L2SP" => Ok(StrategyKind::L2Sp),
            "DL" | "dl" => Ok(StrategyKind::Distill),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub weights: LossWeights,
    /// Weight of `‖w − w_source‖²`, used by TG only.
    #[serde(default = "default_l2sp_lambda")]
    pub l2sp_lambda: f64,
}

fn default_l2sp_lambda() -> f64 {
    0.01
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self { kind, weights: LossWeights::default(), l2sp_lambda: default_l2sp_lambda() }
    }

    pub fn cored() -> Self {
        Self::new(StrategyKind::CoReD)
    }

    pub fn fine_tune() -> Self {
        Self::new(StrategyKind::FineTune)
    }

    pub fn distill() -> Self {
        Self::new(StrategyKind::Distill)
    }

    pub fn l2sp() -> Self {
        Self::new(StrategyKind::L2Sp)
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Loss weights actually applied: unused terms are zeroed per strategy.
    pub fn effective_weights(&self) -> LossWeights {
        let w = self.weights;
        match self.kind {
            StrategyKind::CoReD => w,
            StrategyKind::Distill => LossWeights { gamma: 0.0, ..w },
            StrategyKind::FineTune | StrategyKind::L2Sp => LossWeights { beta: 0.0, gamma: 0.0, ..w },
        }
    }

    fn penalty_weight(&self) -> f64 {
        if self.kind == StrategyKind::L2Sp {
            self.l2sp_lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !self.l2sp_lambda.is_finite() || self.l2sp_lambda < 0.0 {
            return Err(Error::Parameter(format!("l2sp_lambda must be non-negative, got {}", self.l2sp_lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-sample probability that CutMix is applied to a training sample.
    pub cutmix_probability: f64,
    pub layers: Vec<usize>,
    pub strategy: Strategy,
    pub block_spec: BlockSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            learning_rate: 0.05,
            momentum: 0.1,
            batch_size: 32,
            seed: 0,
            cutmix_probability: 0.5,
            layers: DEFAULT_LAYERS.to_vec(),
            strategy: Strategy::cored(),
            block_spec: BlockSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("max_epochs, patience and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.cutmix_probability) {
            return Err(Error::Parameter(format!("cutmix_probability outside [0, 1]: {}", self.cutmix_probability)));
        }
        self.strategy.validate()?;
        self.block_spec.validate()
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g; w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar = f64> {
    pub learning_rate: S,
    pub momentum: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate: S::of(learning_rate), momentum: S::of(momentum), velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<S>] {
        &self.velocity
    }

    /// Applies one update; `grads` holds one vector per parameter tensor.
    pub fn step(&mut self, net: &mut Network<S>, grads: &[Vec<S>]) -> Result<()> {
        let params: Vec<&mut Tensor<S>> = net.parameters_mut()?.collect();
        if grads.len() != params.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Dimension("gradients do not match network parameters".into()));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
        }
        for ((param, grad), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in param.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= self.learning_rate * *v;
            }
        }
        Ok(())
    }
}

/// Tracks the best validation loss and the parameters that achieved it.
#[derive(Debug, Clone)]
pub struct EarlyStopping<P> {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    best: Option<P>,
    since_best: usize,
}

impl<P> EarlyStopping<P> {
    pub fn new(patience: usize) -> Self {
        Self { patience, best_loss: f64::INFINITY, best_epoch: 0, best: None, since_best: 0 }
    }

    /// Records an epoch; `snapshot` is only called on improvement. Returns `true`
    /// once `patience` epochs have passed without a strictly lower loss.
    pub fn record(&mut self, epoch: usize, val_loss: f64, snapshot: impl FnOnce() -> P) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.best = Some(snapshot());
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn into_best(self) -> Option<P> {
        self.best
    }
}

/// Receives each epoch record as soon as it is produced.
pub trait EpochSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

impl EpochSink for () {
    fn record(&mut self, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl EpochSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

impl EpochSink for EpochLog {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.append(record)
    }
}

/// What one task's training produced besides the network.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub task: String,
    pub epochs: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Fixed inputs of a training run on one task.
struct Objective<'a, S: Scalar> {
    teacher: Option<&'a Network<S>>,
    source: Option<Vec<Tensor<S>>>,
    weights: LossWeights,
    penalty: f64,
    block_spec: BlockSpec,
}

struct BatchLoss {
    total: Var,
    breakdown: LossBreakdown,
    student_logits: Var,
    memory: Option<repmem::RepresentationMemory>,
}

impl<S: Scalar> Objective<'_, S> {
    fn uses_teacher(&self) -> bool {
        self.teacher.is_some() && (self.weights.beta > 0.0 || self.weights.gamma > 0.0)
    }

    /// Records the strategy loss. `mixed` carries the CutMix inputs and soft
    /// labels for the student term; the teacher terms always see `clean`.
    fn record(
        &self,
        tape: &mut Tape<S>,
        student: &Network<S>,
        params: &[Var],
        clean: &Tensor<S>,
        labels: &[u8],
        mixed: Option<(&Tensor<S>, &Tensor<S>)>,
    ) -> Result<BatchLoss> {
        let x = tape.constant(clean.clone());
        let clean_logits = student.forward_with(tape, x, params)?;
        let student_term = match mixed {
            Some((xm, soft)) => {
                let xm = tape.constant(xm.clone());
                let logits = student.forward_with(tape, xm, params)?;
                losses::student_loss_soft(tape, logits, soft)?
            }
            None => losses::student_loss(tape, clean_logits, labels)?,
        };
        let mut terms = LossTerms { student: Some(student_term), ..Default::default() };
        let mut memory = None;

        if let (true, Some(teacher)) = (self.uses_teacher(), self.teacher) {
            let teacher_logits = teacher.forward(tape, x, false)?.logits;
            if self.weights.beta > 0.0 {
                let tau = S::of(self.weights.tau);
                terms.distillation = Some(losses::distillation_loss(tape, teacher_logits, clean_logits, tau)?);
            }
            if self.weights.gamma > 0.0 {
                let frozen = tape.detach(teacher_logits);
                let tp = tape.softmax(frozen, S::one())?;
                let sp = tape.softmax(clean_logits, S::one())?;
                let (lr, mem) = repmem::representation_loss_on_tape(tape, tp, sp, labels, &self.block_spec)?;
                terms.representation = Some(lr);
                memory = Some(mem);
            }
        }

        if let (Some(source), true) = (&self.source, self.penalty > 0.0) {
            let mut acc: Option<Var> = None;
            for (&p, src) in params.iter().zip(source) {
                let s = tape.constant(src.clone());
                let d = tape.sub(p, s)?;
                let sq = tape.mul(d, d)?;
                let sum = tape.sum(sq);
                acc = Some(match acc {
                    Some(a) => tape.add(a, sum)?,
                    None => sum,
                });
            }
            terms.penalty = acc.map(|a| tape.scale(a, S::of(self.penalty)));
        }

        let (total, breakdown) = losses::combine(tape, terms, &self.weights)?;
        Ok(BatchLoss { total, breakdown, student_logits: clean_logits, memory })
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        student: sum(|b| b.student),
        distillation: sum(|b| b.distillation),
        representation: sum(|b| b.representation),
        penalty: sum(|b| b.penalty),
        total: sum(|b| b.total),
    }
}

fn fake_probabilities<S: Scalar>(logits: &Tensor<S>) -> Vec<f64> {
    crate::autodiff::softmax_rows(logits.data(), NUM_CLASSES, S::one())
        .chunks(NUM_CLASSES)
        .map(|r| r[POSITIVE_CLASS as usize].as_f64())
        .collect()
}

/// Test metrics of `net` on one split.
pub fn evaluate<S: Scalar>(net: &Network<S>, set: &SampleSet, task: &str) -> Result<TaskMetrics> {
    let (x, labels) = set.all::<S>();
    let logits = net.logits(&x)?;
    TaskMetrics::evaluate(task, &fake_probabilities(&logits), &labels)
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 40) | ((epoch as u64) << 8) | purpose);
    rng
}

/// Trains `student` on `data` under `objective` with minibatch SGD and early
/// stopping on validation loss; the best epoch's parameters are restored.
fn fit<S: Scalar>(
    mut student: Network<S>,
    objective: &Objective<'_, S>,
    data: &TaskDataset,
    config: &TrainConfig,
    stage: u64,
    sink: &mut dyn EpochSink,
) -> Result<(Network<S>, FitSummary)> {
    config.validate()?;
    if student.input_dim() != data.dim() {
        return Err(Error::Dimension(format!(
            "network expects {} inputs but task {} has {} pixels",
            student.input_dim(),
            data.task_id,
            data.dim()
        )));
    }
    let image = (data.train.height, data.train.width);
    let mut sgd = Sgd::<S>::new(config.learning_rate, config.momentum);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    let (val_x, val_labels) = data.validation.all::<S>();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut shuffle_rng = epoch_rng(config.seed, stage, epoch, 1);
        let mut mix_rng = epoch_rng(config.seed, stage, epoch, 2);
        order.shuffle(&mut shuffle_rng);

        let mut parts = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = data.train.batch::<S>(chunk);
            let mixed = if config.cutmix_probability > 0.0 && chunk.len() >= 2 {
                let soft = losses::one_hot::<S>(&labels)?;
                Some(cutmix(&x, &soft, image, config.cutmix_probability, &mut mix_rng)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let params = student.register_parameters(&mut tape, true);
            let loss =
                objective.record(&mut tape, &student, &params, &x, &labels, mixed.as_ref().map(|(a, b)| (a, b)))?;
            if !loss.breakdown.is_finite() || !tape.value(loss.student_logits).all_finite() {
                return Err(Error::Divergence { task: data.task_id.clone(), epoch });
            }
            tape.backward(loss.total)?;
            let grads: Vec<Vec<S>> = params.iter().map(|&p| tape.grad(p).expect("tracked").to_vec()).collect();
            sgd.step(&mut student, &grads)?;
            parts.push(loss.breakdown);
        }

        let mut tape = Tape::new();
        let params = student.register_parameters(&mut tape, false);
        let val = objective.record(&mut tape, &student, &params, &val_x, &val_labels, None)?;
        if !val.breakdown.is_finite() || !tape.value(val.student_logits).all_finite() {
            return Err(Error::Divergence { task: data.task_id.clone(), epoch });
        }
        let val_logits = tape.value(val.student_logits);
        let val_metrics = TaskMetrics::evaluate(data.task_id.clone(), &fake_probabilities(val_logits), &val_labels)?;

        let record = EpochRecord {
            task: data.task_id.clone(),
            epoch,
            train: mean_breakdown(&parts),
            val_loss: val.breakdown.total,
            val_f1: val_metrics.f1,
            val_auroc: val_metrics.auroc,
            memory: val.memory.map(|m| m.blocks),
        };
        sink.record(&record)?;
        epochs.push(record);

        if stopper.record(epoch, val.breakdown.total, || student.flat_parameters()) {
            break;
        }
    }

    let best_epoch = stopper.best_epoch();
    let best_val_loss = stopper.best_loss();
    if let Some(best) = stopper.into_best() {
        student.load_flat_parameters(&best)?;
    }
    let summary = FitSummary { task: data.task_id.clone(), epochs, epochs_run, best_epoch, best_val_loss };
    Ok((student, summary))
}

/// Trains the first teacher from scratch with the student loss only.
pub fn train_task1<S: Scalar>(
    data: &TaskDataset,
    config: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<(Network<S>, FitSummary)> {
    if !data.train.has_both_classes() {
        return Err(Error::Data(format!("task {} training split has a single class", data.task_id)));
    }
    let student = Network::init(&config.layers, config.seed)?;
    let objective = Objective {
        teacher: None,
        source: None,
        weights: LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0, ..config.strategy.weights },
        penalty: 0.0,
        block_spec: config.block_spec,
    };
    let (net, summary) = fit(student, &objective, data, config, 0, sink)?;
    Ok((net.promote_to_teacher(), summary))
}

/// Frozen teacher, evaluation sets of every task seen so far, and history.
#[derive(Debug, Clone)]
pub struct TaskSequenceState<S: Scalar = f64> {
    pub current_task_index: usize,
    pub teacher: Network<S>,
    pub seen: Vec<(String, SampleSet)>,
    pub history: Vec<TaskResult>,
    pub epochs: Vec<EpochRecord>,
}

impl<S: Scalar> TaskSequenceState<S> {
    /// Wraps an already trained task-1 teacher, e.g. one loaded from a checkpoint.
    pub fn from_teacher(teacher: Network<S>, task1: &TaskDataset, summary: Option<FitSummary>) -> Result<Self> {
        let teacher = if teacher.is_frozen() { teacher } else { teacher.promote_to_teacher() };
        let mut state = Self {
            current_task_index: 1,
            teacher,
            seen: vec![(task1.task_id.clone(), task1.test.clone())],
            history: Vec::new(),
            epochs: Vec::new(),
        };
        state.close_task(summary.unwrap_or(FitSummary {
            task: task1.task_id.clone(),
            epochs: Vec::new(),
            epochs_run: 0,
            best_epoch: 0,
            best_val_loss: f64::NAN,
        }))?;
        Ok(state)
    }

    /// Task 1: train the first teacher and evaluate it.
    pub fn start(task1: &TaskDataset, config: &TrainConfig, sink: &mut dyn EpochSink) -> Result<Self> {
        let (teacher, summary) = train_task1(task1, config, sink)?;
        Self::from_teacher(teacher, task1, Some(summary))
    }

    fn close_task(&mut self, summary: FitSummary) -> Result<()> {
        let test =
            self.seen.iter().map(|(task, set)| evaluate(&self.teacher, set, task)).collect::<Result<Vec<_>>>()?;
        self.history.push(TaskResult {
            task: summary.task,
            epochs_run: summary.epochs_run,
            best_epoch: summary.best_epoch,
            best_val_loss: summary.best_val_loss,
            teacher_hash: self.teacher.parameter_hash(),
            test,
        });
        self.epochs.extend(summary.epochs);
        Ok(())
    }

    /// Trains a student cloned from the teacher on `data` and promotes it.
    pub fn learn_next_task(self, data: &TaskDataset, config: &TrainConfig, sink: &mut dyn EpochSink) -> Result<Self> {
        let seen = vec![(data.task_id.clone(), data.test.clone())];
        self.learn(data, seen, config, sink)
    }

    /// Learns two tasks at once from their balanced interleaving.
    pub fn learn_two_tasks_simultaneously(
        self,
        a: &TaskDataset,
        b: &TaskDataset,
        config: &TrainConfig,
        sink: &mut dyn EpochSink,
    ) -> Result<Self> {
        let merged = TaskDataset::interleave(a, b)?;
        let seen = vec![(a.task_id.clone(), a.test.clone()), (b.task_id.clone(), b.test.clone())];
        self.learn(&merged, seen, config, sink)
    }

    fn learn(
        mut self,
        data: &TaskDataset,
        new_tasks: Vec<(String, SampleSet)>,
        config: &TrainConfig,
        sink: &mut dyn EpochSink,
    ) -> Result<Self> {
        if !self.teacher.is_frozen() {
            return Err(Error::Contract("teacher must be frozen before learning a new task".into()));
        }
        let student = self.teacher.clone_as_student();
        let strategy = config.strategy;
        let objective = Objective {
            teacher: Some(&self.teacher),
            source: (strategy.penalty_weight() > 0.0).then(|| self.teacher.parameters().cloned().collect()),
            weights: strategy.effective_weights(),
            penalty: strategy.penalty_weight(),
            block_spec: config.block_spec,
        };
        let stage = self.current_task_index as u64;
        let (student, summary) = fit(student, &objective, data, config, stage, sink)?;

        self.teacher = student.promote_to_teacher();
        self.current_task_index += 1;
        self.seen.extend(new_tasks);
        self.close_task(summary)?;
        Ok(self)
    }

    pub fn report(&self, config: &TrainConfig) -> ExperimentReport {
        ExperimentReport {
            meta: RunMeta {
                seed: config.seed,
                strategy: config.strategy.name().to_string(),
                config_hash: config.config_hash(),
                task_sequence: self.history.iter().map(|t| t.task.clone()).collect(),
                positive_class: POSITIVE_CLASS,
            },
            epochs: self.epochs.clone(),
            tasks: self.history.clone(),
        }
    }
}

/// Metrics of an unmodified teacher on the test split of each dataset.
pub fn zero_shot_eval<S: Scalar>(teacher: &Network<S>, datasets: &[TaskDataset]) -> Result<Vec<TaskMetrics>> {
    if !teacher.is_frozen() {
        return Err(Error::Contract("zero-shot evaluation expects a frozen teacher".into()));
    }
    datasets.iter().map(|d| evaluate(teacher, &d.test, &d.task_id)).collect()
}

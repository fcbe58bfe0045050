//! Subcommand implementations. Each returns its outputs so the binary and the
//! tests can share them; printing is limited to progress and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cored::data::Split;
use cored::gradcheck::{self, Component, GradcheckConfig, GradcheckReport};
use cored::metrics::{EpochLog, TaskResult};
use cored::{
    emit_report, generate_task, zero_shot_eval, BlockSpec, Network, OpKind, Strategy, StrategyKind, TaskDataset,
    TaskMetrics, TaskSequenceState, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::spec::{RunSpec, Stage};
use crate::{exit, CliError, CliResult, ResultExt};

/// Distillation weights swept by `ablate distill_weight`.
pub const DISTILL_WEIGHTS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Ablation {
    BlockSize,
    LossComponents,
    Simultaneous,
    DistillWeight,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::BlockSize => "block_size",
            Ablation::LossComponents => "loss_components",
            Ablation::Simultaneous => "simultaneous",
            Ablation::DistillWeight => "distill_weight",
        }
    }
}

/// One configuration of an experiment, run once per seed.
#[derive(Debug, Clone)]
struct Variant {
    label: String,
    strategy: Strategy,
    block_spec: BlockSpec,
    stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Test F1 per task after the last stage, in `Comparison::tasks` order.
    pub final_f1: Vec<f64>,
    pub average_f1: f64,
    /// Report stem relative to the experiment directory.
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub label: String,
    pub strategy: String,
    pub block_spec: BlockSpec,
    pub beta: f64,
    pub stages: Vec<String>,
    /// Seed-averaged test F1; row `r` is after stage `r`, column `c` is task
    /// `Comparison::tasks[c]`, `null` where the task has not been learned yet.
    pub f1_matrix: Vec<Vec<Option<f64>>>,
    pub final_f1: Vec<f64>,
    pub average_f1: f64,
    pub per_seed: Vec<SeedOutcome>,
}

/// Cross-variant summary written as `comparison.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub variants: Vec<VariantSummary>,
    /// Variant labels by decreasing average F1.
    pub ranking: Vec<String>,
}

impl Comparison {
    pub fn variant(&self, label: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.label == label)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<14}", "variant");
        for t in &self.tasks {
            let _ = write!(out, " {:>8}", format!("task {t}"));
        }
        let _ = writeln!(out, " {:>8}", "avg");
        for v in &self.variants {
            let _ = write!(out, "{:<14}", v.label);
            for f in &v.final_f1 {
                let _ = write!(out, " {:>8.4}", f);
            }
            let _ = writeln!(out, " {:>8.4}", v.average_f1);
        }
        out
    }
}

/// Writes one CRD1 file per task and split under the run spec's data directory.
pub fn gen_data(spec: &RunSpec) -> CliResult<Vec<PathBuf>> {
    let dir = spec.data_root();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for k in 1..=spec.family.task_count() {
        let task = generate_task(&spec.family, k)?;
        written.extend(task.write_dir(&dir).with_context(|| format!("writing task {k}"))?);
    }
    Ok(written)
}

/// Loads the given tasks, failing with the missing-input code before reading
/// anything if a file is absent.
pub fn load_tasks(dir: &Path, tasks: &[usize]) -> CliResult<BTreeMap<usize, TaskDataset>> {
    let missing: Vec<String> = tasks
        .iter()
        .flat_map(|k| Split::ALL.iter().map(move |&s| TaskDataset::file_path(dir, &k.to_string(), s)))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::missing(format!(
            "missing dataset files (run `cored gen-data` first): {}",
            missing.join(", ")
        )));
    }
    tasks
        .iter()
        .map(|&k| {
            let data = TaskDataset::read_dir(dir, &k.to_string()).with_context(|| format!("reading task {k}"))?;
            Ok((k, data))
        })
        .collect()
}

fn check_dims(spec: &RunSpec, data: &BTreeMap<usize, TaskDataset>) -> CliResult<()> {
    for (k, d) in data {
        if d.dim() != spec.train.layers[0] {
            return Err(CliError::spec(format!(
                "task {k} has {} pixels per image but the network expects {}",
                d.dim(),
                spec.train.layers[0]
            )));
        }
    }
    Ok(())
}

/// Runs every strategy of the run spec over its task sequence.
pub fn run(spec: &RunSpec) -> CliResult<Comparison> {
    let variants = spec
        .strategies
        .iter()
        .map(|&s| Variant {
            label: s.name().to_string(),
            strategy: s,
            block_spec: spec.train.block_spec,
            stages: spec.stages(),
        })
        .collect::<Vec<_>>();
    experiment(spec, "run", &variants, &spec.out_root().join("run"))
}

pub fn ablate(spec: &RunSpec, which: Ablation) -> CliResult<Comparison> {
    let cored = spec.strategies.iter().copied().find(|s| s.kind == StrategyKind::CoReD).unwrap_or_else(Strategy::cored);
    let variant = |label: &str, strategy: Strategy, block_spec: BlockSpec, stages: Vec<Stage>| Variant {
        label: label.to_string(),
        strategy,
        block_spec,
        stages,
    };
    let stages = spec.stages();
    let block = spec.train.block_spec;
    let variants = match which {
        Ablation::BlockSize => vec![
            variant("b1", cored, BlockSpec::single(), stages.clone()),
            variant("b5", cored, BlockSpec::default(), stages),
        ],
        Ablation::LossComponents => {
            let with = |kind| Strategy { kind, ..cored };
            vec![
                variant("CoReD", cored, block, stages.clone()),
                variant("DL", with(StrategyKind::Distill), block, stages.clone()),
                variant("CE", with(StrategyKind::FineTune), block, stages),
            ]
        }
        Ablation::Simultaneous => {
            let tasks = spec.task_indices();
            if tasks.len() < 3 {
                return Err(CliError::spec("the simultaneous ablation needs a sequence of at least three tasks"));
            }
            let (a, b, c) = (tasks[0], tasks[1], tasks[2]);
            vec![
                variant("sequential", cored, block, vec![Stage::Single(a), Stage::Single(b), Stage::Single(c)]),
                variant("simultaneous", cored, block, vec![Stage::Single(a), Stage::Simultaneous([b, c])]),
            ]
        }
        Ablation::DistillWeight => DISTILL_WEIGHTS
            .iter()
            .map(|&beta| {
                let mut s = cored;
                s.weights.beta = beta;
                variant(&format!("beta{beta}"), s, block, stages.clone())
            })
            .collect(),
    };
    experiment(spec, which.name(), &variants, &spec.out_root().join("ablate").join(which.name()))
}

/// Runs every variant for every seed, sharing one task-1 teacher per seed.
fn experiment(spec: &RunSpec, name: &str, variants: &[Variant], dir: &Path) -> CliResult<Comparison> {
    let mut needed: Vec<usize> = variants.iter().flat_map(|v| v.stages.iter().flat_map(Stage::tasks)).collect();
    needed.sort_unstable();
    needed.dedup();
    let data = load_tasks(&spec.data_root(), &needed)?;
    check_dims(spec, &data)?;

    let first = variants[0].stages[0].tasks()[0];
    if variants.iter().any(|v| v.stages[0] != Stage::Single(first)) {
        return Err(CliError::spec("all variants must start from the same first task"));
    }
    let columns: Vec<usize> = {
        let mut order = Vec::new();
        for v in variants {
            for k in v.stages.iter().flat_map(Stage::tasks) {
                if !order.contains(&k) {
                    order.push(k);
                }
            }
        }
        order
    };

    // per variant, per seed: the task results of every stage
    let mut histories: Vec<Vec<(u64, Vec<TaskResult>, String)>> = vec![Vec::new(); variants.len()];
    for &seed in &spec.seeds {
        let seed_dir = dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&seed_dir).with_context(|| format!("creating {}", seed_dir.display()))?;
        let base = spec.config(seed, Strategy::fine_tune());
        eprintln!("[{name}] seed {seed}: training task {first}");
        let start = TaskSequenceState::<f64>::start(&data[&first], &base, &mut ())
            .with_context(|| format!("seed {seed}, task {first}"))?;
        start.teacher.write_checkpoint(seed_dir.join(format!("task{first}.crdm")))?;

        for (slot, v) in variants.iter().enumerate() {
            eprintln!("[{name}] seed {seed}: {}", v.label);
            let config = TrainConfig { block_spec: v.block_spec, ..spec.config(seed, v.strategy) };
            let stem = v.label.clone();
            let mut log = EpochLog::create(&seed_dir.join(format!("{stem}.epochs.jsonl")))?;
            for record in &start.epochs {
                log.append(record)?;
            }
            let mut state = start.clone();
            for stage in &v.stages[1..] {
                state = match *stage {
                    Stage::Single(k) => state.learn_next_task(&data[&k], &config, &mut log),
                    Stage::Simultaneous([a, b]) => {
                        state.learn_two_tasks_simultaneously(&data[&a], &data[&b], &config, &mut log)
                    }
                }
                .with_context(|| format!("seed {seed}, {}, stage {stage}", v.label))?;
            }
            emit_report(&state.report(&config), &seed_dir, &stem)?;
            state.teacher.write_checkpoint(seed_dir.join(format!("{stem}.final.crdm")))?;
            histories[slot].push((seed, state.history, format!("seed{seed}/{stem}")));
        }
    }

    let tasks: Vec<String> = columns.iter().map(|k| k.to_string()).collect();
    let summaries: Vec<VariantSummary> =
        variants.iter().zip(&histories).map(|(v, runs)| summarize(v, runs, &tasks)).collect();
    let mut ranking: Vec<&VariantSummary> = summaries.iter().collect();
    ranking.sort_by(|a, b| b.average_f1.total_cmp(&a.average_f1));
    let comparison = Comparison {
        experiment: name.to_string(),
        seeds: spec.seeds.clone(),
        tasks,
        ranking: ranking.iter().map(|v| v.label.clone()).collect(),
        variants: summaries,
    };
    let mut json = serde_json::to_string_pretty(&comparison)?;
    json.push('\n');
    std::fs::write(dir.join("comparison.json"), json)?;
    Ok(comparison)
}

fn f1_row(result: &TaskResult, tasks: &[String]) -> Vec<Option<f64>> {
    tasks.iter().map(|t| result.test.iter().find(|m| &m.task == t).map(|m| m.f1)).collect()
}

fn summarize(v: &Variant, runs: &[(u64, Vec<TaskResult>, String)], tasks: &[String]) -> VariantSummary {
    let n = runs.len() as f64;
    let rows = v.stages.len();
    let mut f1_matrix = vec![vec![None; tasks.len()]; rows];
    for (r, row) in f1_matrix.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let values: Vec<f64> = runs.iter().filter_map(|(_, h, _)| f1_row(&h[r], tasks)[c]).collect();
            if values.len() == runs.len() {
                *cell = Some(values.iter().sum::<f64>() / n);
            }
        }
    }
    // tasks this variant never learns are left out of its final averages
    let learned: Vec<usize> = (0..tasks.len()).filter(|&c| f1_matrix[rows - 1][c].is_some()).collect();
    let per_seed: Vec<SeedOutcome> = runs
        .iter()
        .map(|(seed, history, report)| {
            let row = f1_row(history.last().expect("at least one stage"), tasks);
            let final_f1: Vec<f64> = learned.iter().map(|&c| row[c].unwrap_or(f64::NAN)).collect();
            let average_f1 = final_f1.iter().sum::<f64>() / final_f1.len() as f64;
            SeedOutcome { seed: *seed, final_f1, average_f1, report: report.clone() }
        })
        .collect();
    let final_f1: Vec<f64> = learned.iter().map(|&c| f1_matrix[rows - 1][c].unwrap_or(f64::NAN)).collect();
    let average_f1 = per_seed.iter().map(|s| s.average_f1).sum::<f64>() / n;
    VariantSummary {
        label: v.label.clone(),
        strategy: v.strategy.name().to_string(),
        block_spec: v.block_spec,
        beta: v.strategy.effective_weights().beta,
        stages: v.stages.iter().map(ToString::to_string).collect(),
        f1_matrix,
        final_f1,
        average_f1,
        per_seed,
    }
}

/// Aggregate of the gradient audit over several seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    /// Worst relative error per component over all seeds.
    pub max_errors: Vec<(Component, f64)>,
    pub teacher_gradient_max: f64,
    pub reports: Vec<GradcheckReport>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed(self.tolerance))
    }
}

pub fn gradcheck(first_seed: u64, count: usize, fault: Option<&str>) -> CliResult<GradcheckSummary> {
    let fault = match fault {
        Some(name) => {
            let kind: OpKind = name.parse().map_err(CliError::spec)?;
            Some((kind, 0.5))
        }
        None => None,
    };
    let config = GradcheckConfig { fault, ..Default::default() };
    let seeds: Vec<u64> = (first_seed..first_seed + count.max(1) as u64).collect();
    let reports = seeds.iter().map(|&s| gradcheck::audit(s, &config)).collect::<cored::Result<Vec<_>>>()?;
    let max_errors = Component::ALL
        .iter()
        .map(|&c| {
            let worst = reports
                .iter()
                .flat_map(|r| r.components.iter().filter(|e| e.component == c))
                .map(|e| e.max_relative_error)
                .fold(0.0, f64::max);
            (c, worst)
        })
        .collect();
    let teacher_gradient_max = reports.iter().map(|r| r.teacher_gradient_max).fold(0.0, f64::max);
    Ok(GradcheckSummary { seeds, tolerance: gradcheck::DEFAULT_TOLERANCE, max_errors, teacher_gradient_max, reports })
}

/// Zero-shot metrics of a checkpoint on the test split of each task.
pub fn eval(checkpoint: &Path, data_dir: &Path, tasks: &[usize]) -> CliResult<Vec<TaskMetrics>> {
    if !checkpoint.is_file() {
        return Err(CliError::missing(format!("checkpoint {} not found", checkpoint.display())));
    }
    let teacher =
        Network::<f64>::read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let data = load_tasks(data_dir, tasks)?;
    for (k, d) in &data {
        if d.dim() != teacher.input_dim() {
            return Err(CliError::new(
                exit::SPEC,
                anyhow::anyhow!("task {k} images have {} pixels, checkpoint expects {}", d.dim(), teacher.input_dim()),
            ));
        }
    }
    let mut data = data;
    let sets: Vec<TaskDataset> = tasks.iter().filter_map(|k| data.remove(k)).collect();
    Ok(zero_shot_eval(&teacher, &sets)?)
}

pub fn metrics_table(rows: &[TaskMetrics]) -> String {
    let mut out = format!("{:<8} {:>8} {:>8} {:>8}\n", "task", "F1", "AUROC", "accuracy");
    for m in rows {
        let _ = writeln!(out, "{:<8} {:>8.4} {:>8.4} {:>8.4}", m.task, m.f1, m.auroc, m.accuracy);
    }
    out
}

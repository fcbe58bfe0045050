//! The run specification: one JSON document binding the task family, the
//! training configuration, the strategies, the task sequence and the seeds.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use cored::{Strategy, StrategyKind, TaskFamilySpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CORED_OUT";
pub const DEFAULT_OUT: &str = "cored-out";

/// One step of the task sequence: a single task index, or two indices learned
/// together, written `[2, 3]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stage {
    Single(usize),
    Simultaneous([usize; 2]),
}

impl Stage {
    pub fn tasks(&self) -> Vec<usize> {
        match *self {
            Stage::Single(k) => vec![k],
            Stage::Simultaneous([a, b]) => vec![a, b],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Single(k) => write!(f, "{k}"),
            Stage::Simultaneous([a, b]) => write!(f, "{a}&{b}"),
        }
    }
}

/// A strategy written either as its name (`"CoReD"`) or as a full object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum StrategyEntry {
    Name(StrategyKind),
    Full(Strategy),
}

fn strategies_de<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Strategy>, D::Error> {
    let entries = Vec::<StrategyEntry>::deserialize(d)?;
    Ok(entries
        .into_iter()
        .map(|e| match e {
            StrategyEntry::Name(kind) => Strategy::new(kind),
            StrategyEntry::Full(s) => s,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub family: TaskFamilySpec,
    /// Shared training settings; `seed` and `strategy` are set per run.
    pub train: TrainConfig,
    #[serde(deserialize_with = "strategies_de")]
    pub strategies: Vec<Strategy>,
    /// Empty means every task of the family in order.
    pub sequence: Vec<Stage>,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            family: TaskFamilySpec::default(),
            train: TrainConfig::default(),
            strategies: vec![Strategy::fine_tune(), Strategy::l2sp(), Strategy::distill(), Strategy::cored()],
            sequence: Vec::new(),
            seeds: (0..5).collect(),
            data_dir: None,
            out_dir: None,
        }
    }
}

/// Command-line values that take precedence over the run spec file.
#[derive(Debug, Clone, Default)]
pub struct SpecOverrides {
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub strategies: Option<Vec<String>>,
    pub max_epochs: Option<usize>,
}

impl RunSpec {
    pub fn from_json(text: &str) -> CliResult<Self> {
        // serde_json's message carries the line and column.
        serde_json::from_str(text).map_err(|e| CliError::spec(format!("invalid run spec: {e}")))
    }

    /// Reads and validates a spec; `None` yields the defaults.
    pub fn load(path: Option<&Path>, overrides: &SpecOverrides) -> CliResult<Self> {
        let mut spec = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::missing(format!("cannot read spec {}: {e}", p.display())))?;
                Self::from_json(&text).map_err(|e| e.context(format!("in {}", p.display())))?
            }
            None => Self::default(),
        };
        spec.apply(overrides)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn apply(&mut self, o: &SpecOverrides) -> CliResult<()> {
        if let Some(dir) = &o.out_dir {
            self.out_dir = Some(dir.clone());
        }
        if let Some(dir) = &o.data_dir {
            self.data_dir = Some(dir.clone());
        }
        if let Some(seeds) = &o.seeds {
            self.seeds = seeds.clone();
        }
        if let Some(names) = &o.strategies {
            self.strategies = names
                .iter()
                .map(|n| n.parse::<StrategyKind>().map(Strategy::new).map_err(CliError::spec))
                .collect::<CliResult<_>>()?;
        }
        if let Some(n) = o.max_epochs {
            self.train.max_epochs = n;
        }
        Ok(())
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> CliResult<()> {
        self.family.validate().map_err(|e| CliError::spec(format!("family: {e}")))?;
        self.train.validate().map_err(|e| CliError::spec(format!("train: {e}")))?;
        let pixels = self.family.image_size * self.family.image_size;
        if self.train.layers.first() != Some(&pixels) {
            return Err(CliError::spec(format!(
                "train.layers must start with the {pixels} input pixels, got {:?}",
                self.train.layers
            )));
        }
        if self.train.layers.last() != Some(&2) {
            return Err(CliError::spec(format!("train.layers must end with 2 classes, got {:?}", self.train.layers)));
        }

        if self.strategies.is_empty() {
            return Err(CliError::spec("at least one strategy is required"));
        }
        let mut names = BTreeSet::new();
        for s in &self.strategies {
            s.validate().map_err(|e| CliError::spec(format!("strategy {}: {e}", s.name())))?;
            if !names.insert(s.name()) {
                return Err(CliError::spec(format!("strategy {} listed twice", s.name())));
            }
        }

        if self.seeds.is_empty() {
            return Err(CliError::spec("at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(CliError::spec(format!("duplicate seeds in {:?}", self.seeds)));
        }

        let stages = self.stages();
        let n = self.family.task_count();
        if !matches!(stages.first(), Some(Stage::Single(_))) {
            return Err(CliError::spec("the sequence must start with a single task"));
        }
        let mut seen = BTreeSet::new();
        for k in stages.iter().flat_map(Stage::tasks) {
            if k == 0 || k > n {
                return Err(CliError::spec(format!("task index {k} outside 1..={n}")));
            }
            if !seen.insert(k) {
                return Err(CliError::spec(format!("task {k} appears twice in the sequence")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<Stage> {
        if self.sequence.is_empty() {
            (1..=self.family.task_count()).map(Stage::Single).collect()
        } else {
            self.sequence.clone()
        }
    }

    /// Task indices in sequence order.
    pub fn task_indices(&self) -> Vec<usize> {
        self.stages().iter().flat_map(Stage::tasks).collect()
    }

    /// Flag, then spec file, then `CORED_OUT`, then `cored-out`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_root().join("data"))
    }

    /// Training configuration of one run.
    pub fn config(&self, seed: u64, strategy: Strategy) -> TrainConfig {
        TrainConfig { seed, strategy, ..self.train.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exit;

    #[test]
    fn defaults_are_valid() {
        let spec = RunSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.task_indices(), vec![1, 2, 3]);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let spec =
            RunSpec::from_json(r#"{"strategies": ["TF", {"kind": "CoReD"}], "sequence": [1, [2, 3]], "seeds": [7]}"#)
                .unwrap();
        assert_eq!(spec.strategies, vec![Strategy::fine_tune(), Strategy::cored()]);
        assert_eq!(spec.stages(), vec![Stage::Single(1), Stage::Simultaneous([2, 3])]);
        assert_eq!(spec.family, TaskFamilySpec::default());
        spec.validate().unwrap();
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = RunSpec::from_json("{\n  \"seeds\": [1,\n}").unwrap_err();
        assert_eq!(err.code, exit::SPEC);
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert_eq!(RunSpec::from_json(r#"{"sedes": [1]}"#).unwrap_err().code, exit::SPEC);
    }

    #[test]
    fn invalid_sequences() {
        for seq in ["[2, 1]", "[[1, 2], 3]", "[1, 1]", "[1, 4]", "[0]"] {
            let spec = RunSpec { sequence: serde_json::from_str(seq).unwrap(), ..Default::default() };
            if seq == "[2, 1]" {
                // a different first task is allowed
                spec.validate().unwrap();
                continue;
            }
            assert_eq!(spec.validate().unwrap_err().code, exit::SPEC, "{seq}");
        }
    }

    #[test]
    fn layer_shape_must_match_images() {
        let mut spec = RunSpec::default();
        spec.train.layers = vec![10, 2];
        assert_eq!(spec.validate().unwrap_err().code, exit::SPEC);
    }

    #[test]
    fn overrides_win() {
        let o = SpecOverrides {
            seeds: Some(vec![9]),
            strategies: Some(vec!["DL".into()]),
            max_epochs: Some(3),
            out_dir: Some("x".into()),
            ..Default::default()
        };
        let mut spec = RunSpec::default();
        spec.apply(&o).unwrap();
        assert_eq!(spec.seeds, vec![9]);
        assert_eq!(spec.strategies, vec![Strategy::distill()]);
        assert_eq!(spec.train.max_epochs, 3);
        assert_eq!(spec.data_root(), Path::new("x").join("data"));
        let bad = SpecOverrides { strategies: Some(vec!["XX".into()]), ..Default::default() };
        assert_eq!(spec.apply(&bad).unwrap_err().code, exit::SPEC);
    }
}

//! Representation memory: per-class, confidence-partitioned aggregates of teacher
//! and student probabilities, and the squared-gap loss between them.
//!
//! Blocks are anchored on the teacher. Each sample's ground-truth-class teacher
//! probability `p_T` selects a block `[m + k·v, m + (k+1)·v)` (the last block is
//! closed on top); the student's probability for the same samples fills the
//! student side of that block. Samples with `p_T < m` are not stored. Memory is
//! rebuilt for every batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::NUM_CLASSES;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSpec {
    /// Number of blocks `b`.
    #[serde(alias = "b")]
    pub blocks: usize,
    /// Block width `v`.
    #[serde(alias = "v")]
    pub width: f64,
    /// Lower edge of the first block `m`.
    #[serde(alias = "m")]
    pub start: f64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self { blocks: 5, width: 0.1, start: 0.5 }
    }
}

impl BlockSpec {
    /// One block covering `[0.5, 1.0]`.
    pub fn single() -> Self {
        Self { blocks: 1, width: 0.5, start: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Parameter("block count must be at least 1".into()));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Parameter(format!("block width must be positive, got {}", self.width)));
        }
        if !(0.0..=1.0).contains(&self.start) {
            return Err(Error::Parameter(format!("block start must lie in [0, 1], got {}", self.start)));
        }
        if self.start + self.blocks as f64 * self.width > 1.0 + 1e-12 {
            return Err(Error::Parameter(format!(
                "blocks overrun probability 1: {} + {}·{}",
                self.start, self.blocks, self.width
            )));
        }
        Ok(())
    }

    fn lower(&self, k: usize) -> f64 {
        self.start + k as f64 * self.width
    }

    /// `(lower, upper)` edge of every block.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        (0..self.blocks).map(|k| (self.lower(k), self.lower(k + 1))).collect()
    }

    /// Block holding probability `p`, or `None` below the start.
    pub fn block_of(&self, p: f64) -> Option<usize> {
        if p < self.start {
            return None;
        }
        let k = (1..self.blocks).take_while(|&k| p >= self.lower(k)).count();
        Some(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    /// Ground-truth class, 0 = real, 1 = fake.
    pub class: u8,
    pub block: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub teacher_mean: f64,
    pub student_mean: f64,
}

/// Memory for one batch, with `members` recording which samples fed each block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMemory {
    pub spec: BlockSpec,
    /// Indexed `class * blocks + block`.
    pub blocks: Vec<BlockStats>,
    #[serde(skip)]
    members: Vec<Vec<usize>>,
}

impl RepresentationMemory {
    pub fn block(&self, class: u8, k: usize) -> &BlockStats {
        &self.blocks[class as usize * self.spec.blocks + k]
    }

    pub fn populated(&self) -> impl Iterator<Item = &BlockStats> {
        self.blocks.iter().filter(|b| b.count > 0)
    }

    pub fn assigned(&self) -> usize {
        self.blocks.iter().map(|b| b.count).sum()
    }

    /// `Σ (student_mean − teacher_mean)²` over populated blocks of both classes.
    pub fn loss(&self) -> f64 {
        self.populated().map(|b| (b.student_mean - b.teacher_mean).powi(2)).sum()
    }
}

fn check_distributions<S: Scalar>(probs: &Tensor<S>, who: &str) -> Result<usize> {
    let (n, c) = probs.dims2()?;
    if c != NUM_CLASSES {
        return Err(Error::Dimension(format!("{who} probabilities must have 2 columns, got {c}")));
    }
    for i in 0..n {
        let row = probs.row(i);
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::Data(format!("{who} row {i} is not a probability distribution: {row:?}")));
        }
    }
    Ok(n)
}

/// Buckets the batch into per-class, per-block aggregates.
pub fn build_memory<S: Scalar>(
    teacher_probs: &Tensor<S>,
    student_probs: &Tensor<S>,
    labels: &[u8],
    spec: &BlockSpec,
) -> Result<RepresentationMemory> {
    spec.validate()?;
    let n = check_distributions(teacher_probs, "teacher")?;
    if check_distributions(student_probs, "student")? != n || labels.len() != n {
        return Err(Error::Dimension(format!(
            "teacher {:?}, student {:?} and {} labels disagree",
            teacher_probs.shape(),
            student_probs.shape(),
            labels.len()
        )));
    }
    let slots = NUM_CLASSES * spec.blocks;
    let mut members = vec![Vec::new(); slots];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= NUM_CLASSES {
            return Err(Error::Data(format!("label {y} at index {i} is not 0 or 1")));
        }
        let p_t = teacher_probs.row(i)[y as usize].as_f64();
        if let Some(k) = spec.block_of(p_t) {
            members[y as usize * spec.blocks + k].push(i);
        }
    }
    let intervals = spec.intervals();
    let blocks = members
        .iter()
        .enumerate()
        .map(|(slot, idx)| {
            let (class, k) = ((slot / spec.blocks) as u8, slot % spec.blocks);
            let mean = |probs: &Tensor<S>| {
                if idx.is_empty() {
                    0.0
                } else {
                    idx.iter().map(|&i| probs.row(i)[class as usize].as_f64()).sum::<f64>() / idx.len() as f64
                }
            };
            BlockStats {
                class,
                block: k,
                lower: intervals[k].0,
                upper: intervals[k].1,
                count: idx.len(),
                teacher_mean: mean(teacher_probs),
                student_mean: mean(student_probs),
            }
        })
        .collect();
    Ok(RepresentationMemory { spec: *spec, blocks, members })
}

/// Plain value of the representation loss for a built memory.
pub fn representation_loss(mem: &RepresentationMemory) -> f64 {
    mem.loss()
}

/// Differentiable representation loss. `teacher_probs` is read as a constant;
/// gradient flows only into `student_probs`.
pub fn representation_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    teacher_probs: Var,
    student_probs: Var,
    labels: &[u8],
    spec: &BlockSpec,
) -> Result<(Var, RepresentationMemory)> {
    let mem = build_memory(tape.value(teacher_probs), tape.value(student_probs), labels, spec)?;
    let populated: Vec<usize> = (0..mem.blocks.len()).filter(|&s| mem.blocks[s].count > 0).collect();
    if populated.is_empty() {
        let zero = tape.constant(Tensor::scalar(S::zero()));
        return Ok((zero, mem));
    }

    // Averaging matrix over the flattened N×2 probabilities: row r picks the
    // ground-truth entries of block r's members with weight 1/count.
    let n = labels.len();
    let flat_len = n * NUM_CLASSES;
    let mut averaging = vec![S::zero(); populated.len() * flat_len];
    let mut teacher_means = Vec::with_capacity(populated.len());
    for (r, &slot) in populated.iter().enumerate() {
        let stats = &mem.blocks[slot];
        let w = S::one() / S::of(stats.count as f64);
        for &i in &mem.members[slot] {
            averaging[r * flat_len + i * NUM_CLASSES + stats.class as usize] = w;
        }
        teacher_means.push(S::of(stats.teacher_mean));
    }

    let a = tape.constant(Tensor::new(vec![populated.len(), flat_len], averaging)?);
    let flat = tape.reshape(student_probs, vec![flat_len, 1])?;
    let student_means = tape.matmul(a, flat)?;
    let targets = tape.constant(Tensor::new(vec![populated.len(), 1], teacher_means)?);
    let gap = tape.sub(student_means, targets)?;
    let sq = tape.mul(gap, gap)?;
    Ok((tape.sum(sq), mem))
}

//! Synthetic real/fake task family, the CRD1 dataset format and CutMix.
//!
//! Every task shares one "real" process: smooth random blobs on a grey field plus
//! Gaussian noise. A task's "fake" class adds a diagonal sinusoidal grid
//! `a_k · sin(2π f_k (x + y) / H + φ_k)` on top of a fresh real-process draw.
//! Real samples for a split come from a stream that ignores the task index, so
//! all tasks see the same real images, the way a single pristine source is
//! shared between forgery methods.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{ByteReader, NUM_CLASSES};
use crate::scalar::Scalar;

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

const DATASET_MAGIC: &[u8; 4] = b"CRD1";
const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn file_tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

/// Fake-class artifact of one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactParams {
    /// Cycles across the image along the diagonal.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskFamilySpec {
    pub image_size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub blob_count: usize,
    /// Blob peak heights are drawn from `±blob_amplitude`.
    pub blob_amplitude: f64,
    /// Gaussian blob radius in pixels; larger is smoother.
    pub blob_width: f64,
    /// Artifact of task `k` at index `k - 1`.
    pub tasks: Vec<ArtifactParams>,
    /// Sizes for task 1, which trains the first teacher.
    pub first_task: SplitSizes,
    /// Sizes for every later task.
    pub later_tasks: SplitSizes,
    pub seed: u64,
}

impl Default for TaskFamilySpec {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            image_size: 8,
            noise: 0.05,
            blob_count: 3,
            blob_amplitude: 0.3,
            blob_width: 1.5,
            tasks: vec![
                ArtifactParams { frequency: 1.0, phase: 0.0, amplitude: 0.12 },
                ArtifactParams { frequency: 3.0, phase: PI / 4.0, amplitude: 0.12 },
                ArtifactParams { frequency: 2.0, phase: PI / 2.0, amplitude: 0.12 },
            ],
            first_task: SplitSizes { train: 2000, validation: 400, test: 1000 },
            later_tasks: SplitSizes { train: 200, validation: 100, test: 1000 },
            seed: 2021,
        }
    }
}

impl TaskFamilySpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=32).contains(&self.image_size) {
            return Err(Error::Parameter(format!("image_size must be in 2..=32, got {}", self.image_size)));
        }
        let non_negative =
            [("noise", self.noise), ("blob_amplitude", self.blob_amplitude), ("blob_width", self.blob_width)];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.tasks.is_empty() {
            return Err(Error::Parameter("task family has no tasks".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if ![t.frequency, t.phase, t.amplitude].iter().all(|v| v.is_finite()) || t.amplitude < 0.0 {
                return Err(Error::Parameter(format!("task {}: invalid artifact {t:?}", i + 1)));
            }
            // amplitude 0 is the null-signal control
            if t.amplitude > 0.0 && t.amplitude <= self.noise {
                return Err(Error::Parameter(format!(
                    "task {}: artifact amplitude {} must exceed noise {}",
                    i + 1,
                    t.amplitude,
                    self.noise
                )));
            }
            for (j, u) in self.tasks.iter().enumerate().take(i) {
                if u.frequency == t.frequency && u.phase == t.phase {
                    return Err(Error::Parameter(format!("tasks {} and {} share frequency and phase", j + 1, i + 1)));
                }
            }
        }
        for sizes in [self.first_task, self.later_tasks] {
            for split in Split::ALL {
                let n = sizes.get(split);
                if n < 2 || n % 2 != 0 {
                    return Err(Error::Parameter(format!(
                        "{} split size must be even and at least 2, got {n}",
                        split.file_tag()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn sizes(&self, task: usize) -> SplitSizes {
        if task == 1 {
            self.first_task
        } else {
            self.later_tasks
        }
    }
}

/// One split's samples in CRD1 layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    /// `n·H·W` row-major pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl SampleSet {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != labels.len() * height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for {} samples of {height}×{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {} at index {i}", labels[i])));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("pixel outside [0, 1]".into()));
        }
        Ok(Self { height, width, labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&REAL) && self.labels.contains(&FAKE)
    }

    /// Flattened `|indices| × H·W` batch and its labels.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> (Tensor<S>, Vec<u8>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&p| S::of(f64::from(p))));
        }
        let t = Tensor::new(vec![indices.len(), self.dim()], data).expect("sized above");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all<S: Scalar>(&self) -> (Tensor<S>, Vec<u8>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    fn take_prefix(&self, n: usize) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n * self.dim()].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() + 4 * self.pixels.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [self.len(), self.height, self.width, 1] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).ok() != Some(DATASET_MAGIC.as_slice()) {
            return Err(Error::format(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(Error::format(4, format!("unsupported dataset version {version}")));
        }
        let (n, h, w, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()?);
        if channels != 1 {
            return Err(Error::format(18, format!("expected 1 channel, got {channels}")));
        }
        let label_offset = r.pos;
        let labels = r.take(n)?.to_vec();
        if let Some(i) = labels.iter().position(|&y| y as usize >= NUM_CLASSES) {
            return Err(Error::format((label_offset + i) as u64, format!("invalid label {}", labels[i])));
        }
        let count = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(6, "header sizes overflow"))?;
        let pixel_offset = r.pos;
        let raw = r.take(count)?;
        let pixels: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::format((pixel_offset + 4 * i) as u64, "pixel outside [0, 1]"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after pixel payload"));
        }
        Ok(Self { height: h, width: w, labels, pixels })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A task's three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, train: SampleSet, validation: SampleSet, test: SampleSet) -> Result<Self> {
        let ds = Self { task_id: task_id.into(), train, validation, test };
        for split in Split::ALL {
            let s = ds.split(split);
            if !s.has_both_classes() {
                return Err(Error::Data(format!(
                    "task {} {} split must contain both classes",
                    ds.task_id,
                    split.file_tag()
                )));
            }
            if (s.height, s.width) != (ds.train.height, ds.train.width) {
                return Err(Error::Dimension(format!("task {} splits disagree on image size", ds.task_id)));
            }
        }
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &SampleSet {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn file_path(dir: &Path, task_id: &str, split: Split) -> PathBuf {
        dir.join(format!("task{task_id}_{}.crd1", split.file_tag()))
    }

    /// Writes one CRD1 file per split.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        Split::ALL
            .iter()
            .map(|&s| {
                let p = Self::file_path(dir, &self.task_id, s);
                self.split(s).write(&p)?;
                Ok(p)
            })
            .collect()
    }

    pub fn read_dir(dir: &Path, task_id: &str) -> Result<Self> {
        let read = |s| SampleSet::read(Self::file_path(dir, task_id, s));
        Self::new(task_id, read(Split::Train)?, read(Split::Validation)?, read(Split::Test)?)
    }

    /// Balanced union of two tasks: each split is truncated to the shorter of the
    /// two and samples alternate `a, b, a, b, ...`.
    pub fn interleave(a: &TaskDataset, b: &TaskDataset) -> Result<TaskDataset> {
        if a.dim() != b.dim() {
            return Err(Error::Dimension("cannot merge tasks with different image sizes".into()));
        }
        let merge = |s: Split| {
            let (sa, sb) = (a.split(s), b.split(s));
            let n = sa.len().min(sb.len());
            let (sa, sb) = (sa.take_prefix(n), sb.take_prefix(n));
            let mut labels = Vec::with_capacity(2 * n);
            let mut pixels = Vec::with_capacity(2 * n * sa.dim());
            for i in 0..n {
                for set in [&sa, &sb] {
                    labels.push(set.labels[i]);
                    pixels.extend_from_slice(set.sample(i));
                }
            }
            SampleSet::new(sa.height, sa.width, labels, pixels)
        };
        Self::new(
            format!("{}&{}", a.task_id, b.task_id),
            merge(Split::Train)?,
            merge(Split::Validation)?,
            merge(Split::Test)?,
        )
    }
}

fn stream_rng(seed: u64, task: u64, split: Split, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((task << 16) | (split.stream_tag() << 8) | kind);
    rng
}

fn real_image(spec: &TaskFamilySpec, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let h = spec.image_size;
    let blobs: Vec<(f64, f64, f64)> = (0..spec.blob_count)
        .map(|_| {
            let amp = if spec.blob_amplitude > 0.0 {
                rng.random_range(-spec.blob_amplitude..=spec.blob_amplitude)
            } else {
                0.0
            };
            (amp, rng.random_range(0.0..h as f64), rng.random_range(0.0..h as f64))
        })
        .collect();
    let two_w2 = 2.0 * spec.blob_width.max(1e-6).powi(2);
    let mut img = Vec::with_capacity(h * h);
    for y in 0..h {
        for x in 0..h {
            let blob: f64 = blobs
                .iter()
                .map(|&(a, cx, cy)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / two_w2).exp())
                .sum();
            img.push(0.5 + blob + noise.sample(rng));
        }
    }
    img
}

fn artifact(spec: &TaskFamilySpec, params: &ArtifactParams) -> Vec<f64> {
    let h = spec.image_size;
    let mut a = Vec::with_capacity(h * h);
    for y in 0..h {
        for x in 0..h {
            let arg = 2.0 * std::f64::consts::PI * params.frequency * (x + y) as f64 / h as f64 + params.phase;
            a.push(params.amplitude * arg.sin());
        }
    }
    a
}

fn generate_split(spec: &TaskFamilySpec, task: usize, split: Split, n: usize) -> Result<SampleSet> {
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let grid = artifact(spec, &spec.tasks[task - 1]);
    let half = n / 2;
    let mut real_rng = stream_rng(spec.seed, 0, split, 1);
    let mut fake_rng = stream_rng(spec.seed, task as u64, split, 2);

    let mut images: Vec<(u8, Vec<f64>)> = Vec::with_capacity(n);
    for _ in 0..half {
        images.push((REAL, real_image(spec, &mut real_rng, &noise)));
    }
    for _ in 0..half {
        let base = real_image(spec, &mut fake_rng, &noise);
        images.push((FAKE, base.iter().zip(&grid).map(|(b, g)| b + g).collect()));
    }
    images.shuffle(&mut stream_rng(spec.seed, task as u64, split, 3));

    let labels = images.iter().map(|(y, _)| *y).collect();
    let pixels = images.iter().flat_map(|(_, img)| img.iter().map(|&p| p.clamp(0.0, 1.0) as f32)).collect();
    SampleSet::new(spec.image_size, spec.image_size, labels, pixels)
}

/// Generates task `task` (1-based), deterministic from `(spec.seed, task)`.
pub fn generate_task(spec: &TaskFamilySpec, task: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if task == 0 || task > spec.tasks.len() {
        return Err(Error::Parameter(format!("task {task} outside 1..={}", spec.tasks.len())));
    }
    let sizes = spec.sizes(task);
    let split = |s: Split| generate_split(spec, task, s, sizes.get(s));
    TaskDataset::new(task.to_string(), split(Split::Train)?, split(Split::Validation)?, split(Split::Test)?)
}

/// Side of the CutMix patch for mixing weight `lambda`: each side is scaled by
/// `sqrt(1 − λ)` and rounded to whole pixels.
pub fn patch_size(height: usize, width: usize, lambda: f64) -> (usize, usize) {
    let ratio = (1.0 - lambda.clamp(0.0, 1.0)).sqrt();
    let side = |n: usize| ((n as f64 * ratio).round() as usize).min(n);
    (side(height), side(width))
}

/// Rectangle `[top, top+ph) × [left, left+pw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Patch {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Copies `patch` of image `source` into image `target` and mixes soft labels by
/// the pasted area. `images` is `N × (h·w)`, `labels` is `N × 2`; `originals`
/// supply the unmodified source image and label.
pub fn paste_patch<S: Scalar>(
    images: &mut [S],
    labels: &mut [S],
    originals: (&[S], &[S]),
    (h, w): (usize, usize),
    target: usize,
    source: usize,
    patch: Patch,
) {
    let dim = h * w;
    for y in patch.top..patch.top + patch.height {
        for x in patch.left..patch.left + patch.width {
            images[target * dim + y * w + x] = originals.0[source * dim + y * w + x];
        }
    }
    let keep = S::one() - S::of(patch.area() as f64 / dim as f64);
    for c in 0..NUM_CLASSES {
        let own = labels[target * NUM_CLASSES + c];
        let other = originals.1[source * NUM_CLASSES + c];
        labels[target * NUM_CLASSES + c] = keep * own + (S::one() - keep) * other;
    }
}

/// CutMix over a flattened `N × (h·w)` batch with `N × 2` soft labels.
///
/// Each sample is mixed with probability `mix_probability` against its partner in
/// a random permutation. `λ ~ Uniform(0, 1)` sets the patch size; the patch is
/// placed uniformly at random fully inside the image, and the label weight is
/// recomputed from the pasted area.
pub fn cutmix<S: Scalar, R: Rng + ?Sized>(
    batch: &Tensor<S>,
    labels: &Tensor<S>,
    (h, w): (usize, usize),
    mix_probability: f64,
    rng: &mut R,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, dim) = batch.dims2()?;
    if n < 2 {
        return Err(Error::Parameter(format!("CutMix needs at least 2 samples, got {n}")));
    }
    if dim != h * w || labels.shape() != [n, NUM_CLASSES] {
        return Err(Error::Dimension(format!(
            "batch {:?} / labels {:?} do not match {h}×{w} images",
            batch.shape(),
            labels.shape()
        )));
    }
    if !(0.0..=1.0).contains(&mix_probability) {
        return Err(Error::Parameter(format!("mix probability {mix_probability} outside [0, 1]")));
    }
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);

    let mut images = batch.data().to_vec();
    let mut mixed = labels.data().to_vec();
    for (i, &j) in partner.iter().enumerate() {
        if rng.random::<f64>() >= mix_probability {
            continue;
        }
        let lambda: f64 = rng.random();
        let (ph, pw) = patch_size(h, w, lambda);
        let top = rng.random_range(0..=h - ph);
        let left = rng.random_range(0..=w - pw);
        let patch = Patch { top, left, height: ph, width: pw };
        paste_patch(&mut images, &mut mixed, (batch.data(), labels.data()), (h, w), i, j, patch);
    }
    Ok((Tensor::new(vec![n, dim], images)?, Tensor::new(vec![n, NUM_CLASSES], mixed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskFamilySpec {
        TaskFamilySpec {
            first_task: SplitSizes { train: 40, validation: 10, test: 10 },
            later_tasks: SplitSizes { train: 20, validation: 10, test: 10 },
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = small_spec();
        let a = generate_task(&spec, 2).unwrap();
        let b = generate_task(&spec, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.train.labels.iter().filter(|&&y| y == FAKE).count(), 10);
        assert!(a.train.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_ne!(generate_task(&spec, 1).unwrap().train, generate_task(&spec, 3).unwrap().train);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = small_spec();
        spec.tasks[1].amplitude = 0.01;
        assert!(generate_task(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.tasks[2] = spec.tasks[0];
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.first_task.train = 3;
        assert!(spec.validate().is_err());
        assert!(generate_task(&small_spec(), 4).is_err());
        assert!(generate_task(&small_spec(), 0).is_err());
    }

    #[test]
    fn null_artifact_makes_classes_identically_distributed() {
        let mut spec = small_spec();
        spec.tasks[0].amplitude = 0.0;
        spec.first_task.train = 4000;
        let ds = generate_task(&spec, 1).unwrap();
        let mean = |class: u8| {
            let idx: Vec<usize> = (0..ds.train.len()).filter(|&i| ds.train.labels[i] == class).collect();
            idx.iter().flat_map(|&i| ds.train.sample(i)).map(|&p| f64::from(p)).sum::<f64>() / (idx.len() * 64) as f64
        };
        assert!((mean(REAL) - mean(FAKE)).abs() < 0.01);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_task(&small_spec(), 3).unwrap();
        let files = ds.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert_eq!(TaskDataset::read_dir(dir.path(), "3").unwrap(), ds);
        let bytes = ds.train.to_bytes();
        assert_eq!(&bytes[..4], b"CRD1");
        assert_eq!(SampleSet::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupt_dataset_files() {
        let bytes = generate_task(&small_spec(), 1).unwrap().test.to_bytes();
        match SampleSet::from_bytes(&[]) {
            Err(Error::Format { offset: 0, message }) => assert!(message.contains("bad magic")),
            other => panic!("{other:?}"),
        }
        for cut in [2, 5, 10, HEADER_LEN + 3, bytes.len() - 2] {
            assert!(matches!(SampleSet::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[HEADER_LEN] = 7;
        assert!(
            matches!(SampleSet::from_bytes(&bad), Err(Error::Format { offset, .. }) if offset == HEADER_LEN as u64)
        );
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(SampleSet::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn interleave_truncates_and_alternates() {
        let spec = small_spec();
        let t1 = generate_task(&spec, 1).unwrap();
        let t2 = generate_task(&spec, 2).unwrap();
        let m = TaskDataset::interleave(&t1, &t2).unwrap();
        assert_eq!(m.task_id, "1&2");
        assert_eq!(m.train.len(), 2 * 20);
        assert_eq!(m.train.sample(0), t1.train.sample(0));
        assert_eq!(m.train.sample(1), t2.train.sample(0));
        assert_eq!(m.train.sample(3), t2.train.sample(1));
    }

    fn onehot(labels: &[u8]) -> Tensor {
        crate::losses::one_hot(labels).unwrap()
    }

    #[test]
    fn cutmix_patch_geometry() {
        assert_eq!(patch_size(8, 8, 1.0), (0, 0));
        assert_eq!(patch_size(8, 8, 0.0), (8, 8));
        assert_eq!(patch_size(8, 8, 0.75), (4, 4));
    }

    #[test]
    fn cutmix_extreme_lambdas() {
        let imgs = Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let labels = onehot(&[0, 1]);

        let mut x = imgs.data().to_vec();
        let mut y = labels.data().to_vec();
        let (ph, pw) = patch_size(2, 2, 1.0);
        paste_patch(
            &mut x,
            &mut y,
            (imgs.data(), labels.data()),
            (2, 2),
            0,
            1,
            Patch { top: 0, left: 0, height: ph, width: pw },
        );
        assert_eq!((x.as_slice(), y.as_slice()), (imgs.data(), labels.data()));

        let (ph, pw) = patch_size(2, 2, 0.0);
        paste_patch(
            &mut x,
            &mut y,
            (imgs.data(), labels.data()),
            (2, 2),
            0,
            1,
            Patch { top: 0, left: 0, height: ph, width: pw },
        );
        assert_eq!(&x[..4], &[1.0; 4]);
        assert_eq!(&y[..2], &[0.0, 1.0]);
    }

    #[test]
    fn cutmix_quarter_patch_label() {
        let imgs = Tensor::new(vec![2, 64], [vec![0.0; 64], vec![1.0; 64]].concat()).unwrap();
        let labels = onehot(&[0, 1]);
        let mut x = imgs.data().to_vec();
        let mut y = labels.data().to_vec();
        let (ph, pw) = patch_size(8, 8, 0.75);
        paste_patch(
            &mut x,
            &mut y,
            (imgs.data(), labels.data()),
            (8, 8),
            0,
            1,
            Patch { top: 2, left: 3, height: ph, width: pw },
        );
        assert_eq!(y[0], 0.75);
        assert_eq!(y[1], 0.25);
        let pasted = x[..64].iter().filter(|&&v| v == 1.0).count();
        assert_eq!(pasted as f64 / 64.0, 0.25);
    }

    #[test]
    fn cutmix_errors_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = Tensor::<f64>::zeros(vec![1, 4]);
        assert!(matches!(cutmix(&one, &onehot(&[0]), (2, 2), 0.5, &mut rng), Err(Error::Parameter(_))));

        let imgs = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let labels = onehot(&[0, 1, 1]);
        let (x, y) = cutmix(&imgs, &labels, (2, 2), 0.0, &mut rng).unwrap();
        assert_eq!((x, y), (imgs, labels));
    }
}

//! Dense ReLU classifier and the teacher/student parameter lifecycle.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 2;

/// Default layer sizes for 8×8 grayscale inputs.
pub const DEFAULT_LAYERS: [usize; 4] = [64, 32, 16, 2];

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRDM";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// One dense layer computing `act(x · W + b)` with `W` stored `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<S: Scalar = f64> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub activation: Activation,
}

impl<S: Scalar> Layer<S> {
    pub fn fan_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S: Scalar = f64> {
    layers: Vec<Layer<S>>,
    role: Role,
}

/// Handles produced by [`Network::forward`]: the logits and one var per
/// parameter tensor, in [`Network::parameters`] order.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl<S: Scalar> Network<S> {
    /// Glorot-uniform weights, zero biases, deterministic from `seed`.
    /// The returned network is a trainable student.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Parameter(format!("layer spec needs at least 2 entries, got {sizes:?}")));
        }
        if sizes.contains(&0) {
            return Err(Error::Parameter(format!("layer spec has a zero-width layer: {sizes:?}")));
        }
        if *sizes.last().unwrap() != NUM_CLASSES {
            return Err(Error::Parameter(format!("last layer must have {NUM_CLASSES} outputs, got {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| S::of(rng.random_range(-limit..=limit))).collect();
                Layer {
                    weights: Tensor::new(vec![fan_in, fan_out], data).expect("sized above"),
                    bias: Tensor::zeros(vec![fan_out]),
                    activation: if i == last { Activation::None } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self { layers, role: Role::Student })
    }

    /// Assembles a network from explicit layers, validating the chain.
    pub fn from_layers(layers: Vec<Layer<S>>, role: Role) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::Parameter("network needs at least one layer".into()));
        };
        if last.fan_out() != NUM_CLASSES || last.activation != Activation::None {
            return Err(Error::Parameter("final layer must emit 2 raw logits".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weights.shape().len() != 2 || l.bias.len() != l.fan_out() {
                return Err(Error::Dimension(format!(
                    "layer {k}: weights {:?} and bias {:?} disagree",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Dimension(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self { layers, role })
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_frozen(&self) -> bool {
        self.role == Role::Teacher
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::fan_out)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in order `W0, b0, W1, b1, ...`.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn flat_parameters(&self) -> Vec<S> {
        self.parameters().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.parameters().flat_map(|t| t.data()) {
            h.update(v.to_bits64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Bitwise parameter equality, ignoring role.
    pub fn same_parameters(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.parameters().zip(other.parameters()).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits64() == y.to_bits64())
            })
    }

    /// Puts every parameter tensor on `tape`, in [`Network::parameters`] order.
    pub fn register_parameters(&self, tape: &mut Tape<S>, track: bool) -> Vec<Var> {
        self.parameters().map(|t| tape.leaf(t.clone().with_requires_grad(track))).collect()
    }

    /// Forward pass reusing parameter vars from [`Network::register_parameters`],
    /// so several inputs can share one set of gradients.
    pub fn forward_with(&self, tape: &mut Tape<S>, input: Var, params: &[Var]) -> Result<Var> {
        let width = tape.value(input).dims2()?.1;
        if width != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch width {width} does not match network input dimension {}",
                self.input_dim()
            )));
        }
        if params.len() != 2 * self.layers.len() {
            return Err(Error::Dimension(format!("{} parameter vars for {} layers", params.len(), self.layers.len())));
        }
        let mut h = input;
        for (layer, wb) in self.layers.iter().zip(params.chunks(2)) {
            let z = tape.matmul(h, wb[0])?;
            h = tape.add_bias(z, wb[1])?;
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`. Parameters are tracked iff `track_params`.
    pub fn forward(&self, tape: &mut Tape<S>, input: Var, track_params: bool) -> Result<ForwardVars> {
        let params = self.register_parameters(tape, track_params);
        let logits = self.forward_with(tape, input, &params)?;
        Ok(ForwardVars { logits, params })
    }

    /// Raw `N×2` logits for an `N×input_dim` batch, without gradient tracking.
    pub fn logits(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax probabilities at temperature 1.
    pub fn probabilities(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let logits = self.logits(batch)?;
        let data = crate::autodiff::softmax_rows(logits.data(), NUM_CLASSES, S::one());
        Tensor::new(logits.shape().to_vec(), data)
    }

    /// Deep copy with the student role.
    pub fn clone_as_student(&self) -> Self {
        Self { layers: self.layers.clone(), role: Role::Student }
    }

    pub fn promote_to_teacher(self) -> Self {
        Self { role: Role::Teacher, ..self }
    }

    /// Mutable access to every parameter tensor; rejected for teachers.
    pub fn parameters_mut(&mut self) -> Result<impl Iterator<Item = &mut Tensor<S>>> {
        if self.is_frozen() {
            return Err(Error::Frozen);
        }
        Ok(self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]))
    }

    /// Overwrites all parameters from a flat vector; rejected for teachers.
    pub fn load_flat_parameters(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.parameters_mut()? {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
            for v in l.weights.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Parses a CRDM checkpoint. Hidden layers get ReLU, the last layer none;
    /// the network is returned frozen as a teacher.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::format(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u16()? as usize;
        if count == 0 {
            return Err(Error::format(6, "checkpoint has no layers"));
        }
        let mut layers = Vec::with_capacity(count);
        for k in 0..count {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let mut read_f64s = |n: usize| -> Result<Vec<S>> {
                let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(r.pos as u64, "layer too large"))?)?;
                Ok(raw.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap()))).collect())
            };
            let weights = read_f64s(rows * cols)?;
            let bias = read_f64s(cols)?;
            layers.push(Layer {
                weights: Tensor::new(vec![rows, cols], weights)?,
                bias: Tensor::new(vec![cols], bias)?,
                activation: if k + 1 == count { Activation::None } else { Activation::Relu },
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
        }
        Self::from_layers(layers, Role::Teacher).map_err(|e| Error::format(0, format!("inconsistent checkpoint: {e}")))
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Little-endian cursor reporting the byte offset of any short read.
pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = Network::<f64>::init(&[64, 32, 2], 7).unwrap();
        let b = Network::<f64>::init(&[64, 32, 2], 7).unwrap();
        assert!(a.same_parameters(&b));
        assert_eq!(a.parameter_hash(), b.parameter_hash());
        let c = Network::<f64>::init(&[64, 32, 2], 8).unwrap();
        assert!(!a.same_parameters(&c));
    }

    #[test]
    fn parameter_count_matches_arithmetic() {
        let n = Network::<f64>::init(&[64, 32, 2], 0).unwrap();
        assert_eq!(n.layers().len(), 2);
        assert_eq!(n.parameter_count(), 64 * 32 + 32 + 32 * 2 + 2);
        assert_eq!(n.parameter_count(), 2146);
    }

    #[test]
    fn init_rejects_bad_specs() {
        assert!(Network::<f64>::init(&[64, 32, 3], 0).is_err());
        assert!(Network::<f64>::init(&[2], 0).is_err());
        assert!(Network::<f64>::init(&[], 0).is_err());
        assert!(Network::<f64>::init(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let n = Network::<f64>::init(&[64, 32, 16, 2], 3).unwrap();
        for l in n.layers() {
            let limit = (6.0 / (l.fan_in() + l.fan_out()) as f64).sqrt();
            assert!(l.weights.data().iter().all(|w| w.abs() <= limit));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
        assert_eq!(n.layers().last().unwrap().activation, Activation::None);
    }

    #[test]
    fn zero_network_gives_uniform_prediction() {
        let mut n = Network::<f64>::init(&[3, 4, 2], 1).unwrap();
        let zeros = vec![0.0; n.parameter_count()];
        n.load_flat_parameters(&zeros).unwrap();
        let batch = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, 0.0]).unwrap();
        assert_eq!(n.logits(&batch).unwrap().data(), &[0.0; 4]);
        assert_eq!(n.probabilities(&batch).unwrap().data(), &[0.5; 4]);
    }

    #[test]
    fn hand_computed_two_layer_network() {
        // Layer 1: W = [[1, 0], [0, -1]], b = [0, 0.5], relu; layer 2: W = [[2, 0], [1, 1]], b = [0.1, -0.1].
        let layers = vec![
            Layer {
                weights: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.0, 0.5]).unwrap(),
                activation: Activation::Relu,
            },
            Layer {
                weights: Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, 1.0]).unwrap(),
                bias: Tensor::new(vec![2], vec![0.1, -0.1]).unwrap(),
                activation: Activation::None,
            },
        ];
        let net = Network::from_layers(layers, Role::Student).unwrap();
        // x = [3, 1]: hidden = relu([3, -1 + 0.5]) = [3, 0]; logits = [6 + 0.1, 0 - 0.1].
        // x = [-1, -2]: hidden = relu([-1, 2.5]) = [0, 2.5]; logits = [2.5 + 0.1, 2.5 - 0.1].
        let batch = Tensor::new(vec![2, 2], vec![3.0, 1.0, -1.0, -2.0]).unwrap();
        let out = net.logits(&batch).unwrap();
        assert_eq!(out.data(), &[6.1, -0.1, 2.6, 2.4]);
    }

    #[test]
    fn single_sample_matches_batch_row() {
        let net = Network::<f64>::init(&[5, 4, 2], 11).unwrap();
        let data: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = Tensor::new(vec![3, 5], data.clone()).unwrap();
        let all = net.logits(&batch).unwrap();
        for i in 0..3 {
            let one = Tensor::new(vec![1, 5], data[i * 5..(i + 1) * 5].to_vec()).unwrap();
            assert_eq!(net.logits(&one).unwrap().data(), all.row(i));
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let net = Network::<f64>::init(&[5, 4, 2], 11).unwrap();
        let batch = Tensor::zeros(vec![2, 4]);
        assert!(matches!(net.logits(&batch), Err(Error::Dimension(_))));
    }

    #[test]
    fn clone_and_promote_preserve_parameters() {
        let teacher = Network::<f64>::init(&[6, 5, 2], 2).unwrap().promote_to_teacher();
        let student = teacher.clone_as_student();
        assert_eq!(student.role(), Role::Student);
        assert!(student.same_parameters(&teacher));
        assert!(student.clone_as_student().same_parameters(&teacher));

        let promoted = student.clone().promote_to_teacher();
        assert!(promoted.is_frozen());
        assert!(promoted.same_parameters(&student));
        let batch = Tensor::new(vec![1, 6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(promoted.logits(&batch).unwrap(), teacher.logits(&batch).unwrap());
    }

    #[test]
    fn teacher_rejects_mutation() {
        let mut teacher = Network::<f64>::init(&[3, 2], 0).unwrap().promote_to_teacher();
        assert!(matches!(teacher.parameters_mut(), Err(Error::Frozen)));
        assert!(matches!(teacher.load_flat_parameters(&[0.0; 8]), Err(Error::Frozen)));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let net = Network::<f64>::init(&[64, 32, 16, 2], 5).unwrap();
        let bytes = net.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"CRDM");
        let back = Network::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert!(back.same_parameters(&net));
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let bytes = Network::<f64>::init(&[4, 3, 2], 5).unwrap().to_checkpoint_bytes();
        assert!(matches!(Network::<f64>::from_checkpoint_bytes(&[]), Err(Error::Format { offset: 0, .. })));
        for cut in [3, 6, 9, 20, bytes.len() - 1] {
            assert!(matches!(Network::<f64>::from_checkpoint_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(Network::<f64>::from_checkpoint_bytes(&bad_version), Err(Error::Format { .. })));
        let mut bad_chain = bytes.clone();
        bad_chain[8] = 7; // first layer rows 4 -> 7
        assert!(Network::<f64>::from_checkpoint_bytes(&bad_chain).is_err());
    }

    #[test]
    fn f32_networks_work() {
        let net = Network::<f32>::init(&[4, 3, 2], 1).unwrap();
        let p = net.probabilities(&Tensor::new(vec![1, 4], vec![0.1f32; 4]).unwrap()).unwrap();
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

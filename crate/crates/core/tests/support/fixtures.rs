//! Random problems shared by the gradient, oracle and pipeline tests.

use cored::gradcheck::Component;
use cored::losses::{self, LossTerms, LossWeights};
use cored::repmem;
use cored::{BlockSpec, Network, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rows_tensor(rows: &[[f64; 2]]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Network of the given shape with every parameter uniform in `[-1, 1]`.
pub fn random_network(sizes: &[usize], rng: &mut ChaCha8Rng) -> Network<f64> {
    let mut net = Network::init(sizes, 0).unwrap();
    let flat: Vec<f64> = (0..net.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.load_flat_parameters(&flat).unwrap();
    net
}

pub struct GradProblem {
    pub student: Network<f64>,
    pub teacher: Network<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub weights: LossWeights,
    pub spec: BlockSpec,
}

pub fn grad_problem(seed: u64) -> GradProblem {
    let mut r = rng(1000 + seed);
    let sizes = [5, 6, 4, 2];
    let student = random_network(&sizes, &mut r);
    let teacher = random_network(&sizes, &mut r).promote_to_teacher();
    let n = 10;
    let inputs = (0..n).map(|_| (0..sizes[0]).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2u8)).collect();
    labels[0] = 0;
    labels[1] = 1;
    GradProblem { student, teacher, inputs, labels, weights: LossWeights::default(), spec: BlockSpec::default() }
}

impl GradProblem {
    fn input_tensor(&self) -> Tensor<f64> {
        Tensor::from_rows(&self.inputs).unwrap()
    }

    /// Loss value, gradient of every student parameter (flattened in
    /// [`Network::flat_parameters`] order) and the largest teacher gradient.
    pub fn tape_gradient(&self, term: Component) -> (f64, Vec<f64>, f64) {
        let mut tape = Tape::new();
        let x = tape.constant(self.input_tensor());
        let s = self.student.forward(&mut tape, x, true).unwrap();
        let t = self.teacher.forward(&mut tape, x, true).unwrap();
        let w = self.weights;
        let mut terms = LossTerms::default();
        let mut weights = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, ..w };
        let all = term == Component::Total;
        if all || term == Component::Student {
            terms.student = Some(losses::student_loss(&mut tape, s.logits, &self.labels).unwrap());
            weights.alpha = if all { w.alpha } else { 1.0 };
        }
        if all || term == Component::Distillation {
            terms.distillation = Some(losses::distillation_loss(&mut tape, t.logits, s.logits, w.tau).unwrap());
            weights.beta = if all { w.beta } else { 1.0 };
        }
        if all || term == Component::Representation {
            let frozen = tape.detach(t.logits);
            let tp = tape.softmax(frozen, 1.0).unwrap();
            let sp = tape.softmax(s.logits, 1.0).unwrap();
            let (lr, _) = repmem::representation_loss_on_tape(&mut tape, tp, sp, &self.labels, &self.spec).unwrap();
            terms.representation = Some(lr);
            weights.gamma = if all { w.gamma } else { 1.0 };
        }
        let (total, breakdown) = losses::combine(&mut tape, terms, &weights).unwrap();
        tape.backward(total).unwrap();
        let grads = s.params.iter().flat_map(|&p| tape.grad(p).unwrap().to_vec()).collect();
        let teacher_max = t.params.iter().filter_map(|&p| tape.grad(p)).flatten().fold(0.0f64, |m, g| m.max(g.abs()));
        (breakdown.total, grads, teacher_max)
    }

    /// The same loss from the scalar oracle, for an arbitrary student.
    pub fn oracle_loss(&self, student: &Network<f64>, term: Component) -> f64 {
        let s: Vec<[f64; 2]> = self.inputs.iter().map(|x| oracle::forward(student, x)).collect();
        let t: Vec<[f64; 2]> = self.inputs.iter().map(|x| oracle::forward(&self.teacher, x)).collect();
        let w = self.weights;
        let ls = oracle::student_loss(&s, &self.labels);
        let ld = oracle::distillation_loss(&t, &s, w.tau);
        let tp: Vec<[f64; 2]> = t.iter().map(|&z| oracle::softmax2(z, 1.0)).collect();
        let sp: Vec<[f64; 2]> = s.iter().map(|&z| oracle::softmax2(z, 1.0)).collect();
        let spec = self.spec;
        let lr = oracle::representation_loss(&tp, &sp, &self.labels, spec.blocks, spec.width, spec.start);
        match term {
            Component::Student => ls,
            Component::Distillation => ld,
            Component::Representation => lr,
            Component::Total => w.alpha * ls + w.beta * ld + w.gamma * lr,
        }
    }

    /// Central differences of the oracle loss over every student parameter.
    pub fn numeric_gradient(&self, term: Component, h: f64) -> Vec<f64> {
        let base = self.student.flat_parameters();
        let mut probe = self.student.clone();
        (0..base.len())
            .map(|i| {
                let mut shifted = base.clone();
                shifted[i] = base[i] + h;
                probe.load_flat_parameters(&shifted).unwrap();
                let plus = self.oracle_loss(&probe, term);
                shifted[i] = base[i] - h;
                probe.load_flat_parameters(&shifted).unwrap();
                let minus = self.oracle_loss(&probe, term);
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }
}

/// Random teacher and student logits with random labels.
pub fn random_logit_batch(r: &mut ChaCha8Rng, n: usize, scale: f64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<u8>) {
    let row = |r: &mut ChaCha8Rng| [r.random_range(-scale..scale), r.random_range(-scale..scale)];
    let teacher = (0..n).map(|_| row(r)).collect();
    let student = (0..n).map(|_| row(r)).collect();
    let labels = (0..n).map(|_| r.random_range(0..2u8)).collect();
    (teacher, student, labels)
}

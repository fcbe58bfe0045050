//! Finite-difference audit of the analytic gradients of every loss term.
//!
//! A random student and a random frozen teacher are evaluated on a random
//! batch. For each loss component the tape gradient with respect to every
//! student parameter is compared with a central difference of the same loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Tensor};
use crate::error::Result;
use crate::losses::{self, LossTerms, LossWeights};
use crate::network::Network;
use crate::repmem::{self, BlockSpec};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Lower bound of the relative-error denominator. Below it the comparison is
/// effectively absolute, since central differences carry roughly `1e-10` of
/// rounding error regardless of the gradient's size.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Student,
    Distillation,
    Representation,
    Total,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::Student, Component::Distillation, Component::Representation, Component::Total];

    pub fn name(self) -> &'static str {
        match self {
            Component::Student => "L_S",
            Component::Distillation => "L_D",
            Component::Representation => "L_R",
            Component::Total => "L_CoReD",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub layers: Vec<usize>,
    pub batch: usize,
    pub step: f64,
    pub weights: LossWeights,
    pub block_spec: BlockSpec,
    /// Scales the backward rule of one op kind. Negative control only.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            layers: vec![6, 5, 4, 2],
            batch: 12,
            step: DEFAULT_STEP,
            weights: LossWeights::default(),
            block_spec: BlockSpec::default(),
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentError {
    pub component: Component,
    pub max_relative_error: f64,
    /// Number of student parameters compared.
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentError>,
    /// Largest absolute gradient that reached a teacher parameter.
    pub teacher_gradient_max: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance && self.teacher_gradient_max == 0.0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

struct Problem {
    student: Network<f64>,
    teacher: Network<f64>,
    inputs: Tensor<f64>,
    labels: Vec<u8>,
}

impl Problem {
    fn sample(config: &GradcheckConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        // Every parameter, biases included, is drawn at random. Zero biases would
        // put a pre-activation exactly on the ReLU kink whenever a whole layer is
        // inactive for a sample, and a central difference cannot straddle that.
        let random_net = |rng: &mut ChaCha8Rng| -> Result<Network<f64>> {
            let mut net = Network::init(&config.layers, 0)?;
            let flat: Vec<f64> = (0..net.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            net.load_flat_parameters(&flat)?;
            Ok(net)
        };
        let student = random_net(&mut rng)?;
        let teacher = random_net(&mut rng)?.promote_to_teacher();
        let dim = config.layers[0];
        let data: Vec<f64> = (0..config.batch * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let inputs = Tensor::new(vec![config.batch, dim], data)?;
        // Alternating labels keep both classes present.
        let labels = (0..config.batch).map(|i| (i % 2) as u8).collect();
        Ok(Self { student, teacher, inputs, labels })
    }

    /// Loss value and, when `backward` is set, the gradients of the student
    /// parameters and the largest teacher gradient.
    fn evaluate(
        &self,
        student: &Network<f64>,
        component: Component,
        config: &GradcheckConfig,
        backward: bool,
    ) -> Result<(f64, Vec<f64>, f64)> {
        let mut tape = Tape::new();
        if let Some((kind, factor)) = config.fault {
            tape.inject_fault(kind, factor);
        }
        let x = tape.constant(self.inputs.clone());
        let s = student.forward(&mut tape, x, true)?;
        let t = self.teacher.forward(&mut tape, x, true)?;
        let w = config.weights;

        let mut terms = LossTerms::default();
        let mut weights = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, ..w };
        if matches!(component, Component::Student | Component::Total) {
            terms.student = Some(losses::student_loss(&mut tape, s.logits, &self.labels)?);
            weights.alpha = if component == Component::Total { w.alpha } else { 1.0 };
        }
        if matches!(component, Component::Distillation | Component::Total) {
            terms.distillation = Some(losses::distillation_loss(&mut tape, t.logits, s.logits, w.tau)?);
            weights.beta = if component == Component::Total { w.beta } else { 1.0 };
        }
        if matches!(component, Component::Representation | Component::Total) {
            let frozen = tape.detach(t.logits);
            let tp = tape.softmax(frozen, 1.0)?;
            let sp = tape.softmax(s.logits, 1.0)?;
            let (lr, _) = repmem::representation_loss_on_tape(&mut tape, tp, sp, &self.labels, &config.block_spec)?;
            terms.representation = Some(lr);
            weights.gamma = if component == Component::Total { w.gamma } else { 1.0 };
        }
        let (total, breakdown) = losses::combine(&mut tape, terms, &weights)?;
        if !backward {
            return Ok((breakdown.total, Vec::new(), 0.0));
        }
        tape.backward(total)?;
        let mut grads = Vec::with_capacity(student.parameter_count());
        for &p in &s.params {
            grads.extend_from_slice(tape.grad(p).unwrap_or(&[]));
        }
        let teacher_max = t.params.iter().filter_map(|&p| tape.grad(p)).flatten().fold(0.0f64, |m, g| m.max(g.abs()));
        Ok((breakdown.total, grads, teacher_max))
    }
}

/// Audits every component for one seed.
pub fn audit(seed: u64, config: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = Problem::sample(config, seed)?;
    let base = problem.student.flat_parameters();
    let h = config.step;
    let mut components = Vec::with_capacity(Component::ALL.len());
    let mut teacher_gradient_max = 0.0f64;

    for component in Component::ALL {
        let (_, analytic, teacher_max) = problem.evaluate(&problem.student, component, config, true)?;
        teacher_gradient_max = teacher_gradient_max.max(teacher_max);
        let mut probe = problem.student.clone();
        let mut max_err = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + h;
            probe.load_flat_parameters(&shifted)?;
            let (plus, _, _) = problem.evaluate(&probe, component, config, false)?;
            shifted[i] = base[i] - h;
            probe.load_flat_parameters(&shifted)?;
            let (minus, _, _) = problem.evaluate(&probe, component, config, false)?;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(relative_error(a, numeric));
        }
        components.push(ComponentError { component, max_relative_error: max_err, checked: analytic.len() });
    }
    Ok(GradcheckReport { seed, components, teacher_gradient_max })
}

//! Toy models with hand-derived gradients, data generators, and the training loop.
//!
//! Three families:
//! - linear regression `Y ≈ WX` with loss `‖WX − Y‖²_F / 2N`;
//! - quadratic `½ tr((W − W*)ᵀ B (W − W*))` with a log-spaced spectrum for `B`;
//! - a two-layer ReLU network with a softmax cross-entropy head. The input
//!   carries a constant-one row that acts as the first layer's bias.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::diagnostics::SpectralTrace;
use crate::error::{Error, Result};
use crate::linalg::{self, gaussian_matrix, random_orthonormal, Matrix, NewtonSchulzVariant};
use crate::optimizer::{Checkpoint, LayerState, Method, OptimizerConfig};

/// Loss above which (or non-finite) a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear,
    Quadratic,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    LinearRegression {
        m: usize,
        n: usize,
        samples: usize,
        #[serde(default)]
        noise_sigma: f64,
        /// Condition number of the input sample covariance.
        #[serde(default = "default_input_condition")]
        input_condition: f64,
        #[serde(default)]
        input_spectrum: InputSpectrum,
    },
    IllConditionedQuadratic {
        m: usize,
        n: usize,
        #[serde(default = "default_spectrum_min")]
        spectrum_min: f64,
        #[serde(default = "default_spectrum_max")]
        spectrum_max: f64,
    },
    SyntheticClassification {
        inputs: usize,
        classes: usize,
        samples: usize,
        /// Scale of the class centers relative to unit within-class noise.
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

/// Shape of the input sample-covariance spectrum between 1 and 1/condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpectrum {
    /// n values evenly spaced in log scale.
    #[default]
    LogSpaced,
    /// n − 1 unit eigenvalues and a single weak direction at 1/condition.
    Spiked,
}

fn default_input_condition() -> f64 {
    10.0
}
fn default_spectrum_min() -> f64 {
    1.0
}
fn default_spectrum_max() -> f64 {
    1e3
}
fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub kind: DataKind,
    /// Fixed data seed; when absent each run seed generates its own problem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Mini-batch size; full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

fn default_tolerance() -> f64 {
    1e-3
}
fn default_output_dir() -> String {
    "out".into()
}
fn default_method() -> Method {
    Method::Sumo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub step_budget: u64,
    #[serde(default = "default_tolerance")]
    pub grad_tolerance: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Layer whose moment is traced.
    #[serde(default)]
    pub trace_layer: usize,
    /// Newton-Schulz iterations for the per-step error probe; no probe when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ns_probe_iterations: Option<usize>,
}

impl ExperimentSpec {
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match (&self.model, &self.data.kind) {
            (_, DataKind::LinearRegression { m, n, .. }) => vec![(*m, *n)],
            (_, DataKind::IllConditionedQuadratic { m, n, .. }) => vec![(*m, *n)],
            (ModelSpec::Mlp { hidden }, DataKind::SyntheticClassification { inputs, classes, .. }) => {
                vec![(*hidden, inputs + 1), (*classes, *hidden)]
            }
            (_, DataKind::SyntheticClassification { .. }) => vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, msg: String| Err(Error::config(f, msg));
        if self.name.trim().is_empty() {
            return bad("name", "must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        if self.step_budget == 0 {
            return bad("step_budget", "must be >= 1".into());
        }
        if !(self.grad_tolerance > 0.0 && self.grad_tolerance.is_finite()) {
            return bad("grad_tolerance", format!("must be positive, got {}", self.grad_tolerance));
        }
        let compatible = matches!(
            (&self.model, &self.data.kind),
            (ModelSpec::Linear, DataKind::LinearRegression { .. })
                | (ModelSpec::Quadratic, DataKind::IllConditionedQuadratic { .. })
                | (ModelSpec::Mlp { .. }, DataKind::SyntheticClassification { .. })
        );
        if !compatible {
            return bad("model.kind", "model kind does not match data.kind".into());
        }
        let samples = match &self.data.kind {
            DataKind::LinearRegression {
                m,
                n,
                samples,
                noise_sigma,
                input_condition,
                ..
            } => {
                if *m == 0 || *n == 0 {
                    return bad("data.m", "dimensions must be positive".into());
                }
                if samples < n {
                    return bad("data.samples", format!("need at least n = {n} samples, got {samples}"));
                }
                if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                    return bad("data.noise_sigma", "must be non-negative".into());
                }
                if !(*input_condition >= 1.0 && input_condition.is_finite()) {
                    return bad("data.input_condition", "must be >= 1".into());
                }
                Some(*samples)
            }
            DataKind::IllConditionedQuadratic {
                m,
                n,
                spectrum_min,
                spectrum_max,
            } => {
                if *m == 0 || *n == 0 {
                    return bad("data.m", "dimensions must be positive".into());
                }
                if !(*spectrum_min > 0.0 && spectrum_max >= spectrum_min && spectrum_max.is_finite()) {
                    return bad("data.spectrum_max", "need 0 < spectrum_min <= spectrum_max".into());
                }
                None
            }
            DataKind::SyntheticClassification {
                inputs,
                classes,
                samples,
                separation,
            } => {
                if *inputs == 0 || *samples == 0 {
                    return bad("data.inputs", "dimensions must be positive".into());
                }
                if *classes < 2 {
                    return bad("data.classes", "need at least two classes".into());
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    return bad("data.separation", "must be non-negative".into());
                }
                if let ModelSpec::Mlp { hidden } = self.model {
                    if hidden == 0 {
                        return bad("model.hidden", "must be positive".into());
                    }
                }
                Some(*samples)
            }
        };
        if let Some(b) = self.data.batch_size {
            let n = samples.unwrap_or(usize::MAX);
            if b == 0 || b > n {
                return bad("data.batch_size", format!("must lie in 1..={n}, got {b}"));
            }
        }
        self.optimizer.validate()?;
        let shapes = self.layer_shapes();
        if self.method.uses_rank() {
            for &(m, n) in &shapes {
                self.optimizer.validate_for_shape(m, n)?;
            }
        }
        if self.trace_layer >= shapes.len() {
            return bad("trace_layer", format!("model has {} layers", shapes.len()));
        }
        if self.ns_probe_iterations == Some(0) {
            return bad("ns_probe_iterations", "must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub layers: Vec<Layer>,
}

/// A generated problem instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    /// Inputs `x` (n×N), targets `y` (m×N).
    Linear { x: Matrix, y: Matrix, w_star: Matrix },
    Quadratic { b: Matrix, w_star: Matrix },
    /// Inputs with a trailing constant-one row ((d+1)×N) and labels.
    Classification { x: Matrix, labels: Vec<usize>, classes: usize },
}

impl Problem {
    pub fn generate(data: &DataKind, seed: u64) -> Result<Problem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match *data {
            DataKind::LinearRegression {
                m,
                n,
                samples,
                noise_sigma,
                input_condition,
                input_spectrum,
            } => {
                if samples < n {
                    return Err(Error::InvalidArgument("need samples >= n".into()));
                }
                // X = B·diag(√λ)·Zᵀ·√N has sample covariance XXᵀ/N = B·diag(λ)·Bᵀ exactly.
                let spectrum = match input_spectrum {
                    InputSpectrum::LogSpaced => linalg::logspace(1.0, 1.0 / input_condition, n),
                    InputSpectrum::Spiked => {
                        let mut s = vec![1.0; n];
                        s[n - 1] = 1.0 / input_condition;
                        s
                    }
                };
                let basis = random_orthonormal(n, n, &mut rng);
                let z = random_orthonormal(samples, n, &mut rng);
                let mut scaled = basis;
                for (j, l) in spectrum.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(l.sqrt());
                }
                let x = scaled * z.transpose() * (samples as f64).sqrt();
                let w_star = gaussian_matrix(m, n, &mut rng) / (n as f64).sqrt();
                let mut y = &w_star * &x;
                if noise_sigma > 0.0 {
                    y += gaussian_matrix(m, samples, &mut rng) * noise_sigma;
                }
                Ok(Problem::Linear { x, y, w_star })
            }
            DataKind::IllConditionedQuadratic {
                m,
                n,
                spectrum_min,
                spectrum_max,
            } => {
                let u = random_orthonormal(m, m, &mut rng);
                let lam = linalg::logspace(spectrum_min, spectrum_max, m);
                let mut ul = u.clone();
                for (j, l) in lam.iter().enumerate() {
                    ul.column_mut(j).scale_mut(*l);
                }
                let b = ul * u.transpose();
                let b = (&b + b.transpose()) * 0.5;
                let w_star = gaussian_matrix(m, n, &mut rng) / (m as f64).sqrt();
                Ok(Problem::Quadratic { b, w_star })
            }
            DataKind::SyntheticClassification {
                inputs,
                classes,
                samples,
                separation,
            } => {
                let centers = gaussian_matrix(inputs, classes, &mut rng) * (separation / (inputs as f64).sqrt());
                let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
                labels.shuffle(&mut rng);
                let noise = gaussian_matrix(inputs, samples, &mut rng);
                let mut x = Matrix::from_element(inputs + 1, samples, 1.0);
                for (i, &c) in labels.iter().enumerate() {
                    for d in 0..inputs {
                        x[(d, i)] = centers[(d, c)] + noise[(d, i)];
                    }
                }
                Ok(Problem::Classification { x, labels, classes })
            }
        }
    }

    pub fn samples(&self) -> Option<usize> {
        match self {
            Problem::Linear { x, .. } | Problem::Classification { x, .. } => Some(x.ncols()),
            Problem::Quadratic { .. } => None,
        }
    }
}

impl ToyModel {
    pub fn init(spec: &ModelSpec, problem: &Problem, seed: u64) -> Result<ToyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match (spec, problem) {
            (ModelSpec::Linear, Problem::Linear { w_star, .. })
            | (ModelSpec::Quadratic, Problem::Quadratic { w_star, .. }) => vec![Layer {
                weight: Matrix::zeros(w_star.nrows(), w_star.ncols()),
                activation: Activation::Linear,
            }],
            (ModelSpec::Mlp { hidden }, Problem::Classification { x, classes, .. }) => {
                let d = x.nrows();
                let w1 = gaussian_matrix(*hidden, d, &mut rng) * (2.0 / d as f64).sqrt();
                let w2 = gaussian_matrix(*classes, *hidden, &mut rng) * (1.0 / *hidden as f64).sqrt();
                vec![
                    Layer {
                        weight: w1,
                        activation: Activation::Relu,
                    },
                    Layer {
                        weight: w2,
                        activation: Activation::SoftmaxCrossEntropy,
                    },
                ]
            }
            _ => return Err(Error::config("model.kind", "model kind does not match the data")),
        };
        Ok(ToyModel { layers })
    }

    pub fn weights(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.weight.clone()).collect()
    }
}

fn select(m: &Matrix, batch: Option<&[usize]>) -> Matrix {
    match batch {
        None => m.clone(),
        Some(idx) => m.select_columns(idx.iter()),
    }
}

fn select_labels(labels: &[usize], batch: Option<&[usize]>) -> Vec<usize> {
    match batch {
        None => labels.to_vec(),
        Some(idx) => idx.iter().map(|&i| labels[i]).collect(),
    }
}

fn check_shapes(model: &ToyModel, problem: &Problem) -> Result<()> {
    let expect: Vec<(usize, usize)> = match problem {
        Problem::Linear { x, y, .. } => vec![(y.nrows(), x.nrows())],
        Problem::Quadratic { w_star, .. } => vec![w_star.shape()],
        Problem::Classification { x, classes, .. } => {
            let h = model.layers.first().map_or(0, |l| l.weight.nrows());
            vec![(h, x.nrows()), (*classes, h)]
        }
    };
    if model.layers.len() != expect.len() {
        return Err(Error::InvalidArgument(format!(
            "model has {} layers, problem needs {}",
            model.layers.len(),
            expect.len()
        )));
    }
    for (l, e) in model.layers.iter().zip(expect) {
        if l.weight.shape() != e {
            return Err(Error::ShapeMismatch {
                expected: e,
                got: l.weight.shape(),
            });
        }
    }
    Ok(())
}

/// Column-wise softmax cross-entropy: returns (mean loss, softmax probabilities).
fn softmax_ce(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let mut p = logits.clone();
    let mut loss = 0.0;
    for (j, mut col) in p.column_iter_mut().enumerate() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
        loss -= col[labels[j]].max(f64::MIN_POSITIVE).ln();
    }
    (loss / labels.len() as f64, p)
}

/// Loss on `batch` (column indices) or the full data when `batch` is `None`.
pub fn loss(model: &ToyModel, problem: &Problem, batch: Option<&[usize]>) -> Result<f64> {
    check_shapes(model, problem)?;
    Ok(match problem {
        Problem::Linear { x, y, .. } => {
            let (x, y) = (select(x, batch), select(y, batch));
            let e = &model.layers[0].weight * &x - y;
            e.norm_squared() / (2.0 * x.ncols() as f64)
        }
        Problem::Quadratic { b, w_star } => {
            let e = &model.layers[0].weight - w_star;
            0.5 * (e.transpose() * b * &e).trace()
        }
        Problem::Classification { x, labels, .. } => {
            let x = select(x, batch);
            let labels = select_labels(labels, batch);
            let h = (&model.layers[0].weight * &x).map(|v| v.max(0.0));
            softmax_ce(&(&model.layers[1].weight * h), &labels).0
        }
    })
}

/// Loss and exact per-layer gradients.
pub fn loss_and_gradients(
    model: &ToyModel,
    problem: &Problem,
    batch: Option<&[usize]>,
) -> Result<(f64, Vec<Matrix>)> {
    check_shapes(model, problem)?;
    Ok(match problem {
        Problem::Linear { x, y, .. } => {
            let (x, y) = (select(x, batch), select(y, batch));
            let n = x.ncols() as f64;
            let e = &model.layers[0].weight * &x - y;
            (e.norm_squared() / (2.0 * n), vec![&e * x.transpose() / n])
        }
        Problem::Quadratic { b, w_star } => {
            let e = &model.layers[0].weight - w_star;
            let be = b * &e;
            (0.5 * (e.transpose() * &be).trace(), vec![be])
        }
        Problem::Classification { x, labels, classes } => {
            let x = select(x, batch);
            let labels = select_labels(labels, batch);
            let n = x.ncols() as f64;
            let (w1, w2) = (&model.layers[0].weight, &model.layers[1].weight);
            let z1 = w1 * &x;
            let h = z1.map(|v| v.max(0.0));
            let (l, p) = softmax_ce(&(w2 * &h), &labels);
            let mut dz2 = p;
            for (j, &c) in labels.iter().enumerate() {
                debug_assert!(c < *classes);
                dz2[(c, j)] -= 1.0;
            }
            dz2 /= n;
            let g2 = &dz2 * h.transpose();
            let mut dz1 = w2.transpose() * &dz2;
            dz1.zip_apply(&z1, |d, z| {
                if z <= 0.0 {
                    *d = 0.0
                }
            });
            let g1 = dz1 * x.transpose();
            (l, vec![g1, g2])
        }
    })
}

pub fn gradients(model: &ToyModel, problem: &Problem, batch: Option<&[usize]>) -> Result<Vec<Matrix>> {
    loss_and_gradients(model, problem, batch).map(|(_, g)| g)
}

/// Epoch-wise sampling without replacement, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(samples: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            batch,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// First step index at which the total gradient norm was within tolerance.
    pub steps_to_grad_tol: Option<u64>,
    pub diverged_at: Option<u64>,
    pub steps_run: u64,
    pub trace: SpectralTrace,
    pub wall_time_ms: u64,
    pub checkpoint: Checkpoint,
}

impl RunResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Trains one seed of `spec` until the step budget, the gradient tolerance or divergence.
///
/// The gradient-norm check uses the total Frobenius norm over all layers,
/// evaluated before each step (and once more after the last step).
pub fn run_experiment(spec: &ExperimentSpec, seed: u64) -> Result<RunResult> {
    spec.validate()?;
    let start = Instant::now();
    let problem = Problem::generate(&spec.data.kind, spec.data.seed.unwrap_or(seed))?;
    let mut model = ToyModel::init(&spec.model, &problem, derive_seed(seed, 1, 0))?;
    let cfg = OptimizerConfig {
        seed: derive_seed(spec.optimizer.seed, seed, 2),
        ..spec.optimizer.clone()
    };
    let mut states: Vec<LayerState> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerState::new(l.weight.clone(), i as u64))
        .collect();
    let mut sampler = match (spec.data.batch_size, problem.samples()) {
        (Some(b), Some(n)) if b < n => Some(BatchSampler::new(n, b, derive_seed(seed, 3, 0))),
        _ => None,
    };
    let mut trace = match spec.ns_probe_iterations {
        Some(i) => SpectralTrace::with_ns_probe(NewtonSchulzVariant::classic(i)),
        None => SpectralTrace::new(),
    };

    let initial_loss = loss(&model, &problem, None)?;
    let mut steps_to_grad_tol = None;
    let mut diverged_at = None;
    let mut steps_run = 0;
    for t in 0..=spec.step_budget {
        let batch = sampler.as_mut().map(BatchSampler::next_batch);
        let (l, grads) = loss_and_gradients(&model, &problem, batch.as_deref())?;
        if !l.is_finite() || l > DIVERGENCE_LOSS || grads.iter().any(|g| !g.iter().all(|v| v.is_finite())) {
            diverged_at = Some(t);
            break;
        }
        let gnorm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        if gnorm <= spec.grad_tolerance {
            steps_to_grad_tol = Some(t);
            break;
        }
        if t == spec.step_budget {
            break;
        }
        let mut traced = None;
        for i in (0..states.len()).rev() {
            let report = spec.method.step(&mut states[i], &grads[i], &cfg)?;
            model.layers[i].weight = states[i].weight.clone();
            if i == spec.trace_layer {
                traced = Some(report);
            }
        }
        let report = traced.expect("trace layer stepped");
        trace.record_step(&states[spec.trace_layer], &report, l)?;
        steps_run = t + 1;
    }
    let final_loss = loss(&model, &problem, None)?;
    Ok(RunResult {
        seed,
        initial_loss,
        final_loss,
        steps_to_grad_tol,
        diverged_at,
        steps_run,
        trace,
        wall_time_ms: start.elapsed().as_millis() as u64,
        checkpoint: Checkpoint::capture(spec.method, &cfg, &states),
    })
}

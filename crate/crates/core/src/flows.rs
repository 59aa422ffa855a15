//! One- and multi-neuron student–teacher models with full-dataset BatchNorm,
//! integrated under plain gradient flow or the HAM metric flow.
//!
//! A student is `f(z) = Σ_k a_k · relu(γ_k · x̂_k + β_k)` with `x_k = w_k · z`
//! normalised over the whole dataset.

use crate::error::{LabError, Result};
use crate::numerics::{gaussian, Matrix, Rng};

pub const DEFAULT_FLOW_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronParams {
    pub a: f64,
    pub w: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    /// `true` for trainable input weights.
    pub mask: Vec<bool>,
}

impl NeuronParams {
    /// Masked entries of `w` are zeroed.
    pub fn new(a: f64, mut w: Vec<f64>, gamma: f64, beta: f64, mask: Vec<bool>) -> Result<Self> {
        if w.len() != mask.len() {
            return Err(LabError::shape("NeuronParams::new", w.len(), mask.len()));
        }
        w.iter_mut().zip(&mask).filter(|(_, &m)| !m).for_each(|(v, _)| *v = 0.0);
        Ok(NeuronParams { a, w, gamma, beta, mask })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// Fraction of masked input weights.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDataset {
    /// `m × dim`
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

/// Gradients of the mean squared loss for one neuron; `g_w` is zero on masked entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronGrads {
    pub g_a: f64,
    pub g_w: Vec<f64>,
    pub g_gamma: f64,
    pub g_beta: f64,
}

struct Normalized {
    xhat: Vec<f64>,
    std: f64,
}

fn normalize(p: &NeuronParams, z: &Matrix, eps: f64) -> Result<Normalized> {
    if z.cols() != p.dim() {
        return Err(LabError::shape("neuron forward", p.dim(), z.cols()));
    }
    let m = z.rows();
    if m < 2 {
        return Err(LabError::InvalidArgument(format!("need at least 2 samples, got {m}")));
    }
    let x: Vec<f64> = (0..m)
        .map(|j| z.row(j).iter().zip(&p.w).map(|(zi, wi)| zi * wi).sum())
        .collect();
    let mean = x.iter().sum::<f64>() / m as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    let std = (var + eps).sqrt();
    if !(std > 0.0) {
        return Err(LabError::InvalidArgument("zero pre-activation variance with eps = 0".into()));
    }
    Ok(Normalized {
        xhat: x.iter().map(|v| (v - mean) / std).collect(),
        std,
    })
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Output of the sum of `neurons` on every row of `z`.
pub fn student_output(neurons: &[NeuronParams], z: &Matrix, eps: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; z.rows()];
    for p in neurons {
        let n = normalize(p, z, eps)?;
        for (o, xh) in out.iter_mut().zip(&n.xhat) {
            *o += p.a * relu(p.gamma * xh + p.beta);
        }
    }
    Ok(out)
}

/// `L = (1/2m) Σ_j (ŷ_j − f(z_j))²` and exact gradients for every neuron.
pub fn student_loss_grads(neurons: &[NeuronParams], data: &TeacherDataset, eps: f64) -> Result<(f64, Vec<NeuronGrads>)> {
    let z = &data.inputs;
    let m = z.rows();
    if data.targets.len() != m {
        return Err(LabError::shape("student_loss_grads", m, data.targets.len()));
    }
    let norms = neurons.iter().map(|p| normalize(p, z, eps)).collect::<Result<Vec<_>>>()?;
    let mut resid: Vec<f64> = data.targets.iter().map(|t| -t).collect();
    for (p, n) in neurons.iter().zip(&norms) {
        for (r, xh) in resid.iter_mut().zip(&n.xhat) {
            *r += p.a * relu(p.gamma * xh + p.beta);
        }
    }
    let mf = m as f64;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * mf);

    let grads = neurons
        .iter()
        .zip(&norms)
        .map(|(p, n)| {
            let mut g_a = 0.0;
            let mut g_gamma = 0.0;
            let mut g_beta = 0.0;
            // e_j = ∂L/∂y_j
            let e: Vec<f64> = (0..m)
                .map(|j| {
                    let y = p.gamma * n.xhat[j] + p.beta;
                    let d = resid[j] / mf;
                    g_a += d * relu(y);
                    let ej = if y > 0.0 { d * p.a } else { 0.0 };
                    g_gamma += ej * n.xhat[j];
                    g_beta += ej;
                    ej
                })
                .collect();
            let mean_g = e.iter().map(|v| p.gamma * v).sum::<f64>() / mf;
            let mean_gx = e.iter().zip(&n.xhat).map(|(v, xh)| p.gamma * v * xh).sum::<f64>() / mf;
            let mut g_w = vec![0.0; p.dim()];
            for j in 0..m {
                let dx = (p.gamma * e[j] - mean_g - n.xhat[j] * mean_gx) / n.std;
                for (g, zi) in g_w.iter_mut().zip(z.row(j)) {
                    *g += dx * zi;
                }
            }
            g_w.iter_mut().zip(&p.mask).filter(|(_, &on)| !on).for_each(|(g, _)| *g = 0.0);
            NeuronGrads { g_a, g_w, g_gamma, g_beta }
        })
        .collect();
    Ok((loss, grads))
}

pub fn neuron_loss_grads(p: &NeuronParams, data: &TeacherDataset, eps: f64) -> Result<(f64, NeuronGrads)> {
    let (loss, mut g) = student_loss_grads(std::slice::from_ref(p), data, eps)?;
    Ok((loss, g.pop().expect("one neuron")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowMethod {
    Gf,
    Ham { alpha: f64 },
}

/// One Euler step. `scaling` multiplies each neuron's `g_w` by `√(1 − s)`.
/// Returns the loss before the step.
pub fn flow_step(neurons: &mut [NeuronParams], data: &TeacherDataset, eta: f64, eps: f64, method: FlowMethod, scaling: bool) -> Result<f64> {
    let (loss, grads) = student_loss_grads(neurons, data, eps)?;
    let alpha = match method {
        FlowMethod::Gf => 0.0,
        FlowMethod::Ham { alpha } if alpha >= 0.0 => alpha,
        FlowMethod::Ham { alpha } => return Err(LabError::InvalidArgument(format!("alpha {alpha} < 0"))),
    };
    for (p, g) in neurons.iter_mut().zip(grads) {
        let k = if scaling { (1.0 - p.sparsity()).sqrt() } else { 1.0 };
        p.a -= eta * (1.0 + alpha * p.a.abs()) * g.g_a;
        for (i, w) in p.w.iter_mut().enumerate() {
            if p.mask[i] {
                *w -= eta * (1.0 + alpha * w.abs()) * k * g.g_w[i];
            }
        }
        p.gamma -= eta * g.g_gamma;
        p.beta -= eta * g.g_beta;
    }
    Ok(loss)
}

pub fn gf_step(p: &NeuronParams, data: &TeacherDataset, eta: f64, eps: f64) -> Result<NeuronParams> {
    let mut out = [p.clone()];
    flow_step(&mut out, data, eta, eps, FlowMethod::Gf, false)?;
    let [out] = out;
    Ok(out)
}

pub fn ham_gf_step(p: &NeuronParams, data: &TeacherDataset, eta: f64, alpha: f64, eps: f64) -> Result<NeuronParams> {
    let mut out = [p.clone()];
    flow_step(&mut out, data, eta, eps, FlowMethod::Ham { alpha }, false)?;
    let [out] = out;
    Ok(out)
}

/// `a² − γ² − β²`
pub fn gf_invariant(a: f64, gamma: f64, beta: f64) -> f64 {
    a * a - gamma * gamma - beta * beta
}

/// `∫₀^|a| p/(1+αp) dp = (α|a| − ln(1+α|a|))/α²`; `a²/2` when `α = 0`.
pub fn ham_integral(a: f64, alpha: f64) -> f64 {
    let x = alpha * a.abs();
    if alpha == 0.0 {
        return 0.5 * a * a;
    }
    (x - x.ln_1p()) / (alpha * alpha)
}

/// `(α|a| − ln(α|a|+1))/α² − ½(γ² + β²)`
pub fn ham_invariant(a: f64, gamma: f64, beta: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(LabError::InvalidArgument(format!(
            "ham invariant needs alpha > 0, got {alpha}; use gf_invariant / 2"
        )));
    }
    Ok(ham_integral(a, alpha) - 0.5 * (gamma * gamma + beta * beta))
}

/// Whether `a` can pass through zero on the invariant set: `γ₀² + β₀² > 2 ∫₀^|a₀| p/(1+αp) dp`.
pub fn sign_flip_feasible(a0: f64, gamma0: f64, beta0: f64, alpha: f64) -> bool {
    gamma0 * gamma0 + beta0 * beta0 > 2.0 * ham_integral(a0, alpha)
}

/// Teacher, student and data. The teacher uses the first `dim − redundant`
/// inputs; the remaining `redundant` inputs carry zero teacher weight and are
/// masked in the student. Both start from `γ = 1`, `β = 0`, `|a| = 1`.
pub fn make_teacher_student(
    dim: usize,
    m: usize,
    redundant: usize,
    opposite_sign: bool,
    eps: f64,
    rng: &mut Rng,
) -> Result<(NeuronParams, NeuronParams, TeacherDataset)> {
    if redundant >= dim {
        return Err(LabError::InvalidArgument(format!("redundant {redundant} must be below dim {dim}")));
    }
    let mask: Vec<bool> = (0..dim).map(|i| i < dim - redundant).collect();
    let teacher = NeuronParams::new(1.0, gaussian(rng, 1, dim, 0.0, 1.0).into_vec(), 1.0, 0.0, mask.clone())?;
    let inputs = gaussian(rng, m, dim, 0.0, 1.0);
    let targets = student_output(std::slice::from_ref(&teacher), &inputs, eps)?;
    let a = if opposite_sign { -1.0 } else { 1.0 };
    let student = NeuronParams::new(a, gaussian(rng, 1, dim, 0.0, 1.0).into_vec(), 1.0, 0.0, mask)?;
    Ok((teacher, student, TeacherDataset { inputs, targets }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub samples: usize,
    pub redundant: usize,
    pub method: FlowMethod,
    /// Used for the HAM invariant column even in GF runs.
    pub alpha: f64,
    pub eta: f64,
    pub steps: usize,
    pub scaling: bool,
    /// Two students: one on the redundant inputs only, one on the teacher's inputs.
    pub multi_neuron: bool,
    pub opposite_sign: bool,
    pub eps: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dim: 10,
            samples: 200,
            redundant: 8,
            method: FlowMethod::Ham { alpha: 4.0 },
            alpha: 4.0,
            eta: 0.01,
            steps: 10_000,
            scaling: false,
            multi_neuron: false,
            opposite_sign: true,
            eps: DEFAULT_FLOW_EPS,
            seed: 0,
        }
    }
}

/// State of one neuron at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRecord {
    pub step: usize,
    pub neuron: usize,
    pub loss: f64,
    pub a: f64,
    pub gamma: f64,
    pub beta: f64,
    pub gf_invariant: f64,
    pub ham_invariant: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub records: Vec<FlowRecord>,
    pub initial: Vec<NeuronParams>,
    pub last: Vec<NeuronParams>,
    pub teacher: NeuronParams,
    pub final_loss: f64,
    /// Whether neuron `k`'s `a` ever changed sign.
    pub sign_changed: Vec<bool>,
}

impl FlowTrajectory {
    /// Largest deviation of each invariant from its initial value, over all neurons.
    pub fn max_drift(&self) -> (f64, f64) {
        let mut gf: f64 = 0.0;
        let mut ham: f64 = 0.0;
        for r in &self.records {
            let first = &self.records[r.neuron];
            debug_assert_eq!(first.neuron, r.neuron);
            gf = gf.max((r.gf_invariant - first.gf_invariant).abs());
            ham = ham.max((r.ham_invariant - first.ham_invariant).abs());
        }
        (gf, ham)
    }

    /// [`FlowTrajectory::max_drift`] restricted to one neuron.
    pub fn max_drift_of(&self, neuron: usize) -> (f64, f64) {
        let mut gf: f64 = 0.0;
        let mut ham: f64 = 0.0;
        let Some(first) = self.records.iter().find(|r| r.neuron == neuron) else {
            return (0.0, 0.0);
        };
        for r in self.records.iter().filter(|r| r.neuron == neuron) {
            gf = gf.max((r.gf_invariant - first.gf_invariant).abs());
            ham = ham.max((r.ham_invariant - first.ham_invariant).abs());
        }
        (gf, ham)
    }
}

fn ham_column(a: f64, gamma: f64, beta: f64, alpha: f64) -> f64 {
    ham_invariant(a, gamma, beta, alpha).unwrap_or_else(|_| 0.5 * gf_invariant(a, gamma, beta))
}

/// Integrates the configured flow, recording every neuron at every step
/// (step 0 is the initial state, step `steps` the final one).
pub fn run_flow_experiment(cfg: &FlowConfig) -> Result<FlowTrajectory> {
    if !(cfg.eta >= 0.0) {
        return Err(LabError::InvalidArgument(format!("eta {} must be non-negative", cfg.eta)));
    }
    let mut rng = Rng::new(cfg.seed);
    let (teacher, student, data) = make_teacher_student(cfg.dim, cfg.samples, cfg.redundant, cfg.opposite_sign, cfg.eps, &mut rng)?;
    let mut neurons = if cfg.multi_neuron {
        let a = student.a;
        let off: Vec<bool> = vec![true; cfg.dim];
        let w = gaussian(&mut rng, 1, cfg.dim, 0.0, 1.0).into_vec();
        vec![NeuronParams::new(a, w, 1.0, 0.0, off)?, student]
    } else {
        vec![student]
    };
    let initial = neurons.clone();
    let mut records = Vec::with_capacity((cfg.steps + 1) * neurons.len());
    let signs: Vec<f64> = neurons.iter().map(|p| p.a.signum()).collect();
    let mut sign_changed = vec![false; neurons.len()];
    let push = |records: &mut Vec<FlowRecord>, step: usize, loss: f64, ns: &[NeuronParams]| {
        for (k, p) in ns.iter().enumerate() {
            records.push(FlowRecord {
                step,
                neuron: k,
                loss,
                a: p.a,
                gamma: p.gamma,
                beta: p.beta,
                gf_invariant: gf_invariant(p.a, p.gamma, p.beta),
                ham_invariant: ham_column(p.a, p.gamma, p.beta, cfg.alpha),
            });
        }
    };
    for step in 0..cfg.steps {
        let before = neurons.clone();
        let loss = flow_step(&mut neurons, &data, cfg.eta, cfg.eps, cfg.method, cfg.scaling)?;
        if !loss.is_finite() {
            return Err(LabError::NonFinite { step });
        }
        push(&mut records, step, loss, &before);
        for (k, p) in neurons.iter().enumerate() {
            if p.a.signum() != signs[k] {
                sign_changed[k] = true;
            }
        }
    }
    let (final_loss, _) = student_loss_grads(&neurons, &data, cfg.eps)?;
    push(&mut records, cfg.steps, final_loss, &neurons);
    Ok(FlowTrajectory {
        records,
        initial,
        last: neurons,
        teacher,
        final_loss,
        sign_changed,
    })
}

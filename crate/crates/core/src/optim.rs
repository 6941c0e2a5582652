//! Adam with decoupled weight decay, and the two-pass sharpness-aware step.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-5, weight_decay: 3e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
    pub base: AdamConfig,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { rho: 0.05, base: AdamConfig::default() }
    }
}

impl SamConfig {
    /// `rho = 0` is accepted and reduces the step to plain Adam.
    pub fn validate(&self) -> Result<()> {
        let b = &self.base;
        let ok = self.rho >= 0.0
            && self.rho.is_finite()
            && b.learning_rate > 0.0
            && b.weight_decay >= 0.0
            && (0.0..1.0).contains(&b.beta1)
            && (0.0..1.0).contains(&b.beta2)
            && b.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("sam config", format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

fn check_shapes(op: &'static str, params: &[Tensor], other: &[Tensor], what: &str) -> Result<()> {
    if params.len() != other.len() || params.iter().zip(other).any(|(p, o)| p.shape() != o.shape()) {
        return Err(Error::shape(op, format!("{what} do not match the parameter list")));
    }
    Ok(())
}

fn check_finite(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// One Adam update. Weight decay is applied to the weights directly
/// (`w ← w − lr·wd·w`) before the moment-based delta.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    check_shapes("adam_step", params, grads, "gradients")?;
    check_shapes("adam_step", params, &state.m, "moment buffers")?;
    check_finite(grads, "adam_step gradients")?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] * decay - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

pub fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct Perturbation {
    pub epsilon: Vec<Tensor>,
    /// Joint L2 norm of the gradient over all parameters.
    pub grad_norm: f64,
    /// Set when the gradient was all zero and no shift was applied.
    pub skipped: bool,
}

/// Shifts `params` to `w + ε` with `ε = ρ·g/‖g‖` (norm over all parameters jointly).
pub fn perturb(params: &mut [Tensor], grads: &[Tensor], rho: f64) -> Result<Perturbation> {
    check_shapes("perturb", params, grads, "gradients")?;
    check_finite(grads, "perturb gradients")?;
    let grad_norm = global_norm(grads);
    if grad_norm == 0.0 {
        let epsilon = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        return Ok(Perturbation { epsilon, grad_norm, skipped: true });
    }
    let scale = rho / grad_norm;
    let epsilon: Vec<Tensor> = grads.iter().map(|g| g.map(|v| v * scale)).collect();
    for (p, e) in params.iter_mut().zip(&epsilon) {
        p.add_assign(e);
    }
    Ok(Perturbation { epsilon, grad_norm, skipped: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamPass {
    /// Evaluation at `w`.
    Clean,
    /// Evaluation at `w + ε`.
    Perturbed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss_w: f64,
    pub loss_w_plus_eps: f64,
    pub grad_norm: f64,
    pub eps_norm: f64,
    pub perturbation_skipped: bool,
}

/// One sharpness-aware step: gradient at `w`, shift to `w + ε`, gradient
/// there, restore `w`, then an Adam update with the shifted gradient.
///
/// The evaluator is called exactly twice and returns `(loss, grads)` at the
/// parameters it is given. On any error the parameters are left as they were.
pub fn sam_step<F>(mut evaluator: F, params: &mut [Tensor], state: &mut AdamState, cfg: &SamConfig) -> Result<StepReport>
where
    F: FnMut(&[Tensor], SamPass) -> Result<(f64, Vec<Tensor>)>,
{
    let (loss_w, g1) = evaluator(params, SamPass::Clean)?;
    let original: Vec<Tensor> = params.to_vec();
    let restore = |params: &mut [Tensor]| {
        for (p, o) in params.iter_mut().zip(&original) {
            p.clone_from(o);
        }
    };
    let pert = perturb(params, &g1, cfg.rho)?;
    let eps_norm = global_norm(&pert.epsilon);
    let second = evaluator(params, SamPass::Perturbed);
    restore(params);
    let (loss_w_plus_eps, g2) = second?;
    if let Err(e) = adam_step(state, params, &g2, &cfg.base) {
        restore(params);
        return Err(e);
    }
    Ok(StepReport { loss_w, loss_w_plus_eps, grad_norm: pert.grad_norm, eps_norm, perturbation_skipped: pert.skipped })
}

/// CSV training log with columns `epoch, step, loss_w, loss_w_plus_eps, grad_norm`.
pub struct StepLog {
    writer: csv::Writer<File>,
}

impl StepLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["epoch", "step", "loss_w", "loss_w_plus_eps", "grad_norm"])?;
        Ok(StepLog { writer })
    }

    pub fn record(&mut self, epoch: usize, step: u64, r: &StepReport) -> Result<()> {
        self.writer.write_record([
            epoch.to_string(),
            step.to_string(),
            r.loss_w.to_string(),
            r.loss_w_plus_eps.to_string(),
            r.grad_norm.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Data(format!("flushing step log: {e}")))
    }
}

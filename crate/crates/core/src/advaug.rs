//! Embedding-space adversarial perturbations and the augmented parameter
//! gradient built from them.
//!
//! All methods perturb the encoder embedding output `x` of each example and
//! normalize over that example's flattened `max_input_len x hidden` tensor.
//! Iterated methods always anchor at the original input: `x_t = x + δ_t`.
//!
//! The mixed step used by [`AdvMethod::Atcom`] is
//! `δ = ε (α g/‖g‖₁ + (1-α) g/‖g‖₂)`. The α weighting is our reading of how
//! the L1 and L2 normalizations combine; `atcom_literal` switches to the
//! elementwise form `ε sign(g) ‖g‖₂/‖g‖₁` instead.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{batch_pass, embed, EmbeddingSeq, Example, Mat, Params};

/// Below this norm a gradient is treated as zero and yields `δ = 0`.
pub const ZERO_GRAD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMethod {
    None,
    Fgsm,
    Fgm,
    Pgd,
    #[default]
    Atcom,
}

impl AdvMethod {
    pub const ALL: [AdvMethod; 5] = [
        AdvMethod::None,
        AdvMethod::Fgsm,
        AdvMethod::Fgm,
        AdvMethod::Pgd,
        AdvMethod::Atcom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdvMethod::None => "none",
            AdvMethod::Fgsm => "fgsm",
            AdvMethod::Fgm => "fgm",
            AdvMethod::Pgd => "pgd",
            AdvMethod::Atcom => "atcom",
        }
    }
}

impl fmt::Display for AdvMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdvMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdvMethod::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown adversarial method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub method: AdvMethod,
    /// L∞ budget for fgsm, L2 budget otherwise.
    pub epsilon: f64,
    /// Iterations for pgd, adversarial examples per input for atcom.
    pub k: usize,
    /// Weight of the L1-normalized direction in the atcom step.
    pub alpha: f64,
    /// Average the clean gradient with the adversarial one.
    pub include_clean: bool,
    pub atcom_literal: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            method: AdvMethod::Atcom,
            epsilon: 1.0,
            k: 4,
            alpha: 0.3,
            include_clean: true,
            atcom_literal: false,
        }
    }
}

impl AdvConfig {
    pub fn none() -> Self {
        Self {
            method: AdvMethod::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Adversarial forward/backward passes per training step.
    pub fn adversarial_passes(&self) -> usize {
        match self.method {
            AdvMethod::None => 0,
            AdvMethod::Fgsm | AdvMethod::Fgm => 1,
            AdvMethod::Pgd | AdvMethod::Atcom => self.k,
        }
    }
}

// ------------------------------------------------------------------ deltas

/// `ε · sign(g)`, with `sign(0) = 0`.
pub fn fgsm_delta<F: Float>(g: &Mat<F>, epsilon: F) -> Mat<F> {
    g.map(|v| {
        if v > F::zero() {
            epsilon
        } else if v < F::zero() {
            -epsilon
        } else {
            F::zero()
        }
    })
}

/// `ε · g / ‖g‖₂`
pub fn fgm_delta<F: Float>(g: &Mat<F>, epsilon: F) -> Mat<F> {
    let n2 = g.l2_norm();
    if n2 < F::of(ZERO_GRAD_EPS) {
        return Mat::zeros(g.rows(), g.cols());
    }
    let s = epsilon / n2;
    g.map(|v| v * s)
}

/// `ε · (α g/‖g‖₁ + (1-α) g/‖g‖₂)`; `‖δ‖₂ ≤ ε` with equality at `α = 0`.
pub fn atcom_delta<F: Float>(g: &Mat<F>, epsilon: F, alpha: F) -> Mat<F> {
    let n2 = g.l2_norm();
    if n2 < F::of(ZERO_GRAD_EPS) {
        return Mat::zeros(g.rows(), g.cols());
    }
    let n1 = g.l1_norm();
    let s = epsilon * (alpha / n1 + (F::one() - alpha) / n2);
    g.map(|v| v * s)
}

/// Elementwise alternative: `ε · sign(g) · ‖g‖₂/‖g‖₁`.
pub fn atcom_literal_delta<F: Float>(g: &Mat<F>, epsilon: F) -> Mat<F> {
    let n2 = g.l2_norm();
    if n2 < F::of(ZERO_GRAD_EPS) {
        return Mat::zeros(g.rows(), g.cols());
    }
    fgsm_delta(g, epsilon * n2 / g.l1_norm())
}

/// The per-step perturbation of `cfg.method` for gradient `g`.
pub fn step_delta<F: Float>(g: &Mat<F>, cfg: &AdvConfig) -> Mat<F> {
    let eps = F::of(cfg.epsilon);
    match cfg.method {
        AdvMethod::None => Mat::zeros(g.rows(), g.cols()),
        AdvMethod::Fgsm => fgsm_delta(g, eps),
        AdvMethod::Fgm | AdvMethod::Pgd => fgm_delta(g, eps),
        AdvMethod::Atcom if cfg.atcom_literal => atcom_literal_delta(g, eps),
        AdvMethod::Atcom => atcom_delta(g, eps, F::of(cfg.alpha)),
    }
}

// -------------------------------------------------------------- generation

/// One iteration over a batch: perturbations `δ_t`, the embedding gradients
/// that generated them, and the mean loss at `x + δ_t`.
#[derive(Clone, Debug)]
pub struct PerturbationStep<F> {
    pub deltas: Vec<Mat<F>>,
    pub gradients: Vec<Mat<F>>,
    pub loss: F,
}

#[derive(Clone, Debug)]
pub struct PerturbationBatch<F> {
    pub method: AdvMethod,
    pub epsilon: f64,
    pub clean_loss: F,
    pub clean_grad: Params<F>,
    /// Per-example embedding gradients at the clean input.
    pub clean_embedding_grads: Vec<Mat<F>>,
    /// Steps `t = 1..=K`.
    pub steps: Vec<PerturbationStep<F>>,
    /// Indices into `steps` whose inputs count as adversarial examples.
    pub exported: Vec<usize>,
    /// Parameter gradient from the adversarial side: the mean over steps for
    /// atcom, the last step for pgd/fgm/fgsm, the clean gradient for none.
    pub g_avg: Params<F>,
}

impl<F: Float> PerturbationBatch<F> {
    pub fn exported_deltas(&self) -> impl Iterator<Item = &[Mat<F>]> {
        self.exported.iter().map(|&t| self.steps[t].deltas.as_slice())
    }

    pub fn stats(&self) -> PerturbationStats {
        let steps = self
            .steps
            .iter()
            .map(|s| {
                let n = s.deltas.len().max(1) as f64;
                StepStats {
                    loss: s.loss.as_f64(),
                    delta_l1: s.deltas.iter().map(|d| d.l1_norm().as_f64()).sum::<f64>() / n,
                    delta_l2: s.deltas.iter().map(|d| d.l2_norm().as_f64()).sum::<f64>() / n,
                }
            })
            .collect();
        let n = self.clean_embedding_grads.len().max(1) as f64;
        let clean = self.clean_loss.as_f64();
        let mean_norm = |q| {
            self.clean_embedding_grads
                .iter()
                .map(|g| grad_norm(g, q))
                .sum::<f64>()
                / n
        };
        PerturbationStats {
            clean_loss: clean,
            steps,
            regularized_l1: clean + self.epsilon / 2.0 * mean_norm(1),
            regularized_l2: clean + self.epsilon / 2.0 * mean_norm(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub delta_l1: f64,
    pub delta_l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub clean_loss: f64,
    pub steps: Vec<StepStats>,
    /// First-order adversarial loss estimate `L + ε/2 ‖∂L/∂x‖₁`.
    pub regularized_l1: f64,
    /// Same with the L2 norm.
    pub regularized_l2: f64,
}

fn grad_norm<F: Float>(g: &Mat<F>, q: u32) -> f64 {
    match q {
        1 => g.l1_norm().as_f64(),
        _ => g.l2_norm().as_f64(),
    }
}

enum Reduce {
    Mean,
    Last,
}

fn iterate<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    cfg: &AdvConfig,
    steps: usize,
    reduce: Reduce,
    batch_id: Option<usize>,
) -> Result<PerturbationBatch<F>> {
    let clean = batch_pass(params, examples, None, batch_id)?;
    let base: Vec<EmbeddingSeq<F>> = examples
        .iter()
        .map(|ex| embed(params, &ex.input))
        .collect::<Result<_>>()?;

    let mut gradients = clean.embedding_grads.clone();
    let mut records = Vec::with_capacity(steps);
    let mut acc: Option<Params<F>> = None;
    for _ in 0..steps {
        let deltas: Vec<Mat<F>> = gradients.iter().map(|g| step_delta(g, cfg)).collect();
        let inputs: Vec<EmbeddingSeq<F>> = base.iter().zip(&deltas).map(|(x, d)| x.perturbed(d)).collect();
        let pass = batch_pass(params, examples, Some(&inputs), batch_id)?;
        match (&reduce, &mut acc) {
            (Reduce::Mean, Some(a)) => a.add_assign(&pass.param_grad),
            _ => acc = Some(pass.param_grad),
        }
        records.push(PerturbationStep {
            deltas,
            gradients: std::mem::replace(&mut gradients, pass.embedding_grads),
            loss: pass.loss,
        });
    }
    let mut g_avg = acc.unwrap_or_else(|| clean.param_grad.clone());
    if matches!(reduce, Reduce::Mean) && steps > 0 {
        g_avg.scale(F::one() / F::of(steps as f64));
    }
    let exported = match reduce {
        Reduce::Mean => (0..steps).collect(),
        Reduce::Last => steps.checked_sub(1).into_iter().collect(),
    };
    Ok(PerturbationBatch {
        method: cfg.method,
        epsilon: cfg.epsilon,
        clean_loss: clean.loss,
        clean_grad: clean.param_grad,
        clean_embedding_grads: clean.embedding_grads,
        steps: records,
        exported,
        g_avg,
    })
}

/// Iterated L2 steps; only the last perturbed input is exported and its
/// parameter gradient becomes `g_avg`.
pub fn pgd_generate<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    epsilon: f64,
    steps: usize,
    batch_id: Option<usize>,
) -> Result<PerturbationBatch<F>> {
    let cfg = AdvConfig {
        method: AdvMethod::Pgd,
        epsilon,
        k: steps,
        ..AdvConfig::default()
    };
    cfg.validate()?;
    iterate(params, examples, &cfg, steps, Reduce::Last, batch_id)
}

/// `K` mixed-norm steps; all `K` perturbed inputs are exported and `g_avg`
/// is the mean of their parameter gradients.
pub fn atcom_generate<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    cfg: &AdvConfig,
    batch_id: Option<usize>,
) -> Result<PerturbationBatch<F>> {
    if cfg.method != AdvMethod::Atcom {
        return Err(Error::InvalidConfig(format!(
            "atcom_generate called with method {}",
            cfg.method
        )));
    }
    cfg.validate()?;
    iterate(params, examples, cfg, cfg.k, Reduce::Mean, batch_id)
}

/// Dispatch on `cfg.method`. `None` runs only the clean pass.
pub fn generate<F: Float>(
    params: &Params<F>,
    examples: &[Example],
    cfg: &AdvConfig,
    batch_id: Option<usize>,
) -> Result<PerturbationBatch<F>> {
    cfg.validate()?;
    match cfg.method {
        AdvMethod::None => iterate(params, examples, cfg, 0, Reduce::Last, batch_id),
        AdvMethod::Fgsm | AdvMethod::Fgm => iterate(params, examples, cfg, 1, Reduce::Last, batch_id),
        AdvMethod::Pgd => pgd_generate(params, examples, cfg.epsilon, cfg.k, batch_id),
        AdvMethod::Atcom => atcom_generate(params, examples, cfg, batch_id),
    }
}

/// The gradient actually applied to the parameters for one step.
pub fn augmented_step_gradient<F: Float>(
    clean_grad: &Params<F>,
    batch: &PerturbationBatch<F>,
    cfg: &AdvConfig,
) -> Result<Params<F>> {
    let shapes = |p: &Params<F>| p.tensors().iter().map(|t| t.shape()).collect::<Vec<_>>();
    if shapes(clean_grad) != shapes(&batch.g_avg) {
        return Err(Error::ShapeMismatch {
            op: "augmented_step_gradient",
            expected: "clean and adversarial gradients of the same model".into(),
            found: "different parameter shapes".into(),
        });
    }
    Ok(match cfg.method {
        AdvMethod::None => clean_grad.clone(),
        _ if cfg.include_clean => {
            let mut g = clean_grad.clone();
            g.add_assign(&batch.g_avg);
            g.scale(F::of(0.5));
            g
        }
        _ => batch.g_avg.clone(),
    })
}

/// `L + (ε/2) ‖g‖_q` for `q ∈ {1, 2}`.
pub fn adversarial_loss_estimate<F: Float>(clean_loss: f64, g: &Mat<F>, epsilon: f64, q: u32) -> Result<f64> {
    if q != 1 && q != 2 {
        return Err(Error::UnsupportedNorm(q));
    }
    Ok(clean_loss + epsilon / 2.0 * grad_norm(g, q))
}

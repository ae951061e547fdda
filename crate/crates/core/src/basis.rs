//! Basis sets and their per-block convex combinations.
//!
//! A personalized model is built block by block as
//!
//! ```text
//! θ[b] = Σ_k α[b][k] · v_k[b]                 (no major basis)
//! θ[b] = ½ (v'[b] + Σ_k α[b][k] · v_k[b])     (with major basis v')
//! ```
//!
//! where each row `α[b] = softmax(ψ[b] / τ)` lies on the simplex. Gradients
//! with respect to the bases and the logits `ψ` are derived from a single
//! backward pass through the combined model:
//!
//! ```text
//! ∂L/∂v_k[b]  = s · α[b][k] · g[b]
//! ∂L/∂ψ[b][k] = (1/τ) · α[b][k] · (d[b][k] − Σ_j α[b][j] d[b][j]),   d[b][k] = s · v_k[b] · g[b]
//! ```
//!
//! with `g = ∇θ L` and `s = ½` when the major basis is present, else `1`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Batch, BlockSpec, MlpSpec, ParamVector};

/// `K` basis models sharing one block partition, plus an optional major basis.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    bases: Vec<ParamVector>,
    major: Option<ParamVector>,
}

impl BasisSet {
    pub fn new(bases: Vec<ParamVector>, major: Option<ParamVector>) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::Config("a basis set needs at least one basis".into()))?;
        for b in bases.iter().skip(1).chain(major.as_ref()) {
            first.check_same_shape(b)?;
        }
        Ok(BasisSet { bases, major })
    }

    /// Number of non-major bases.
    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn bases(&self) -> &[ParamVector] {
        &self.bases
    }

    pub fn major(&self) -> Option<&ParamVector> {
        self.major.as_ref()
    }

    pub fn has_major(&self) -> bool {
        self.major.is_some()
    }

    pub fn block_spec(&self) -> &Arc<BlockSpec> {
        self.bases[0].block_spec()
    }

    pub fn num_blocks(&self) -> usize {
        self.bases[0].num_blocks()
    }

    /// Bases followed by the major basis, if any.
    pub fn arrays(&self) -> impl Iterator<Item = &ParamVector> {
        self.bases.iter().chain(self.major.as_ref())
    }

    pub(crate) fn arrays_mut(&mut self) -> impl Iterator<Item = &mut ParamVector> {
        self.bases.iter_mut().chain(self.major.as_mut())
    }

    pub fn into_parts(self) -> (Vec<ParamVector>, Option<ParamVector>) {
        (self.bases, self.major)
    }

    /// Multiplier applied to the summed bases: ½ with a major basis.
    pub fn scale(&self) -> f64 {
        if self.major.is_some() {
            0.5
        } else {
            1.0
        }
    }
}

/// Per-block logits `ψ` and the softmax temperature `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationState {
    logits: Matrix,
    temperature: f64,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must lie in (0, 1], got {tau}")))
    }
}

impl CombinationState {
    pub fn new(logits: Matrix, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if logits.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("combination logit".into()));
        }
        Ok(CombinationState {
            logits,
            temperature,
        })
    }

    /// All-zero logits: every block combines the bases uniformly.
    pub fn uniform(num_blocks: usize, k: usize, temperature: f64) -> Result<Self> {
        CombinationState::new(Matrix::zeros(num_blocks, k), temperature)
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut Matrix {
        &mut self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_blocks(&self) -> usize {
        self.logits.rows()
    }

    pub fn k(&self) -> usize {
        self.logits.cols()
    }

    /// Number of scalars a client trains when only the combination is learned.
    pub fn trainable_params(&self) -> usize {
        self.logits.rows() * self.logits.cols()
    }

    /// `α[b] = softmax(ψ[b] / τ)`, one simplex row per block.
    pub fn coefficients(&self) -> Matrix {
        let mut alpha = Matrix::zeros(self.logits.rows(), self.logits.cols());
        for b in 0..self.logits.rows() {
            tempered_softmax_into(self.logits.row(b), self.temperature, alpha.row_mut(b));
        }
        alpha
    }

    /// Same logits, new temperature.
    pub fn sharpen(&self, tau: f64) -> Result<Self> {
        check_temperature(tau)?;
        Ok(CombinationState {
            logits: self.logits.clone(),
            temperature: tau,
        })
    }
}

fn tempered_softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let m = logits.iter().map(|&v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v / tau - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Tempered softmax of a single logit row.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    tempered_softmax_into(logits, tau, &mut out);
    out
}

fn check_state(set: &BasisSet, rows: usize, cols: usize) -> Result<()> {
    if rows != set.num_blocks() {
        return Err(Error::mismatch("combination rows (blocks)", set.num_blocks(), rows));
    }
    if cols != set.k() {
        return Err(Error::mismatch("combination columns (bases)", set.k(), cols));
    }
    Ok(())
}

/// The personalized model for the combination `state`.
pub fn combine(set: &BasisSet, state: &CombinationState) -> Result<ParamVector> {
    check_state(set, state.num_blocks(), state.k())?;
    combine_weights(set, &state.coefficients())
}

/// Block-wise weighted sum of the bases with arbitrary (unconstrained) weights.
///
/// The first term initializes the accumulator directly, so a single basis
/// with weight 1 is reproduced bit for bit.
pub fn combine_weights(set: &BasisSet, weights: &Matrix) -> Result<ParamVector> {
    check_state(set, weights.rows(), weights.cols())?;
    let mut out = ParamVector::zeros(set.block_spec().clone());
    for b in 0..set.num_blocks() {
        let w = weights.row(b);
        let dst = out.block_mut(b);
        for (d, &v) in dst.iter_mut().zip(set.bases[0].block(b)) {
            *d = w[0] * v;
        }
        for (k, basis) in set.bases.iter().enumerate().skip(1) {
            for (d, &v) in dst.iter_mut().zip(basis.block(b)) {
                *d += w[k] * v;
            }
        }
        if let Some(major) = &set.major {
            for (d, &v) in dst.iter_mut().zip(major.block(b)) {
                *d = 0.5 * (v + *d);
            }
        }
    }
    Ok(out)
}

/// Which gradients [`combined_gradients`] should materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradTargets {
    pub bases: bool,
    pub logits: bool,
}

impl GradTargets {
    pub const ALL: GradTargets = GradTargets {
        bases: true,
        logits: true,
    };
    pub const BASES: GradTargets = GradTargets {
        bases: true,
        logits: false,
    };
    pub const LOGITS: GradTargets = GradTargets {
        bases: false,
        logits: true,
    };
}

/// Gradients of one mini-batch loss with respect to the basis set and logits.
#[derive(Debug, Clone)]
pub struct CombinedGradients {
    pub loss: f64,
    /// Gradient with respect to the combined model.
    pub theta: ParamVector,
    /// One gradient per non-major basis (empty unless requested).
    pub bases: Vec<ParamVector>,
    /// Gradient of the major basis (present when requested and the set has one).
    pub major: Option<ParamVector>,
    /// `num_blocks × K` (empty unless requested).
    pub logits: Matrix,
}

/// One forward/backward pass through `combine(set, state)`, projected onto
/// the requested parameters.
pub fn combined_gradients(
    spec: &MlpSpec,
    set: &BasisSet,
    state: &CombinationState,
    batch: &Batch,
    targets: GradTargets,
) -> Result<CombinedGradients> {
    combined_gradients_with_offset(spec, set, state, None, batch, targets)
}

/// As [`combined_gradients`], for the model `combine(set, state) + offset`.
/// The offset is a fixed additive correction (e.g. a fine-tuned classifier)
/// and its gradient is `theta`.
pub fn combined_gradients_with_offset(
    spec: &MlpSpec,
    set: &BasisSet,
    state: &CombinationState,
    offset: Option<&ParamVector>,
    batch: &Batch,
    targets: GradTargets,
) -> Result<CombinedGradients> {
    check_state(set, state.num_blocks(), state.k())?;
    let alpha = state.coefficients();
    let mut theta = combine_weights(set, &alpha)?;
    if let Some(off) = offset {
        theta.check_same_shape(off)?;
        for (t, o) in theta.values_mut().iter_mut().zip(off.values()) {
            *t += o;
        }
    }
    let (loss, g) = nn::loss_and_grad(spec, &theta, batch)?;
    let scale = set.scale();
    let nb = set.num_blocks();
    let k = set.k();

    let mut bases = Vec::new();
    let mut major = None;
    if targets.bases {
        bases = (0..k)
            .map(|j| {
                let mut out = ParamVector::zeros(set.block_spec().clone());
                for b in 0..nb {
                    let factor = if set.has_major() {
                        alpha.get(b, j) * scale
                    } else {
                        alpha.get(b, j)
                    };
                    for (o, &gv) in out.block_mut(b).iter_mut().zip(g.block(b)) {
                        *o = factor * gv;
                    }
                }
                out
            })
            .collect();
        if set.has_major() {
            let mut m = g.clone();
            m.values_mut().iter_mut().for_each(|v| *v *= 0.5);
            major = Some(m);
        }
    }

    let mut logits = Matrix::zeros(0, 0);
    if targets.logits {
        logits = Matrix::zeros(nb, k);
        let inv_tau = 1.0 / state.temperature();
        for b in 0..nb {
            let gb = g.block(b);
            let d: Vec<f64> = set
                .bases
                .iter()
                .map(|v| scale * nn::dot(v.block(b), gb))
                .collect();
            let a = alpha.row(b);
            let mean: f64 = a.iter().zip(&d).map(|(x, y)| x * y).sum();
            for j in 0..k {
                logits.set(b, j, inv_tau * a[j] * (d[j] - mean));
            }
        }
    }

    Ok(CombinedGradients {
        loss,
        theta: g,
        bases,
        major,
        logits,
    })
}

/// Gradients of the loss with respect to each non-major basis.
pub fn grad_bases(
    spec: &MlpSpec,
    set: &BasisSet,
    state: &CombinationState,
    batch: &Batch,
) -> Result<Vec<ParamVector>> {
    Ok(combined_gradients(spec, set, state, batch, GradTargets::BASES)?.bases)
}

/// Gradient of the loss with respect to the major basis (`½ ∇θ L`), if present.
pub fn grad_major(
    spec: &MlpSpec,
    set: &BasisSet,
    state: &CombinationState,
    batch: &Batch,
) -> Result<Option<ParamVector>> {
    Ok(combined_gradients(spec, set, state, batch, GradTargets::BASES)?.major)
}

/// Gradient of the loss with respect to the combination logits `ψ`.
pub fn grad_logits(
    spec: &MlpSpec,
    set: &BasisSet,
    state: &CombinationState,
    batch: &Batch,
) -> Result<Matrix> {
    Ok(combined_gradients(spec, set, state, batch, GradTargets::LOGITS)?.logits)
}

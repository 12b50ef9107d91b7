//! Central finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::network::{mask_target, SegModel};
use super::{ModelError, Sample, TrainConfig};

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_abs_error: f64,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`; zero when
    /// both gradients vanish.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub selected: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

/// Compares every parameter gradient against central differences with step
/// [`FD_STEP`]. The selected candidate is held fixed at its unperturbed value so
/// both sides differentiate the same branch of the argmax.
pub fn gradient_check(model: &SegModel, sample: &Sample, cfg: &TrainConfig, tolerance: f64) -> Result<GradCheckReport, ModelError> {
    gradient_check_with_step(model, sample, cfg, tolerance, FD_STEP)
}

pub fn gradient_check_with_step(
    model: &SegModel,
    sample: &Sample,
    cfg: &TrainConfig,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport, ModelError> {
    let prep = model.prepare(&sample.image, &sample.prompt)?;
    let target = mask_target(&sample.mask, prep.size)?;
    let (obj, grads) = model.objective(&prep, &target, cfg, true, None)?;
    let grads = grads.expect("gradient requested");
    let j = obj.selected;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let names_and_lens: Vec<(String, usize)> = model.params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    for (ti, (name, len)) in names_and_lens.into_iter().enumerate() {
        let analytic: Vec<f64> = grads.tensors()[ti].1.iter().copied().collect();
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let original = nth(&mut probe, ti, k, None);
            nth(&mut probe, ti, k, Some(original + step));
            let plus = probe.objective(&prep, &target, cfg, false, Some(j))?.0.total;
            nth(&mut probe, ti, k, Some(original - step));
            let minus = probe.objective(&prep, &target, cfg, false, Some(j))?.0.total;
            nth(&mut probe, ti, k, Some(original));
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_error = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        let rel_error = if scale == 0.0 { 0.0 } else { max_abs_error / scale };
        tensors.push(TensorCheck {
            name,
            len,
            max_abs_error,
            rel_error,
            passed: rel_error <= tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, selected: j, tensors })
}

/// Reads element `k` of tensor `ti`, optionally overwriting it first.
fn nth(model: &mut SegModel, ti: usize, k: usize, value: Option<f64>) -> f64 {
    let mut tensors = model.params.tensors_mut();
    let slot = tensors[ti].1.iter_mut().nth(k).expect("index in range");
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}

//! Auto-context outer loop.
//!
//! Iteration `k` registers the moving map, warped by the composition of all
//! previous fields, against the fixed map, and appends the new field on the
//! right: `φ ← φ ∘ φ_k`, so the moving map is always resampled once, from
//! the original, with `φ₁ ∘ … ∘ φ_k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::{dice, FoldingCounts};
use crate::optimizer::{estimate_velocity, OptimizerConfig};
use crate::transform::{compose, integrate_svf, jacobian_determinant, warp_values, warp_labels, DisplacementField};
use crate::volume::{one_hot_soft, LabelVolume, SoftTissueMap, Tissue, N_TISSUES};

/// How the warped moving map is turned into the optimizer's input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextEncoding {
    /// Warp the hard labels (nearest neighbor), then soft-encode them.
    #[default]
    ReencodeLabels,
    /// Warp the soft encoding of the original labels directly (trilinear).
    WarpSoft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoContextConfig {
    pub n_iterations: usize,
    pub optimizer: OptimizerConfig,
    /// Gaussian width of the soft tissue encoding, in voxels.
    pub sigma_soft: f64,
    pub encoding: ContextEncoding,
    /// Stop once an iteration improves mean (GM, WM) Dice by less than 0.001.
    pub early_stop: bool,
}

impl Default for AutoContextConfig {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            optimizer: OptimizerConfig::default(),
            sigma_soft: 1.0,
            encoding: ContextEncoding::default(),
            early_stop: false,
        }
    }
}

/// Mean Dice gain below which `early_stop` ends the loop.
pub const EARLY_STOP_GAIN: f64 = 1e-3;

impl AutoContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations < 1 {
            return Err(Error::Config("n_autocontext must be >= 1".into()));
        }
        if !(self.sigma_soft.is_finite() && self.sigma_soft >= 0.0) {
            return Err(Error::Config(format!("sigma_soft must be >= 0, got {}", self.sigma_soft)));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    /// 1-based auto-context iteration.
    pub iteration: usize,
    pub dsc_gm: f64,
    pub dsc_wm: f64,
    /// Folding ratio of the composed field, percent.
    pub rfp_percent: f64,
    /// Voxels with `J = 0` exactly (not counted as folding).
    pub zero_jacobian_voxels: usize,
    /// Optimizer objective at the end of this iteration.
    pub loss: LossBreakdown,
}

impl IterationDiagnostics {
    pub fn mean_dsc(&self) -> f64 {
        0.5 * (self.dsc_gm + self.dsc_wm)
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// `φ₁ ∘ φ₂ ∘ … ∘ φₙ`.
    pub final_field: DisplacementField,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Original moving labels warped by `final_field`.
    pub warped_labels: LabelVolume,
}

/// What iteration `k` is about to register; handed to observers.
pub struct IterationInput<'a> {
    pub iteration: usize,
    /// Composition of all previous fields (zero before the first).
    pub composed: &'a DisplacementField,
    pub moving_soft: &'a SoftTissueMap,
}

fn dice_or_nan(a: &LabelVolume, b: &LabelVolume, t: Tissue) -> f64 {
    dice(a, b, t.label()).unwrap_or(f64::NAN)
}

fn warp_soft(map: &SoftTissueMap, phi: &DisplacementField) -> SoftTissueMap {
    let channels: [Vec<f64>; N_TISSUES] = std::array::from_fn(|c| warp_values(map.channel(c), phi));
    SoftTissueMap::from_raw(*map.meta(), channels)
}

/// Run the auto-context registration of `moving` onto `fixed`.
pub fn register_auto_context(
    moving: &LabelVolume,
    fixed: &LabelVolume,
    cfg: &AutoContextConfig,
) -> Result<RegistrationResult> {
    register_auto_context_observed(moving, fixed, cfg, |_| {})
}

/// As [`register_auto_context`], calling `observe` before each iteration's
/// velocity estimation.
pub fn register_auto_context_observed(
    moving: &LabelVolume,
    fixed: &LabelVolume,
    cfg: &AutoContextConfig,
    mut observe: impl FnMut(&IterationInput),
) -> Result<RegistrationResult> {
    cfg.validate()?;
    moving.meta().ensure_same(fixed.meta(), "register_auto_context")?;
    let fixed_soft = one_hot_soft(fixed, cfg.sigma_soft)?;
    let moving_soft_original = match cfg.encoding {
        ContextEncoding::WarpSoft => Some(one_hot_soft(moving, cfg.sigma_soft)?),
        ContextEncoding::ReencodeLabels => None,
    };

    let mut composed = DisplacementField::zeros(*fixed.meta());
    let mut diagnostics = Vec::with_capacity(cfg.n_iterations);
    let mut warped = moving.clone();
    for k in 1..=cfg.n_iterations {
        let moving_soft = match &moving_soft_original {
            Some(soft) => warp_soft(soft, &composed),
            None => one_hot_soft(&warped, cfg.sigma_soft)?,
        };
        observe(&IterationInput {
            iteration: k,
            composed: &composed,
            moving_soft: &moving_soft,
        });
        let estimate = estimate_velocity(&moving_soft, &fixed_soft, fixed, &cfg.optimizer)
            .map_err(|e| e.in_context_iteration(k))?;
        let step = integrate_svf(&estimate.velocity, cfg.optimizer.squaring_steps);
        composed = compose(&composed, &step)?;
        // always from the original moving map
        warped = warp_labels(moving, &composed)?;

        let folding = FoldingCounts::of(&jacobian_determinant(&composed)?);
        let diag = IterationDiagnostics {
            iteration: k,
            dsc_gm: dice_or_nan(&warped, fixed, Tissue::Gm),
            dsc_wm: dice_or_nan(&warped, fixed, Tissue::Wm),
            rfp_percent: folding.rfp_percent(),
            zero_jacobian_voxels: folding.zero,
            loss: estimate.final_loss,
        };
        log::info!(
            "auto-context {k}/{}: dsc gm {:.4} wm {:.4} rfp {:.5}% total {:.6}",
            cfg.n_iterations,
            diag.dsc_gm,
            diag.dsc_wm,
            diag.rfp_percent,
            diag.loss.total
        );
        let gain = diagnostics
            .last()
            .map(|prev: &IterationDiagnostics| diag.mean_dsc() - prev.mean_dsc());
        diagnostics.push(diag);
        if cfg.early_stop && gain.is_some_and(|g| g < EARLY_STOP_GAIN) {
            break;
        }
    }

    Ok(RegistrationResult {
        final_field: composed,
        diagnostics,
        warped_labels: warped,
    })
}

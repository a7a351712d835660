//! Per-pair velocity estimation: coarse-to-fine adaptive-moment descent on
//! the registration objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossWeights, Objective};
use crate::metrics::DEFAULT_NCC_WINDOW;
use crate::transform::{VelocityField, DEFAULT_SQUARING_STEPS, MIN_JACOBIAN_DIM};
use crate::volume::{resample_labels, resample_soft, GridMeta, LabelVolume, SoftTissueMap, Stencil};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Iteration cap per pyramid level.
    pub max_iterations: usize,
    /// Downsampling factors, coarse to fine; strictly decreasing, ending in 1.
    pub pyramid_factors: Vec<usize>,
    pub squaring_steps: u32,
    /// NCC window at full resolution; each coarser level uses 2 less (min 3).
    pub ncc_window: usize,
    pub weights: LossWeights,
    /// Stop a level once the relative loss change over `convergence_window`
    /// iterations falls below this.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_iterations: 200,
            pyramid_factors: vec![4, 2, 1],
            squaring_steps: DEFAULT_SQUARING_STEPS,
            ncc_window: DEFAULT_NCC_WINDOW,
            weights: LossWeights::default(),
            convergence_tol: 1e-5,
            convergence_window: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        let f = &self.pyramid_factors;
        if f.is_empty() || f.last() != Some(&1) || f.windows(2).any(|w| w[0] <= w[1]) || f.contains(&0) {
            return bad(format!("pyramid_factors must be strictly decreasing and end in 1, got {f:?}"));
        }
        if self.ncc_window < 3 || self.ncc_window.is_multiple_of(2) {
            return bad(format!("ncc_window must be odd and >= 3, got {}", self.ncc_window));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_epsilon <= 0.0 {
            return bad("Adam decay rates must lie in [0, 1) and epsilon must be > 0".into());
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 || self.convergence_window == 0 {
            return bad("convergence_tol must be >= 0 and convergence_window >= 1".into());
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// NCC window used at pyramid level `level` (index into `pyramid_factors`).
    pub fn window_for_level(&self, level: usize) -> usize {
        let from_finest = self.pyramid_factors.len() - 1 - level;
        self.ncc_window.saturating_sub(2 * from_finest).max(3)
    }
}

/// One optimizer evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub factor: usize,
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct VelocityEstimate {
    pub velocity: VelocityField,
    pub trace: Vec<TraceEntry>,
    /// Objective at the returned velocity, full resolution.
    pub final_loss: LossBreakdown,
}

/// Bring a velocity field from a coarser pyramid level onto a finer grid.
/// Components are trilinearly interpolated, then multiplied by the grid
/// ratio so physical displacements are preserved.
pub fn upsample_velocity(
    v: &VelocityField,
    from_factor: usize,
    to_factor: usize,
    to_meta: &GridMeta,
) -> Result<VelocityField> {
    if from_factor == 0 || to_factor == 0 || from_factor < to_factor {
        return Err(Error::InvalidInput(format!(
            "cannot upsample from factor {from_factor} to {to_factor}"
        )));
    }
    let from = from_factor as f64;
    let to = to_factor as f64;
    let ratio = from / to;
    let offset = (to - 1.0) / 2.0 - (from - 1.0) / 2.0;
    let coarse = *v.meta();
    let data = (0..to_meta.len())
        .map(|i| {
            let c = to_meta.coords(i);
            let p = c.map(|k| (to * k as f64 + offset) / from);
            Stencil::new(&coarse, p).sample3(v.data()).map(|x| x * ratio)
        })
        .collect();
    Ok(VelocityField::from_raw(*to_meta, data))
}

struct Adam {
    m: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(len: usize, cfg: &OptimizerConfig) -> Self {
        Self {
            m: vec![[0.0; 3]; len],
            v: vec![[0.0; 3]; len],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
        }
    }

    fn step(&mut self, params: &mut [[f64; 3]], grad: &[[f64; 3]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..3 {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn check_finite(loss: &LossBreakdown, iteration: usize) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            detail: format!("non-finite loss {loss:?}"),
        })
    }
}

/// Estimate the velocity field registering `moving_soft` onto `fixed_soft`.
///
/// Each level starts from the upsampled result of the previous one (or
/// zero), falling back to zero when that is already better. The best
/// evaluated iterate of each level is carried forward.
pub fn estimate_velocity(
    moving_soft: &SoftTissueMap,
    fixed_soft: &SoftTissueMap,
    fixed_labels: &LabelVolume,
    cfg: &OptimizerConfig,
) -> Result<VelocityEstimate> {
    cfg.validate()?;
    moving_soft.meta().ensure_same(fixed_soft.meta(), "estimate_velocity")?;
    moving_soft.meta().ensure_same(fixed_labels.meta(), "estimate_velocity labels")?;

    let mut trace = Vec::new();
    let mut global_iter = 0usize;
    let mut previous: Option<(VelocityField, usize)> = None;
    let mut final_loss = None;

    for (level, &factor) in cfg.pyramid_factors.iter().enumerate() {
        let moving = resample_soft(moving_soft, factor)?;
        let fixed = resample_soft(fixed_soft, factor)?;
        let labels = resample_labels(fixed_labels, factor)?;
        let meta = *moving.meta();
        if factor != 1 && meta.dims.iter().any(|&n| n < MIN_JACOBIAN_DIM) {
            log::debug!("skipping pyramid factor {factor}: grid {:?} too small", meta.dims);
            continue;
        }
        let objective = Objective::new(
            &moving,
            &fixed,
            &labels,
            cfg.weights,
            cfg.squaring_steps,
            cfg.window_for_level(level),
        )?;

        let mut v = match &previous {
            Some((coarse, from)) => {
                let up = upsample_velocity(coarse, *from, factor, &meta)?;
                let zero = VelocityField::zeros(meta);
                let up_loss = objective.evaluate(&up)?;
                let zero_loss = objective.evaluate(&zero)?;
                if up_loss.total.is_finite() && up_loss.total <= zero_loss.total {
                    up
                } else {
                    zero
                }
            }
            None => VelocityField::zeros(meta),
        };

        let mut adam = Adam::new(meta.len(), cfg);
        let mut best: Option<(LossBreakdown, VelocityField)> = None;
        let mut history: Vec<f64> = Vec::new();
        for it in 0..=cfg.max_iterations {
            let (loss, grad) = objective.evaluate_with_gradient(&v)?;
            check_finite(&loss, global_iter)?;
            trace.push(TraceEntry {
                level,
                factor,
                iteration: it,
                loss,
            });
            global_iter += 1;
            if best.as_ref().is_none_or(|(b, _)| loss.total < b.total) {
                best = Some((loss, v.clone()));
            }
            history.push(loss.total);
            let converged = history.len() > cfg.convergence_window && {
                let old = history[history.len() - 1 - cfg.convergence_window];
                (old - loss.total).abs() <= cfg.convergence_tol * old.abs().max(f64::MIN_POSITIVE)
            };
            if it == cfg.max_iterations || converged {
                break;
            }
            adam.step(v.data_mut(), grad.data());
        }
        let (loss, v_best) = best.expect("at least one evaluation per level");
        log::debug!(
            "level factor {factor}: total {:.6} sim {:.6} after {} evaluations",
            loss.total,
            loss.sim,
            history.len()
        );
        final_loss = Some(loss);
        previous = Some((v_best, factor));
    }

    let (velocity, _) = previous.expect("finest level always runs");
    Ok(VelocityEstimate {
        velocity,
        trace,
        final_loss: final_loss.expect("finest level always runs"),
    })
}

//! Registration objective and its exact reverse-mode gradient with respect
//! to the stationary velocity field.
//!
//! ```text
//! total = λ_sim · (−sim) + λ_v · velocity_reg(v) + λ_j · jacobian_reg(J(φ), fixed labels)
//! φ     = integrate_svf(v, steps)
//! sim   = channel-mean local NCC between the warped moving soft map and the fixed soft map
//! ```
//!
//! The gradient is assembled by hand: NCC adjoint → warp adjoint (through the
//! sampling coordinates) → Jacobian-determinant adjoint → one compose adjoint
//! per squaring step (through both the sampled field and the coordinates) →
//! `1 / 2^steps`, plus the regularizer's own gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{tissue_jacobian_stats, NccReference, TissueJacobianStats};
use crate::transform::{
    check_jacobian_dims, integrate_svf_chain, jacobian_adjoint, jacobian_determinant, map_points, squaring_adjoint, warp_channels,
    DisplacementField, VelocityField,
};
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, SoftTissueMap, Stencil, Tissue, N_TISSUES};

/// Term weights of the objective. All must be non-negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sim: f64,
    pub velocity: f64,
    pub jacobian: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sim: 1.0,
            velocity: 1.0,
            jacobian: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(sim: f64, velocity: f64, jacobian: f64) -> Result<Self> {
        let w = Self { sim, velocity, jacobian };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.sim, self.velocity, self.jacobian]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("loss weights must be finite and >= 0, got {self:?}")))
        }
    }
}

/// The objective's terms at one evaluation.
///
/// `sim` is the similarity itself (higher is better); it enters `total`
/// with a negative sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub velocity_reg: f64,
    pub jacobian_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(w: &LossWeights, sim: f64, velocity_reg: f64, jacobian_reg: f64) -> Self {
        Self {
            sim,
            velocity_reg,
            jacobian_reg,
            total: w.sim * (-sim) + w.velocity * velocity_reg + w.jacobian * jacobian_reg,
        }
    }
}

/// Mean over voxels of the squared forward differences of every component
/// along every axis (differences past the last slice are zero).
pub fn velocity_reg(v: &VelocityField) -> f64 {
    let meta = v.meta();
    let data = v.data();
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];
    let mut total = 0.0;
    for (i, a) in data.iter().enumerate() {
        let c = meta.coords(i);
        for d in 0..3 {
            if c[d] + 1 < meta.dims[d] {
                let b = data[i + strides[d]];
                for comp in 0..3 {
                    let diff = b[comp] - a[comp];
                    total += diff * diff;
                }
            }
        }
    }
    total / data.len() as f64
}

fn velocity_reg_gradient(v: &VelocityField, scale: f64, out: &mut [[f64; 3]]) {
    let meta = v.meta();
    let data = v.data();
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];
    let k = 2.0 * scale / data.len() as f64;
    for i in 0..data.len() {
        let c = meta.coords(i);
        for d in 0..3 {
            if c[d] + 1 < meta.dims[d] {
                let j = i + strides[d];
                for comp in 0..3 {
                    let g = k * (data[j][comp] - data[i][comp]);
                    out[j][comp] += g;
                    out[i][comp] -= g;
                }
            }
        }
    }
}

/// Regions penalized through their minimum Jacobian; the others through their mean.
fn uses_min(t: Tissue) -> bool {
    matches!(t, Tissue::Gm | Tissue::Wm)
}

fn jacobian_reg_from_stats(stats: &TissueJacobianStats) -> f64 {
    Tissue::ALL
        .iter()
        .filter_map(|&t| {
            stats.get(t).map(|r| {
                let s = if uses_min(t) { r.min } else { r.mean };
                (s - 1.0).abs().exp() - 1.0
            })
        })
        .sum()
}

/// Tissue-aware Jacobian penalty: `exp(|min J − 1|) − 1` summed over GM and
/// WM, `exp(|mean J − 1|) − 1` summed over BG and CSF. Empty regions add 0.
pub fn jacobian_reg(j: &ScalarVolume, labels: &LabelVolume) -> Result<f64> {
    Ok(jacobian_reg_from_stats(&tissue_jacobian_stats(j, labels)?))
}

/// `∂ jacobian_reg / ∂J` as a sparse list. Min regions use the subgradient
/// at their first argmin voxel; mean regions spread it uniformly.
fn jacobian_reg_subgradient(stats: &TissueJacobianStats, labels: &LabelVolume, scale: f64) -> Vec<(usize, f64)> {
    let mut per_region = [0.0; N_TISSUES];
    let mut out = Vec::new();
    for t in Tissue::ALL {
        let Some(r) = stats.get(t) else { continue };
        let s = if uses_min(t) { r.min } else { r.mean };
        let dev = s - 1.0;
        let slope = scale * dev.abs().exp() * if dev > 0.0 { 1.0 } else if dev < 0.0 { -1.0 } else { 0.0 };
        if uses_min(t) {
            out.push((r.argmin, slope));
        } else {
            per_region[t as usize] = slope / r.count as f64;
        }
    }
    if per_region.iter().any(|&g| g != 0.0) {
        for (i, &l) in labels.labels().iter().enumerate() {
            let g = per_region[l as usize];
            if g != 0.0 {
                out.push((i, g));
            }
        }
    }
    out
}

/// Loss evaluator for one (moving, fixed) pair with the fixed-side NCC
/// statistics cached.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    moving: &'a SoftTissueMap,
    fixed_labels: &'a LabelVolume,
    references: Vec<NccReference>,
    weights: LossWeights,
    steps: u32,
}

impl<'a> Objective<'a> {
    pub fn new(
        moving: &'a SoftTissueMap,
        fixed: &SoftTissueMap,
        fixed_labels: &'a LabelVolume,
        weights: LossWeights,
        steps: u32,
        window: usize,
    ) -> Result<Self> {
        weights.validate()?;
        moving.meta().ensure_same(fixed.meta(), "objective moving/fixed")?;
        moving.meta().ensure_same(fixed_labels.meta(), "objective moving/fixed labels")?;
        check_jacobian_dims(moving.meta())?;
        let references = (0..N_TISSUES)
            .map(|c| NccReference::new(fixed.channel(c), fixed.meta(), window))
            .collect::<Result<_>>()?;
        Ok(Self {
            moving,
            fixed_labels,
            references,
            weights,
            steps,
        })
    }

    pub fn meta(&self) -> &GridMeta {
        self.moving.meta()
    }

    fn channels(&self) -> [&'a [f64]; N_TISSUES] {
        std::array::from_fn(|c| self.moving.channel(c))
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    fn check(&self, v: &VelocityField) -> Result<()> {
        v.meta().ensure_same(self.meta(), "objective velocity")
    }

    pub fn evaluate(&self, v: &VelocityField) -> Result<LossBreakdown> {
        self.check(v)?;
        let chain = integrate_svf_chain(v, self.steps);
        let phi = chain.last().unwrap();
        let warped = warp_channels(self.channels(), phi);
        let mut sim = 0.0;
        for (reference, w) in self.references.iter().zip(&warped) {
            sim += reference.value(w);
        }
        sim /= N_TISSUES as f64;
        let j = jacobian_determinant(phi)?;
        let jreg = jacobian_reg(&j, self.fixed_labels)?;
        Ok(LossBreakdown::assemble(&self.weights, sim, velocity_reg(v), jreg))
    }

    /// Loss and its gradient with respect to every velocity component.
    pub fn evaluate_with_gradient(&self, v: &VelocityField) -> Result<(LossBreakdown, VelocityField)> {
        self.check(v)?;
        let meta = *self.meta();
        let w = self.weights;
        let chain = integrate_svf_chain(v, self.steps);
        let phi: &DisplacementField = chain.last().unwrap();

        // similarity and its adjoint through the warp coordinates
        let mut ubar = vec![[0.0; 3]; meta.len()];
        let mut sim = 0.0;
        let sim_scale = -w.sim / N_TISSUES as f64;
        let warped = warp_channels(self.channels(), phi);
        let mut wbar: Vec<Vec<f64>> = Vec::with_capacity(N_TISSUES);
        for (reference, a) in self.references.iter().zip(&warped) {
            let (value, g) = reference.value_and_adjoint(a, sim_scale);
            sim += value;
            wbar.push(g);
        }
        if w.sim != 0.0 {
            let channels = self.channels();
            ubar = map_points(&meta, phi.data(), |i, p| {
                let st = Stencil::new(&meta, p);
                let mut t = [0.0; 3];
                for (c, ch) in channels.iter().enumerate() {
                    let g = wbar[c][i];
                    if g != 0.0 {
                        let dg = st.gradient(ch);
                        t[0] += g * dg[0];
                        t[1] += g * dg[1];
                        t[2] += g * dg[2];
                    }
                }
                t
            });
        }
        sim /= N_TISSUES as f64;

        // Jacobian regularizer
        let j = jacobian_determinant(phi)?;
        let stats = tissue_jacobian_stats(&j, self.fixed_labels)?;
        let jreg = jacobian_reg_from_stats(&stats);
        if w.jacobian != 0.0 {
            let jbar = jacobian_reg_subgradient(&stats, self.fixed_labels, w.jacobian);
            jacobian_adjoint(phi, &jbar, &mut ubar);
        }

        // back through the squaring chain
        for u in chain[..chain.len() - 1].iter().rev() {
            ubar = squaring_adjoint(u, &ubar);
        }
        let scale = 0.5f64.powi(self.steps as i32);
        for g in ubar.iter_mut() {
            *g = g.map(|c| c * scale);
        }

        if w.velocity != 0.0 {
            velocity_reg_gradient(v, w.velocity, &mut ubar);
        }

        let breakdown = LossBreakdown::assemble(&w, sim, velocity_reg(v), jreg);
        Ok((breakdown, VelocityField::from_raw(meta, ubar)))
    }
}

/// Evaluate the full objective for velocity `v`.
pub fn total_loss(
    v: &VelocityField,
    moving_soft: &SoftTissueMap,
    fixed_soft: &SoftTissueMap,
    fixed_labels: &LabelVolume,
    weights: LossWeights,
    steps: u32,
    window: usize,
) -> Result<LossBreakdown> {
    Objective::new(moving_soft, fixed_soft, fixed_labels, weights, steps, window)?.evaluate(v)
}

/// Exact gradient of [`total_loss`] with respect to `v`.
pub fn loss_gradient(
    v: &VelocityField,
    moving_soft: &SoftTissueMap,
    fixed_soft: &SoftTissueMap,
    fixed_labels: &LabelVolume,
    weights: LossWeights,
    steps: u32,
    window: usize,
) -> Result<VelocityField> {
    Objective::new(moving_soft, fixed_soft, fixed_labels, weights, steps, window)?
        .evaluate_with_gradient(v)
        .map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::one_hot_soft;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels_with(meta: GridMeta, f: impl FnMut(usize, usize, usize) -> u8) -> LabelVolume {
        LabelVolume::from_fn(meta, f).unwrap()
    }

    #[test]
    fn velocity_reg_zero_and_constant() {
        let meta = GridMeta::cube(5);
        assert_eq!(velocity_reg(&VelocityField::zeros(meta)), 0.0);
        assert_eq!(velocity_reg(&VelocityField::constant(meta, [1.0, -2.0, 0.5])), 0.0);
    }

    #[test]
    fn velocity_reg_unit_slope_matches_brute_force() {
        let meta = GridMeta::cube(4);
        let v = VelocityField::from_fn(meta, |x, _, _| [x as f64, 0.0, 0.0]).unwrap();
        // brute force: every forward difference pair along every axis
        let mut sum = 0.0;
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = v.at(x, y, z);
                    for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                        if x + dx < 4 && y + dy < 4 && z + dz < 4 {
                            let b = v.at(x + dx, y + dy, z + dz);
                            sum += (0..3).map(|c| (b[c] - a[c]).powi(2)).sum::<f64>();
                        }
                    }
                }
            }
        }
        let brute = sum / 64.0;
        assert_abs_diff_eq!(brute, 48.0 / 64.0, epsilon = 1e-15);
        assert_abs_diff_eq!(velocity_reg(&v), brute, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_reg_reference_values() {
        let meta = GridMeta::cube(4);
        let labels = labels_with(meta, |x, _, _| x as u8);
        let ones = ScalarVolume::filled(meta, 1.0);
        assert_eq!(jacobian_reg(&ones, &labels).unwrap(), 0.0);

        let gm_min_zero = ScalarVolume::from_fn(meta, |x, y, z| if (x, y, z) == (2, 1, 1) { 0.0 } else { 1.0 }).unwrap();
        assert_abs_diff_eq!(jacobian_reg(&gm_min_zero, &labels).unwrap(), std::f64::consts::E - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(std::f64::consts::E - 1.0, 1.718282, epsilon = 1e-6);

        let csf_mean = ScalarVolume::from_fn(meta, |x, _, _| if x == 1 { 1.5 } else { 1.0 }).unwrap();
        assert_abs_diff_eq!(jacobian_reg(&csf_mean, &labels).unwrap(), 0.5f64.exp() - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(0.5f64.exp() - 1.0, 0.648721, epsilon = 1e-6);

        let mismatch = ScalarVolume::filled(GridMeta::cube(3), 1.0);
        assert!(matches!(jacobian_reg(&mismatch, &labels), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(1.0, -0.1, 1.0).is_err());
        assert!(LossWeights::new(1.0, f64::NAN, 1.0).is_err());
        assert_eq!(LossWeights::default(), LossWeights::new(1.0, 1.0, 1.0).unwrap());
    }

    fn textured_soft(meta: GridMeta, phase: f64) -> SoftTissueMap {
        let mut ch: [Vec<f64>; N_TISSUES] = Default::default();
        let raw: Vec<[f64; 4]> = (0..meta.len())
            .map(|i| {
                let c = meta.coords(i).map(|v| v as f64);
                let mut w = [0.0; 4];
                for (k, wk) in w.iter_mut().enumerate() {
                    let f = 0.7 + 0.35 * k as f64;
                    *wk = 2.2 + ((f * c[0] + phase).sin() + (0.8 * f * c[1] - k as f64).cos() * (0.6 * c[2] + f).sin());
                }
                let s: f64 = w.iter().sum();
                w.map(|v| v / s)
            })
            .collect();
        for (k, chk) in ch.iter_mut().enumerate() {
            *chk = raw.iter().map(|w| w[k]).collect();
        }
        SoftTissueMap::new(meta, ch).unwrap()
    }

    #[test]
    fn aligned_pair_has_zero_regularizers() {
        let meta = GridMeta::cube(12);
        let soft = textured_soft(meta, 0.3);
        let labels = soft.argmax_labels();
        let v = VelocityField::zeros(meta);
        let b = total_loss(&v, &soft, &soft, &labels, LossWeights::default(), 7, 5).unwrap();
        assert_eq!(b.velocity_reg, 0.0);
        assert_eq!(b.jacobian_reg, 0.0);
        assert!(b.sim > 0.99, "sim {}", b.sim);
        assert_eq!(b.total, -b.sim);
        // stationary up to the NCC stabilizer, which leaves an O(eps) slope
        let g = loss_gradient(&v, &soft, &soft, &labels, LossWeights::default(), 7, 5).unwrap();
        let shifted = VelocityField::constant(meta, [0.5, 0.0, 0.0]);
        let g_off = loss_gradient(&shifted, &soft, &soft, &labels, LossWeights::default(), 7, 5).unwrap();
        assert!(g.max_norm() < 1e-2 * g_off.max_norm(), "{} vs {}", g.max_norm(), g_off.max_norm());
    }

    #[test]
    fn zero_regularizer_weights_give_negative_similarity() {
        let meta = GridMeta::cube(10);
        let moving = textured_soft(meta, 0.0);
        let fixed = textured_soft(meta, 0.9);
        let labels = fixed.argmax_labels();
        let v = VelocityField::from_fn(meta, |x, y, z| [0.1 * (y as f64).sin(), 0.05 * z as f64, -0.03 * x as f64]).unwrap();
        let w = LossWeights::new(2.0, 0.0, 0.0).unwrap();
        let b = total_loss(&v, &moving, &fixed, &labels, w, 5, 3).unwrap();
        assert_eq!(b.total, -2.0 * b.sim);
    }

    #[test]
    fn regularizer_only_gradient_is_discrete_laplacian() {
        let meta = GridMeta::new([5, 4, 6], [1.0; 3]).unwrap();
        let soft = one_hot_soft(&labels_with(meta, |x, _, _| (x % 4) as u8), 1.0).unwrap();
        let labels = soft.argmax_labels();
        let v = VelocityField::from_fn(meta, |x, y, z| {
            [0.3 * x as f64 - 0.1 * z as f64, 0.2 * y as f64 + 0.05, -0.4 * z as f64 + 0.1 * x as f64]
        })
        .unwrap();
        let w = LossWeights::new(0.0, 1.0, 0.0).unwrap();
        let g = loss_gradient(&v, &soft, &soft, &labels, w, 7, 3).unwrap();
        // brute force: ∂/∂v_i of (1/N) Σ_pairs (v_j − v_i)² = −(2/N) Σ_neighbours (v_n − v_i)
        let n = meta.len() as f64;
        for z in 0..6usize {
            for y in 0..4usize {
                for x in 0..5usize {
                    let here = v.at(x, y, z);
                    let mut expect = [0.0; 3];
                    let c = [x, y, z];
                    for d in 0..3 {
                        for step in [-1isize, 1] {
                            let q = c[d] as isize + step;
                            if q >= 0 && (q as usize) < meta.dims[d] {
                                let mut cc = c;
                                cc[d] = q as usize;
                                let nb = v.at(cc[0], cc[1], cc[2]);
                                for comp in 0..3 {
                                    expect[comp] -= 2.0 / n * (nb[comp] - here[comp]);
                                }
                            }
                        }
                    }
                    let got = g.at(x, y, z);
                    for comp in 0..3 {
                        assert_abs_diff_eq!(got[comp], expect[comp], epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn jacobian_subgradient_points_at_first_argmin() {
        let meta = GridMeta::cube(3);
        let labels = labels_with(meta, |x, _, _| if x == 0 { 2 } else { 1 });
        let j = ScalarVolume::from_fn(meta, |x, y, z| if x == 0 && (y, z) != (0, 0) { 0.5 } else { 1.2 }).unwrap();
        let stats = tissue_jacobian_stats(&j, &labels).unwrap();
        let sub = jacobian_reg_subgradient(&stats, &labels, 1.0);
        let gm: Vec<_> = sub.iter().filter(|(i, _)| labels.labels()[*i] == 2).collect();
        assert_eq!(gm.len(), 1);
        assert_eq!(gm[0].0, meta.index(0, 1, 0));
        assert_abs_diff_eq!(gm[0].1, -(0.5f64.exp()), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn jacobian_reg_nonnegative_and_monotone(gm_min in 0.0f64..2.0, csf_mean in 0.0f64..2.0, extra in 0.0f64..0.5) {
            let meta = GridMeta::cube(4);
            let labels = labels_with(meta, |x, _, _| x as u8);
            let make = |g: f64, c: f64| ScalarVolume::from_fn(meta, |x, y, z| {
                match x { 2 if (y, z) == (0, 0) => g, 1 => c, _ => 1.0 }
            }).unwrap();
            let r = jacobian_reg(&make(gm_min.min(1.0), csf_mean), &labels).unwrap();
            prop_assert!(r >= 0.0);
            let dev = (csf_mean - 1.0).abs() + extra;
            let further = if csf_mean >= 1.0 { 1.0 + dev } else { 1.0 - dev };
            let r2 = jacobian_reg(&make(gm_min.min(1.0), further), &labels).unwrap();
            prop_assert!(r2 >= r);
        }

        #[test]
        fn velocity_reg_zero_iff_constant(vals in proptest::collection::vec(-2.0f64..2.0, 27 * 3)) {
            let meta = GridMeta::cube(3);
            let data: Vec<[f64; 3]> = vals.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let constant = data.iter().all(|v| *v == data[0]);
            let r = velocity_reg(&VelocityField::new(meta, data).unwrap());
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, constant);
        }
    }
}

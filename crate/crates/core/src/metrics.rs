//! Similarity and evaluation metrics: local NCC, Dice, folding ratio and
//! per-tissue Jacobian statistics.

use crate::error::{Error, Result};
use crate::transform::{jacobian_determinant, DisplacementField};
use crate::volume::{GridMeta, LabelVolume, ScalarVolume, SoftTissueMap, Tissue, N_TISSUES};

/// Stabilizer in the local correlation denominator.
pub const NCC_EPSILON: f64 = 1e-5;

/// Default full-resolution NCC window.
pub const DEFAULT_NCC_WINDOW: usize = 9;

/// Sums over the truncated `(2r + 1)^3` box around every voxel.
pub(crate) fn box_sum(values: &[f64], meta: &GridMeta, r: usize) -> Vec<f64> {
    let dims = meta.dims;
    let mut cur = values.to_vec();
    let mut out = vec![0.0; cur.len()];
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let inner: usize = dims[..axis].iter().product();
        let block = n * inner;
        prefix.resize((n + 1) * inner, 0.0);
        prefix[..inner].fill(0.0);
        for (src, dst) in cur.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
            for i in 0..n {
                let (done, rest) = prefix.split_at_mut((i + 1) * inner);
                let prev = &done[i * inner..];
                let row = &src[i * inner..(i + 1) * inner];
                for ((p, q), v) in rest[..inner].iter_mut().zip(prev).zip(row) {
                    *p = q + v;
                }
            }
            for i in 0..n {
                let lo = i.saturating_sub(r) * inner;
                let hi = ((i + r).min(n - 1) + 1) * inner;
                let row = &mut dst[i * inner..(i + 1) * inner];
                for ((o, h), l) in row.iter_mut().zip(&prefix[hi..hi + inner]).zip(&prefix[lo..lo + inner]) {
                    *o = h - l;
                }
            }
        }
        std::mem::swap(&mut cur, &mut out);
    }
    cur
}

fn window_counts(meta: &GridMeta, r: usize) -> Vec<f64> {
    let axis_count = |i: usize, n: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    (0..meta.len())
        .map(|idx| {
            let c = meta.coords(idx);
            (0..3).map(|a| axis_count(c[a], meta.dims[a])).product()
        })
        .collect()
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        Err(Error::InvalidInput(format!("NCC window must be odd and >= 3, got {window}")))
    } else {
        Ok(())
    }
}

/// Fixed-image side of a local NCC evaluation, precomputed once and reused
/// across optimizer iterations.
#[derive(Clone, Debug)]
pub(crate) struct NccReference {
    meta: GridMeta,
    radius: usize,
    counts: Vec<f64>,
    b: Vec<f64>,
    b_sum: Vec<f64>,
    b_var: Vec<f64>,
}

impl NccReference {
    pub fn new(b: &[f64], meta: &GridMeta, window: usize) -> Result<Self> {
        check_window(window)?;
        let radius = window / 2;
        let counts = window_counts(meta, radius);
        let b_sum = box_sum(b, meta, radius);
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let bb_sum = box_sum(&bb, meta, radius);
        let b_var = bb_sum
            .iter()
            .zip(&b_sum)
            .zip(&counts)
            .map(|((bb, s), n)| bb - s * s / n)
            .collect();
        Ok(Self {
            meta: *meta,
            radius,
            counts,
            b: b.to_vec(),
            b_sum,
            b_var,
        })
    }

    fn moving_sums(&self, a: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&self.b).map(|(x, y)| x * y).collect();
        (
            box_sum(a, &self.meta, self.radius),
            box_sum(&aa, &self.meta, self.radius),
            box_sum(&ab, &self.meta, self.radius),
        )
    }

    /// Mean of the squared local correlation.
    pub fn value(&self, a: &[f64]) -> f64 {
        let (a_sum, aa_sum, ab_sum) = self.moving_sums(a);
        let mut total = 0.0;
        for i in 0..a.len() {
            let n = self.counts[i];
            let cross = ab_sum[i] - a_sum[i] * self.b_sum[i] / n;
            let a_var = aa_sum[i] - a_sum[i] * a_sum[i] / n;
            total += cross * cross / (a_var * self.b_var[i] + NCC_EPSILON);
        }
        total / a.len() as f64
    }

    /// Value and `scale * ∂value/∂a`.
    pub fn value_and_adjoint(&self, a: &[f64], scale: f64) -> (f64, Vec<f64>) {
        let (a_sum, aa_sum, ab_sum) = self.moving_sums(a);
        let len = a.len();
        let inv_len = 1.0 / len as f64;
        let mut total = 0.0;
        let mut g_a = vec![0.0; len];
        let mut g_aa = vec![0.0; len];
        let mut g_ab = vec![0.0; len];
        for i in 0..len {
            let n = self.counts[i];
            let cross = ab_sum[i] - a_sum[i] * self.b_sum[i] / n;
            let a_var = aa_sum[i] - a_sum[i] * a_sum[i] / n;
            let denom = a_var * self.b_var[i] + NCC_EPSILON;
            total += cross * cross / denom;
            let d_cross = 2.0 * cross / denom * scale * inv_len;
            let d_var = -cross * cross * self.b_var[i] / (denom * denom) * scale * inv_len;
            g_ab[i] = d_cross;
            g_aa[i] = d_var;
            g_a[i] = -d_cross * self.b_sum[i] / n - 2.0 * d_var * a_sum[i] / n;
        }
        let s_a = box_sum(&g_a, &self.meta, self.radius);
        let s_aa = box_sum(&g_aa, &self.meta, self.radius);
        let s_ab = box_sum(&g_ab, &self.meta, self.radius);
        let grad = (0..len)
            .map(|i| s_a[i] + 2.0 * a[i] * s_aa[i] + self.b[i] * s_ab[i])
            .collect();
        (total * inv_len, grad)
    }
}

/// Localized normalized cross-correlation, `mean_x cc(x)` with
/// `cc = cross² / (var_a var_b + ε)` over a `window³` box truncated at the
/// borders. Lies in `[0, 1]`.
pub fn local_ncc(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> Result<f64> {
    a.meta().ensure_same(b.meta(), "local_ncc")?;
    Ok(NccReference::new(b.values(), b.meta(), window)?.value(a.values()))
}

/// Channel mean of [`local_ncc`] over the four tissue channels.
pub fn local_ncc_soft(a: &SoftTissueMap, b: &SoftTissueMap, window: usize) -> Result<f64> {
    a.meta().ensure_same(b.meta(), "local_ncc")?;
    let mut total = 0.0;
    for c in 0..N_TISSUES {
        total += NccReference::new(b.channel(c), b.meta(), window)?.value(a.channel(c));
    }
    Ok(total / N_TISSUES as f64)
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` of one label.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u8) -> Result<f64> {
    a.meta().ensure_same(b.meta(), "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Err(Error::UndefinedMetric(format!("label {label} absent from both volumes")));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Counts of non-positive Jacobian voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldingCounts {
    pub negative: usize,
    pub zero: usize,
    pub total: usize,
}

impl FoldingCounts {
    pub fn of(j: &ScalarVolume) -> Self {
        let negative = j.values().iter().filter(|&&v| v < 0.0).count();
        let zero = j.values().iter().filter(|&&v| v == 0.0).count();
        Self {
            negative,
            zero,
            total: j.values().len(),
        }
    }

    /// Ratio of folding points in percent. Only strictly negative voxels count.
    pub fn rfp_percent(&self) -> f64 {
        100.0 * self.negative as f64 / self.total as f64
    }
}

/// Percentage of voxels whose Jacobian determinant is strictly negative.
pub fn rfp(phi: &DisplacementField) -> Result<f64> {
    Ok(FoldingCounts::of(&jacobian_determinant(phi)?).rfp_percent())
}

/// Jacobian summary over one tissue region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionJacobian {
    pub min: f64,
    pub mean: f64,
    pub count: usize,
    /// First voxel (in scan order) attaining `min`.
    pub argmin: usize,
}

/// Per-tissue Jacobian statistics; tissues without voxels are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TissueJacobianStats {
    pub regions: [Option<RegionJacobian>; N_TISSUES],
}

impl TissueJacobianStats {
    pub fn get(&self, tissue: Tissue) -> Option<&RegionJacobian> {
        self.regions[tissue as usize].as_ref()
    }
}

/// Min and mean of `J` over every tissue present in `labels`.
pub fn tissue_jacobian_stats(j: &ScalarVolume, labels: &LabelVolume) -> Result<TissueJacobianStats> {
    j.meta().ensure_same(labels.meta(), "tissue_jacobian_stats")?;
    let mut sums = [0.0; N_TISSUES];
    let mut counts = [0usize; N_TISSUES];
    let mut mins = [f64::INFINITY; N_TISSUES];
    let mut argmins = [0usize; N_TISSUES];
    for (i, (&v, &l)) in j.values().iter().zip(labels.labels()).enumerate() {
        let l = l as usize;
        sums[l] += v;
        counts[l] += 1;
        if v < mins[l] {
            mins[l] = v;
            argmins[l] = i;
        }
    }
    let mut stats = TissueJacobianStats::default();
    for t in 0..N_TISSUES {
        if counts[t] > 0 {
            stats.regions[t] = Some(RegionJacobian {
                min: mins[t],
                mean: sums[t] / counts[t] as f64,
                count: counts[t],
                argmin: argmins[t],
            });
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::DisplacementField;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn textured(meta: GridMeta, phase: f64) -> ScalarVolume {
        ScalarVolume::from_fn(meta, |x, y, z| {
            let (x, y, z) = (x as f64, y as f64, z as f64);
            (0.9 * x + phase).sin() + (1.3 * y).cos() * (0.7 * z + 0.3).sin() + 0.2 * (2.1 * x * y / 7.0).sin()
        })
        .unwrap()
    }

    /// Direct per-voxel loop over each window: the reference for the
    /// box-sum implementation.
    fn brute_ncc(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> f64 {
        let meta = a.meta();
        let r = (window / 2) as isize;
        let mut total = 0.0;
        for idx in 0..meta.len() {
            let c = meta.coords(idx);
            let mut va = Vec::new();
            let mut vb = Vec::new();
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let q = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                        if (0..3).all(|k| q[k] >= 0 && (q[k] as usize) < meta.dims[k]) {
                            let j = meta.index(q[0] as usize, q[1] as usize, q[2] as usize);
                            va.push(a.values()[j]);
                            vb.push(b.values()[j]);
                        }
                    }
                }
            }
            let n = va.len() as f64;
            let ma = va.iter().sum::<f64>() / n;
            let mb = vb.iter().sum::<f64>() / n;
            let cross: f64 = va.iter().zip(&vb).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let sa: f64 = va.iter().map(|x| (x - ma) * (x - ma)).sum();
            let sb: f64 = vb.iter().map(|y| (y - mb) * (y - mb)).sum();
            total += cross * cross / (sa * sb + NCC_EPSILON);
        }
        total / meta.len() as f64
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let meta = GridMeta::new([5, 4, 6], [1.0; 3]).unwrap();
        let values: Vec<f64> = (0..meta.len()).map(|i| ((i * 37) % 11) as f64 - 4.5).collect();
        for r in [1usize, 2] {
            let fast = box_sum(&values, &meta, r);
            for (i, &f) in fast.iter().enumerate() {
                let c = meta.coords(i);
                let mut s = 0.0;
                for j in 0..meta.len() {
                    let q = meta.coords(j);
                    if (0..3).all(|k| q[k].abs_diff(c[k]) <= r) {
                        s += values[j];
                    }
                }
                assert_abs_diff_eq!(f, s, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn box_sum_ncc_matches_brute_force() {
        let meta = GridMeta::new([7, 6, 5], [1.0; 3]).unwrap();
        let a = textured(meta, 0.0);
        let b = textured(meta, 0.8);
        for w in [3, 5] {
            assert_abs_diff_eq!(local_ncc(&a, &b, w).unwrap(), brute_ncc(&a, &b, w), epsilon = 1e-12);
        }
    }

    #[test]
    fn self_correlation_near_one() {
        let meta = GridMeta::cube(12);
        let a = textured(meta, 0.1);
        assert!(local_ncc(&a, &a, 5).unwrap() >= 0.999);
    }

    #[test]
    fn affine_invariance() {
        let meta = GridMeta::cube(10);
        let a = textured(meta, 0.0);
        let b = textured(meta, 1.2);
        let b2 = ScalarVolume::new(meta, b.values().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        let x = local_ncc(&a, &b, 5).unwrap();
        let y = local_ncc(&a, &b2, 5).unwrap();
        // ε breaks exact invariance; variances here are far above it
        assert_abs_diff_eq!(x, y, epsilon = 1e-6);
    }

    #[test]
    fn constant_partner_gives_zero() {
        let meta = GridMeta::cube(8);
        let a = textured(meta, 0.0);
        let b = ScalarVolume::filled(meta, 4.0);
        assert!(local_ncc(&a, &b, 3).unwrap() < 1e-12);
    }

    #[test]
    fn ncc_errors() {
        let a = textured(GridMeta::cube(6), 0.0);
        assert!(matches!(local_ncc(&a, &a, 4), Err(Error::InvalidInput(_))));
        assert!(matches!(local_ncc(&a, &a, 1), Err(Error::InvalidInput(_))));
        let b = textured(GridMeta::cube(5), 0.0);
        assert!(matches!(local_ncc(&a, &b, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn ncc_adjoint_matches_finite_differences() {
        let meta = GridMeta::new([6, 5, 7], [1.0; 3]).unwrap();
        let a = textured(meta, 0.4);
        let b = textured(meta, 1.1);
        let reference = NccReference::new(b.values(), &meta, 3).unwrap();
        let (v, grad) = reference.value_and_adjoint(a.values(), 1.0);
        assert_abs_diff_eq!(v, reference.value(a.values()), epsilon = 1e-14);
        let h = 1e-6;
        for i in (0..meta.len()).step_by(7) {
            let mut p = a.values().to_vec();
            let mut m = a.values().to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (reference.value(&p) - reference.value(&m)) / (2.0 * h);
            assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn dice_values() {
        let meta = GridMeta::new([10, 10, 2], [1.0; 3]).unwrap();
        let a = LabelVolume::from_fn(meta, |x, _, _| if x < 5 { 2 } else { 0 }).unwrap();
        assert_eq!(dice(&a, &a, 2).unwrap(), 1.0);
        let disjoint = LabelVolume::from_fn(meta, |x, _, _| if x >= 5 { 2 } else { 0 }).unwrap();
        assert_eq!(dice(&a, &disjoint, 2).unwrap(), 0.0);
        // |A| = |B| = 100, |A∩B| = 50
        let half = LabelVolume::from_fn(meta, |x, _, z| if (z == 0 && x < 5) || (z == 1 && x >= 5) { 2 } else { 0 })
            .unwrap();
        assert_eq!(dice(&a, &half, 2).unwrap(), 0.5);
        assert!(matches!(dice(&a, &a, 3), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rfp_identity_and_rigid() {
        let meta = GridMeta::cube(16);
        assert_eq!(rfp(&DisplacementField::zeros(meta)).unwrap(), 0.0);
        // rotation about the volume center plus a translation
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let rigid = DisplacementField::from_fn(meta, |x, y, z| {
            let (px, py) = (x as f64 - 7.5, y as f64 - 7.5);
            [c * px - s * py - px + 1.2, s * px + c * py - py - 0.4, 0.7 + 0.0 * z as f64]
        })
        .unwrap();
        assert_eq!(rfp(&rigid).unwrap(), 0.0);
    }

    #[test]
    fn rfp_counts_single_fold_on_64_cube() {
        // A localized inversion: u_x = -2.2 (x - 32) inside a 1-voxel neighbourhood
        // of the center makes J negative only at the center voxel.
        let meta = GridMeta::cube(64);
        let phi = DisplacementField::from_fn(meta, |x, y, z| {
            if (x, y, z) == (33, 32, 32) {
                [-2.2, 0.0, 0.0]
            } else {
                [0.0; 3]
            }
        })
        .unwrap();
        let j = jacobian_determinant(&phi).unwrap();
        // brute-force count of negative determinants
        let negatives = j.values().iter().filter(|&&v| v < 0.0).count();
        assert_eq!(negatives, 1);
        assert_abs_diff_eq!(rfp(&phi).unwrap(), 100.0 / 262144.0, epsilon = 1e-15);
        assert_abs_diff_eq!(100.0 / 262144.0, 3.814697265625e-4, epsilon = 1e-15);
    }

    #[test]
    fn tissue_stats_identity_and_scaling() {
        let meta = GridMeta::cube(9);
        let labels = LabelVolume::from_fn(meta, |x, y, _| ((x / 3 + y / 5) % 4) as u8).unwrap();
        let j = ScalarVolume::filled(meta, 1.0);
        let stats = tissue_jacobian_stats(&j, &labels).unwrap();
        for t in Tissue::ALL {
            let r = stats.get(t).unwrap();
            assert_eq!((r.min, r.mean), (1.0, 1.0));
        }
        let s = 1.1;
        let phi = DisplacementField::from_fn(meta, |x, y, z| [(s - 1.0) * x as f64, (s - 1.0) * y as f64, (s - 1.0) * z as f64])
            .unwrap();
        let jv = jacobian_determinant(&phi).unwrap();
        let stats = tissue_jacobian_stats(&jv, &labels).unwrap();
        for t in Tissue::ALL {
            let r = stats.get(t).unwrap();
            assert_abs_diff_eq!(r.min, 1.331, epsilon = 1e-12);
            assert_abs_diff_eq!(r.mean, 1.331, epsilon = 1e-12);
        }
        let only_bg = LabelVolume::from_fn(meta, |_, _, _| 0).unwrap();
        let stats = tissue_jacobian_stats(&j, &only_bg).unwrap();
        assert!(stats.get(Tissue::Gm).is_none());
        assert!(tissue_jacobian_stats(&j, &LabelVolume::from_fn(GridMeta::cube(4), |_, _, _| 0).unwrap()).is_err());
    }

    #[test]
    fn tissue_stats_match_exhaustive_scan() {
        let spec = crate::phantom::PhantomSpec { size: 32, seed: 9, amplitude: 3.0, sigma: 4.0 };
        let phi = crate::transform::integrate_svf(&crate::phantom::make_synthetic_svf(&spec).unwrap(), 7);
        let j = jacobian_determinant(&phi).unwrap();
        let labels = crate::phantom::make_phantom_labels(&spec).unwrap();
        let stats = tissue_jacobian_stats(&j, &labels).unwrap();
        for t in Tissue::ALL {
            let vals: Vec<f64> = j
                .values()
                .iter()
                .zip(labels.labels())
                .filter(|(_, &l)| l == t.label())
                .map(|(&v, _)| v)
                .collect();
            let r = stats.get(t).unwrap();
            assert_eq!(r.count, vals.len());
            assert_eq!(r.min, vals.iter().cloned().fold(f64::INFINITY, f64::min));
            assert_abs_diff_eq!(r.mean, vals.iter().sum::<f64>() / vals.len() as f64, epsilon = 1e-12);
            assert!(r.min <= r.mean);
        }
    }

    proptest! {
        #[test]
        fn dice_symmetric(a in proptest::collection::vec(0u8..4, 64), b in proptest::collection::vec(0u8..4, 64), l in 0u8..4) {
            let meta = GridMeta::cube(4);
            let a = LabelVolume::new(meta, a).unwrap();
            let b = LabelVolume::new(meta, b).unwrap();
            match (dice(&a, &b, l), dice(&b, &a, l)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
            if a.count(l) > 0 {
                prop_assert_eq!(dice(&a, &a, l).unwrap(), 1.0);
            }
        }

        #[test]
        fn ncc_symmetric_and_bounded(pa in 0.0f64..3.0, pb in 0.0f64..3.0, w in prop_oneof![Just(3usize), Just(5usize)]) {
            let meta = GridMeta::cube(6);
            let a = textured(meta, pa);
            let b = textured(meta, pb);
            let x = local_ncc(&a, &b, w).unwrap();
            let y = local_ncc(&b, &a, w).unwrap();
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn rfp_translation_invariant(seed in 0u64..50, tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0) {
            let spec = crate::phantom::PhantomSpec { size: 32, seed, amplitude: 6.0, sigma: 2.0 };
            let phi = crate::transform::integrate_svf(&crate::phantom::make_synthetic_svf(&spec).unwrap(), 3);
            let shifted = DisplacementField::new(
                *phi.meta(),
                phi.data().iter().map(|u| [u[0] + tx, u[1] + ty, u[2] + tz]).collect(),
            ).unwrap();
            prop_assert_eq!(rfp(&phi).unwrap(), rfp(&shifted).unwrap());
        }
    }
}

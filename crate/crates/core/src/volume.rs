//! Grid containers and the sampling/encoding primitives shared by the rest
//! of the crate.
//!
//! Every sampler clamps coordinates to `[0, n - 1]` per axis before
//! interpolating (replicate-edge boundary).

use crate::error::{Error, Result};

/// Voxel counts and voxel size of a 3D grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMeta {
    pub dims: [usize; 3],
    /// Millimeters per voxel along each axis.
    pub spacing: [f64; 3],
}

impl GridMeta {
    /// Grids must have at least one voxel per axis. Anything that takes
    /// finite differences (Jacobians) checks its own stricter minimum.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidInput(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "grid spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing cube of side `n`.
    pub fn cube(n: usize) -> Self {
        Self::new([n, n, n], [1.0; 3]).expect("cube side must be positive")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Grids are compatible when their voxel counts match; spacing must
    /// agree to within float noise.
    pub fn same_grid(&self, other: &GridMeta) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()))
    }

    pub(crate) fn ensure_same(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: grid {:?}/{:?} does not match {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// True when voxel `c` is at least `margin` voxels away from every face.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3], margin: usize) -> bool {
        (0..3).all(|a| c[a] >= margin && c[a] + margin < self.dims[a])
    }
}

/// Tissue classes of a segmentation map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [Tissue::Background, Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Tissue> {
        Tissue::ALL.get(label as usize).copied()
    }
}

/// Number of tissue labels / soft-map channels.
pub const N_TISSUES: usize = 4;

/// One real value per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    meta: GridMeta,
    values: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(meta: GridMeta, values: Vec<f64>) -> Result<Self> {
        if values.len() != meta.len() {
            return Err(Error::Shape(format!(
                "scalar volume has {} values for grid {:?}",
                values.len(),
                meta.dims
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { meta, values })
    }

    pub fn filled(meta: GridMeta, value: f64) -> Self {
        Self {
            meta,
            values: vec![value; meta.len()],
        }
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(meta.len());
        for z in 0..meta.dims[2] {
            for y in 0..meta.dims[1] {
                for x in 0..meta.dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(meta, values)
    }

    /// Skips validation; callers guarantee length and finiteness.
    pub(crate) fn from_raw(meta: GridMeta, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), meta.len());
        Self { meta, values }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.meta.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Tissue segmentation map with labels in `{0 = BG, 1 = CSF, 2 = GM, 3 = WM}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    meta: GridMeta,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(meta: GridMeta, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != meta.len() {
            return Err(Error::Shape(format!(
                "label volume has {} labels for grid {:?}",
                labels.len(),
                meta.dims
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= N_TISSUES) {
            return Err(Error::LabelOutOfRange {
                value: labels[i] as f64,
                index: i,
            });
        }
        Ok(Self { meta, labels })
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut labels = Vec::with_capacity(meta.len());
        for z in 0..meta.dims[2] {
            for y in 0..meta.dims[1] {
                for x in 0..meta.dims[0] {
                    labels.push(f(x, y, z));
                }
            }
        }
        Self::new(meta, labels)
    }

    pub(crate) fn from_raw(meta: GridMeta, labels: Vec<u8>) -> Self {
        debug_assert_eq!(labels.len(), meta.len());
        Self { meta, labels }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.meta.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Labels that occur at least once, ascending.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; N_TISSUES];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..N_TISSUES as u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-voxel tissue probabilities, one channel per label.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTissueMap {
    meta: GridMeta,
    channels: [Vec<f64>; N_TISSUES],
}

/// Allowed deviation of the per-voxel channel sum from 1.
pub const SOFT_SUM_TOLERANCE: f64 = 1e-4;

impl SoftTissueMap {
    pub fn new(meta: GridMeta, channels: [Vec<f64>; N_TISSUES]) -> Result<Self> {
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != meta.len() {
                return Err(Error::Shape(format!(
                    "soft channel {c} has {} values for grid {:?}",
                    ch.len(),
                    meta.dims
                )));
            }
            if let Some(i) = ch.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "soft channel {c} value {} at voxel {i} outside [0, 1]",
                    ch[i]
                )));
            }
        }
        for i in 0..meta.len() {
            let s: f64 = channels.iter().map(|ch| ch[i]).sum();
            if (s - 1.0).abs() > SOFT_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!("soft channels sum to {s} at voxel {i}")));
            }
        }
        Ok(Self { meta, channels })
    }

    pub(crate) fn from_raw(meta: GridMeta, channels: [Vec<f64>; N_TISSUES]) -> Self {
        Self { meta, channels }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f64>; N_TISSUES] {
        &self.channels
    }

    pub fn channel_volume(&self, c: usize) -> ScalarVolume {
        ScalarVolume::from_raw(self.meta, self.channels[c].clone())
    }

    /// Hard labels by per-voxel argmax; ties go to the lower label.
    pub fn argmax_labels(&self) -> LabelVolume {
        let labels = (0..self.meta.len())
            .map(|i| {
                let mut best = 0;
                for c in 1..N_TISSUES {
                    if self.channels[c][i] > self.channels[best][i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::from_raw(self.meta, labels)
    }
}

/// Per-axis interpolation cell after border clamping.
#[derive(Clone, Copy, Debug)]
struct AxisCell {
    i0: usize,
    i1: usize,
    t: f64,
    /// 1 when the coordinate lies inside `[0, n - 1]`, 0 when clamped.
    live: f64,
}

#[inline]
fn axis_cell(p: f64, n: usize) -> AxisCell {
    if n == 1 {
        return AxisCell {
            i0: 0,
            i1: 0,
            t: 0.0,
            live: 0.0,
        };
    }
    let max = (n - 1) as f64;
    if p < 0.0 {
        AxisCell {
            i0: 0,
            i1: 1,
            t: 0.0,
            live: 0.0,
        }
    } else if p > max {
        AxisCell {
            i0: n - 2,
            i1: n - 1,
            t: 1.0,
            live: 0.0,
        }
    } else {
        let i0 = (p.floor() as usize).min(n - 2);
        AxisCell {
            i0,
            i1: i0 + 1,
            t: p - i0 as f64,
            live: 1.0,
        }
    }
}

/// The eight voxels and weights of a trilinear interpolation at a point.
///
/// Corner `k` uses the upper neighbor along axis `a` when bit `a` of `k`
/// is set.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    cells: [AxisCell; 3],
}

impl Stencil {
    #[inline]
    pub fn new(meta: &GridMeta, p: [f64; 3]) -> Self {
        let [nx, ny, nz] = meta.dims;
        let cx = axis_cell(p[0], nx);
        let cy = axis_cell(p[1], ny);
        let cz = axis_cell(p[2], nz);
        let xs = [cx.i0, cx.i1];
        let ys = [cy.i0, cy.i1];
        let zs = [cz.i0, cz.i1];
        let wx = [1.0 - cx.t, cx.t];
        let wy = [1.0 - cy.t, cy.t];
        let wz = [1.0 - cz.t, cz.t];
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for k in 0..8 {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = xs[bx] + nx * (ys[by] + ny * zs[bz]);
            w[k] = wx[bx] * wy[by] * wz[bz];
        }
        Self {
            idx,
            w,
            cells: [cx, cy, cz],
        }
    }

    #[inline]
    pub fn sample(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..8 {
            s += self.w[k] * values[self.idx[k]];
        }
        s
    }

    #[inline]
    pub fn sample3(&self, values: &[[f64; 3]]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for k in 0..8 {
            let v = values[self.idx[k]];
            let w = self.w[k];
            s[0] += w * v[0];
            s[1] += w * v[1];
            s[2] += w * v[2];
        }
        s
    }

    /// `out[c][d] = ∂ values_c / ∂ p_d` for a 3-component field.
    #[inline]
    pub fn gradient3(&self, values: &[[f64; 3]]) -> [[f64; 3]; 3] {
        let c = &self.cells;
        let v: [[f64; 3]; 8] = std::array::from_fn(|k| values[self.idx[k]]);
        let (tx, ty, tz) = (c[0].t, c[1].t, c[2].t);
        let mut out = [[0.0; 3]; 3];
        for comp in 0..3 {
            let f = |k: usize| v[k][comp];
            // differences along x on the four y/z edges, then blend
            let dx = [f(1) - f(0), f(3) - f(2), f(5) - f(4), f(7) - f(6)];
            let dy = [f(2) - f(0), f(3) - f(1), f(6) - f(4), f(7) - f(5)];
            let dz = [f(4) - f(0), f(5) - f(1), f(6) - f(2), f(7) - f(3)];
            let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
            out[comp][0] = c[0].live * lerp(lerp(dx[0], dx[1], ty), lerp(dx[2], dx[3], ty), tz);
            out[comp][1] = c[1].live * lerp(lerp(dy[0], dy[1], tx), lerp(dy[2], dy[3], tx), tz);
            out[comp][2] = c[2].live * lerp(lerp(dz[0], dz[1], tx), lerp(dz[2], dz[3], tx), ty);
        }
        out
    }

    /// Derivative of the interpolant with respect to the sample point.
    /// Zero along clamped axes.
    #[inline]
    pub fn gradient(&self, values: &[f64]) -> [f64; 3] {
        let c = &self.cells;
        let f: [f64; 8] = std::array::from_fn(|k| values[self.idx[k]]);
        let (tx, ty, tz) = (c[0].t, c[1].t, c[2].t);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let dx = lerp(lerp(f[1] - f[0], f[3] - f[2], ty), lerp(f[5] - f[4], f[7] - f[6], ty), tz);
        let dy = lerp(lerp(f[2] - f[0], f[3] - f[1], tx), lerp(f[6] - f[4], f[7] - f[5], tx), tz);
        let dz = lerp(lerp(f[4] - f[0], f[5] - f[1], tx), lerp(f[6] - f[2], f[7] - f[3], tx), ty);
        [dx * c[0].live, dy * c[1].live, dz * c[2].live]
    }
}

fn check_point(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite sample point {p:?}")))
    }
}

/// Trilinear interpolation at a continuous voxel coordinate, with border clamp.
pub fn sample_trilinear(vol: &ScalarVolume, p: [f64; 3]) -> Result<f64> {
    check_point(p)?;
    Ok(Stencil::new(&vol.meta, p).sample(&vol.values))
}

#[inline]
pub(crate) fn nearest_index(meta: &GridMeta, p: [f64; 3]) -> usize {
    let mut c = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        let max = (meta.dims[a] - 1) as f64;
        c[a] = r.clamp(0.0, max) as usize;
    }
    meta.index(c[0], c[1], c[2])
}

/// Label of the nearest voxel (round half up per axis, border clamp).
pub fn sample_nearest(labels: &LabelVolume, p: [f64; 3]) -> Result<u8> {
    check_point(p)?;
    Ok(labels.labels[nearest_index(&labels.meta, p)])
}

/// Normalized 1D Gaussian taps for `sigma` voxels, truncated at `3 sigma`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing. Taps falling outside the grid are dropped
/// and the remaining weights renormalized, so constants are preserved.
pub fn gaussian_smooth(values: &[f64], meta: &GridMeta, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let mut cur = values.to_vec();
    let mut out = vec![0.0; values.len()];
    let dims = meta.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        for idx in 0..cur.len() {
            let c = meta.coords(idx);
            let i = c[axis];
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in lo..=hi {
                let w = kernel[j + radius - i];
                let jdx = idx - i * stride + j * stride;
                acc += w * cur[jdx];
                wsum += w;
            }
            out[idx] = acc / wsum;
        }
        std::mem::swap(&mut cur, &mut out);
    }
    cur
}

/// Soft one-hot encoding: each label's indicator is Gaussian-blurred
/// (`sigma` voxels) and the channels renormalized to sum to one per voxel.
/// `sigma = 0` gives the hard one-hot encoding.
pub fn one_hot_soft(labels: &LabelVolume, sigma: f64) -> Result<SoftTissueMap> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("soft-encoding sigma must be >= 0, got {sigma}")));
    }
    let meta = labels.meta;
    let mut channels: [Vec<f64>; N_TISSUES] = Default::default();
    for (c, ch) in channels.iter_mut().enumerate() {
        let indicator: Vec<f64> = labels
            .labels
            .iter()
            .map(|&l| if l as usize == c { 1.0 } else { 0.0 })
            .collect();
        *ch = gaussian_smooth(&indicator, &meta, sigma);
    }
    for i in 0..meta.len() {
        let s: f64 = channels.iter().map(|ch| ch[i]).sum();
        for ch in channels.iter_mut() {
            ch[i] = (ch[i] / s).clamp(0.0, 1.0);
        }
    }
    Ok(SoftTissueMap::from_raw(meta, channels))
}

pub(crate) fn downsampled_meta(meta: &GridMeta, factor: usize) -> GridMeta {
    GridMeta {
        dims: meta.dims.map(|n| n.div_ceil(factor)),
        spacing: meta.spacing.map(|s| s * factor as f64),
    }
}

pub(crate) fn block_average(values: &[f64], meta: &GridMeta, factor: usize) -> (GridMeta, Vec<f64>) {
    if factor == 1 {
        return (*meta, values.to_vec());
    }
    let out_meta = downsampled_meta(meta, factor);
    let mut sums = vec![0.0; out_meta.len()];
    let mut counts = vec![0usize; out_meta.len()];
    for (idx, &v) in values.iter().enumerate() {
        let c = meta.coords(idx);
        let o = out_meta.index(c[0] / factor, c[1] / factor, c[2] / factor);
        sums[o] += v;
        counts[o] += 1;
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        *s /= n as f64;
    }
    (out_meta, sums)
}

/// Block-average downsampling by an integer factor (partial edge blocks
/// average the voxels they contain). Spacing grows by the same factor.
pub fn resample_level(vol: &ScalarVolume, factor: usize) -> Result<ScalarVolume> {
    if factor < 1 {
        return Err(Error::InvalidInput("resampling factor must be >= 1".into()));
    }
    let (meta, values) = block_average(&vol.values, &vol.meta, factor);
    Ok(ScalarVolume::from_raw(meta, values))
}

/// Block-average every channel of a soft map.
pub fn resample_soft(map: &SoftTissueMap, factor: usize) -> Result<SoftTissueMap> {
    if factor < 1 {
        return Err(Error::InvalidInput("resampling factor must be >= 1".into()));
    }
    let mut meta = map.meta;
    let mut channels: [Vec<f64>; N_TISSUES] = Default::default();
    for (c, ch) in channels.iter_mut().enumerate() {
        let (m, v) = block_average(&map.channels[c], &map.meta, factor);
        meta = m;
        *ch = v;
    }
    Ok(SoftTissueMap::from_raw(meta, channels))
}

/// Majority-vote downsampling of labels; ties go to the lower label.
pub fn resample_labels(labels: &LabelVolume, factor: usize) -> Result<LabelVolume> {
    if factor < 1 {
        return Err(Error::InvalidInput("resampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(labels.clone());
    }
    let out_meta = downsampled_meta(&labels.meta, factor);
    let mut votes = vec![[0u32; N_TISSUES]; out_meta.len()];
    for (idx, &l) in labels.labels.iter().enumerate() {
        let c = labels.meta.coords(idx);
        votes[out_meta.index(c[0] / factor, c[1] / factor, c[2] / factor)][l as usize] += 1;
    }
    let out = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..N_TISSUES {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelVolume::from_raw(out_meta, out))
}

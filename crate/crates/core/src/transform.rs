//! Deformation algebra: warping, composition, velocity integration and the
//! Jacobian determinant.
//!
//! Composition convention: `compose(a, b)(x) = a(b(x))`. Warping an image by
//! `compose(a, b)` is the same as warping it by `a` and then warping the
//! result by `b`. Many toolkits use the opposite order; this one does not.

use std::marker::PhantomData;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{nearest_index, GridMeta, LabelVolume, ScalarVolume, Stencil, N_TISSUES};

/// Default number of squaring steps (`2^7` effective Euler substeps).
pub const DEFAULT_SQUARING_STEPS: u32 = 7;

/// Marker for displacement fields `u` with `φ(x) = x + u(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Displacement {}

/// Marker for stationary velocity fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Velocity {}

/// Three components per voxel, in voxel units of the grid.
#[derive(Debug, PartialEq)]
pub struct Field<K> {
    meta: GridMeta,
    data: Vec<[f64; 3]>,
    _kind: PhantomData<K>,
}

impl<K> Clone for Field<K> {
    fn clone(&self) -> Self {
        Self {
            meta: self.meta,
            data: self.data.clone(),
            _kind: PhantomData,
        }
    }
}

pub type DisplacementField = Field<Displacement>;
pub type VelocityField = Field<Velocity>;

impl<K> Field<K> {
    pub fn zeros(meta: GridMeta) -> Self {
        Self::from_raw(meta, vec![[0.0; 3]; meta.len()])
    }

    pub fn new(meta: GridMeta, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != meta.len() {
            return Err(Error::Shape(format!(
                "field has {} vectors for grid {:?}",
                data.len(),
                meta.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite field vector at voxel {i}")));
        }
        Ok(Self::from_raw(meta, data))
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(meta.len());
        for z in 0..meta.dims[2] {
            for y in 0..meta.dims[1] {
                for x in 0..meta.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(meta, data)
    }

    pub fn constant(meta: GridMeta, t: [f64; 3]) -> Self {
        Self::from_raw(meta, vec![t; meta.len()])
    }

    pub(crate) fn from_raw(meta: GridMeta, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), meta.len());
        Self {
            meta,
            data,
            _kind: PhantomData,
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.meta.index(x, y, z)]
    }

    /// Reinterpret the vectors under another field kind.
    pub fn cast<L>(self) -> Field<L> {
        Field {
            meta: self.meta,
            data: self.data,
            _kind: PhantomData,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_raw(self.meta, self.data.iter().map(|v| v.map(|c| c * s)).collect())
    }

    pub fn norms(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| norm(*v))
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        self.norms().sum::<f64>() / self.data.len() as f64
    }

    /// Largest vector norm over voxels at least `margin` voxels from every face.
    pub fn max_norm_interior(&self, margin: usize) -> f64 {
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| self.meta.is_interior(self.meta.coords(*i), margin))
            .map(|(_, v)| norm(*v))
            .fold(0.0, f64::max)
    }

    /// Largest pointwise distance to another field over the interior.
    pub fn max_diff_interior(&self, other: &Field<K>, margin: usize) -> Result<f64> {
        self.meta.ensure_same(&other.meta, "field difference")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .enumerate()
            .filter(|(i, _)| self.meta.is_interior(self.meta.coords(*i), margin))
            .map(|(_, (a, b))| norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
            .fold(0.0, f64::max))
    }
}

#[inline]
pub(crate) fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}


/// `f(index, x + u(x))` for every voxel, in index order.
pub(crate) fn map_points<T, F>(meta: &GridMeta, u: &[[f64; 3]], f: F) -> Vec<T>
where
    T: Copy + Default + Send,
    F: Fn(usize, [f64; 3]) -> T + Sync,
{
    let [nx, ny, _] = meta.dims;
    let mut out = vec![T::default(); u.len()];
    out.par_chunks_mut(nx)
        .zip(u.par_chunks(nx))
        .enumerate()
        .for_each(|(row, (dst, us))| {
            let (y, z) = ((row % ny) as f64, (row / ny) as f64);
            for (x, (o, d)) in dst.iter_mut().zip(us).enumerate() {
                *o = f(row * nx + x, [x as f64 + d[0], y + d[1], z + d[2]]);
            }
        });
    out
}

/// `out(x) = vol(x + u(x))` with trilinear interpolation.
pub fn warp_scalar(vol: &ScalarVolume, phi: &DisplacementField) -> Result<ScalarVolume> {
    vol.meta().ensure_same(&phi.meta, "warp_scalar")?;
    Ok(ScalarVolume::from_raw(*vol.meta(), warp_values(vol.values(), phi)))
}

/// `out(x) = vol(x + u(x))` with nearest-neighbor lookup.
pub fn warp_scalar_nearest(vol: &ScalarVolume, phi: &DisplacementField) -> Result<ScalarVolume> {
    vol.meta().ensure_same(&phi.meta, "warp_scalar_nearest")?;
    let meta = phi.meta;
    let src = vol.values();
    let out = map_points(&meta, &phi.data, |_, p| src[nearest_index(&meta, p)]);
    Ok(ScalarVolume::from_raw(meta, out))
}

pub(crate) fn warp_values(values: &[f64], phi: &DisplacementField) -> Vec<f64> {
    let meta = phi.meta;
    map_points(&meta, &phi.data, |_, p| Stencil::new(&meta, p).sample(values))
}

/// Warp several channels sharing one field, building each stencil once.
pub(crate) fn warp_channels(channels: [&[f64]; N_TISSUES], phi: &DisplacementField) -> [Vec<f64>; N_TISSUES] {
    let meta = phi.meta;
    let samples = map_points(&meta, &phi.data, |_, p| {
        let st = Stencil::new(&meta, p);
        channels.map(|c| st.sample(c))
    });
    std::array::from_fn(|c| samples.iter().map(|s| s[c]).collect())
}

/// `out(x) = labels(x + u(x))` with nearest-neighbor lookup.
pub fn warp_labels(labels: &LabelVolume, phi: &DisplacementField) -> Result<LabelVolume> {
    labels.meta().ensure_same(&phi.meta, "warp_labels")?;
    let meta = phi.meta;
    let src = labels.labels();
    let out = map_points(&meta, &phi.data, |_, p| src[nearest_index(&meta, p)]);
    Ok(LabelVolume::from_raw(meta, out))
}

/// `compose(a, b)(x) = a(b(x))`, i.e. `u(x) = u_a(x + u_b(x)) + u_b(x)`.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    a.meta.ensure_same(&b.meta, "compose")?;
    Ok(compose_unchecked(a, b))
}

pub(crate) fn compose_unchecked(a: &DisplacementField, b: &DisplacementField) -> DisplacementField {
    let meta = a.meta;
    let data = map_points(&meta, &b.data, |i, p| {
        let ua = Stencil::new(&meta, p).sample3(&a.data);
        let ub = b.data[i];
        [ua[0] + ub[0], ua[1] + ub[1], ua[2] + ub[2]]
    });
    DisplacementField::from_raw(meta, data)
}

/// Scaling and squaring: `u ← v / 2^steps`, then `u ← compose(u, u)` `steps` times.
pub fn integrate_svf(v: &VelocityField, steps: u32) -> DisplacementField {
    integrate_svf_chain(v, steps).pop().expect("chain is never empty")
}

/// All intermediate fields `u_0 .. u_steps` of the squaring chain.
pub(crate) fn integrate_svf_chain(v: &VelocityField, steps: u32) -> Vec<DisplacementField> {
    let scale = 0.5f64.powi(steps as i32);
    let mut chain = Vec::with_capacity(steps as usize + 1);
    chain.push(v.scaled(scale).cast::<Displacement>());
    for _ in 0..steps {
        let last = chain.last().unwrap();
        let next = compose_unchecked(last, last);
        chain.push(next);
    }
    chain
}

/// Explicit Euler flow of the velocity field with `n_steps` substeps.
/// Reference integrator; slow but independent of composition.
pub fn integrate_svf_euler(v: &VelocityField, n_steps: usize) -> Result<DisplacementField> {
    if n_steps < 1 {
        return Err(Error::InvalidInput("Euler integration needs at least one step".into()));
    }
    let meta = v.meta;
    let dt = 1.0 / n_steps as f64;
    let data = (0..meta.len())
        .into_par_iter()
        .map(|i| {
            let c = meta.coords(i);
            let start = [c[0] as f64, c[1] as f64, c[2] as f64];
            let mut p = start;
            for _ in 0..n_steps {
                let vel = Stencil::new(&meta, p).sample3(&v.data);
                for a in 0..3 {
                    p[a] += dt * vel[a];
                }
            }
            [p[0] - start[0], p[1] - start[1], p[2] - start[2]]
        })
        .collect();
    Ok(DisplacementField::from_raw(meta, data))
}

/// Minimum grid size per axis for Jacobian finite differences.
pub const MIN_JACOBIAN_DIM: usize = 3;

pub(crate) fn check_jacobian_dims(meta: &GridMeta) -> Result<()> {
    if meta.dims.iter().any(|&n| n < MIN_JACOBIAN_DIM) {
        Err(Error::Shape(format!(
            "Jacobian needs at least {MIN_JACOBIAN_DIM} voxels per axis, got {:?}",
            meta.dims
        )))
    } else {
        Ok(())
    }
}

/// Finite-difference stencil along one axis: `(lower, upper, scale)` with
/// derivative `scale * (f[upper] - f[lower])`. Central in the interior,
/// one-sided on the faces.
#[inline]
pub(crate) fn diff_stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// `∂φ/∂x` at voxel `idx` in physical units: `M[c][d] = δ_cd + (s_c / s_d) ∂u_c/∂x_d`.
#[inline]
pub(crate) fn deformation_gradient(meta: &GridMeta, data: &[[f64; 3]], idx: usize) -> [[f64; 3]; 3] {
    let c = meta.coords(idx);
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];
    let mut m = [[0.0; 3]; 3];
    for d in 0..3 {
        let (lo, hi, s) = diff_stencil(c[d], meta.dims[d]);
        let base = idx - c[d] * strides[d];
        let ulo = data[base + lo * strides[d]];
        let uhi = data[base + hi * strides[d]];
        for comp in 0..3 {
            let ratio = meta.spacing[comp] / meta.spacing[d];
            m[comp][d] = s * (uhi[comp] - ulo[comp]) * ratio;
        }
    }
    for (k, row) in m.iter_mut().enumerate() {
        row[k] += 1.0;
    }
    m
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, i.e. `∂det/∂m[i][j]`.
#[inline]
pub(crate) fn cofactor3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

/// `J(x) = det(I + ∇u(x))`.
pub fn jacobian_determinant(phi: &DisplacementField) -> Result<ScalarVolume> {
    check_jacobian_dims(&phi.meta)?;
    let meta = phi.meta;
    let values = (0..meta.len())
        .into_par_iter()
        .map(|i| det3(&deformation_gradient(&meta, &phi.data, i)))
        .collect();
    Ok(ScalarVolume::from_raw(meta, values))
}

/// Adds `∂/∂u` of `Σ_x jbar(x) J(x)` into `ubar`.
pub(crate) fn jacobian_adjoint(phi: &DisplacementField, jbar: &[(usize, f64)], ubar: &mut [[f64; 3]]) {
    let meta = phi.meta;
    let strides = [1, meta.dims[0], meta.dims[0] * meta.dims[1]];
    for &(idx, g) in jbar {
        if g == 0.0 {
            continue;
        }
        let m = deformation_gradient(&meta, &phi.data, idx);
        let cof = cofactor3(&m);
        let c = meta.coords(idx);
        for d in 0..3 {
            let (lo, hi, s) = diff_stencil(c[d], meta.dims[d]);
            let base = idx - c[d] * strides[d];
            for comp in 0..3 {
                let ratio = meta.spacing[comp] / meta.spacing[d];
                let w = g * cof[comp][d] * s * ratio;
                ubar[base + hi * strides[d]][comp] += w;
                ubar[base + lo * strides[d]][comp] -= w;
            }
        }
    }
}

/// Adjoint of `out = compose(a, b)` for `a = b = u` (one squaring step):
/// returns `∂L/∂u` given `∂L/∂out`.
pub(crate) fn squaring_adjoint(u: &DisplacementField, out_bar: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let meta = u.meta;
    let [nx, ny, nz] = meta.dims;
    let mut ubar = out_bar.to_vec();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let g = out_bar[i];
                if g != [0.0; 3] {
                    let ub = u.data[i];
                    let st = Stencil::new(&meta, [x as f64 + ub[0], y as f64 + ub[1], z as f64 + ub[2]]);
                    // through the sampling coordinate
                    let da = st.gradient3(&u.data);
                    let t = &mut ubar[i];
                    for d in 0..3 {
                        t[d] += g[0] * da[0][d] + g[1] * da[1][d] + g[2] * da[2][d];
                    }
                    // through the sampled values
                    for k in 0..8 {
                        let w = st.w[k];
                        let t = &mut ubar[st.idx[k]];
                        t[0] += w * g[0];
                        t[1] += w * g[1];
                        t[2] += w * g[2];
                    }
                }
                i += 1;
            }
        }
    }
    ubar
}

//! Synthetic tissue phantoms and ground-truth deformations.
//!
//! Everything here is a pure function of the [`PhantomSpec`]. Randomness
//! comes from [`GENERATOR`] seeded with `spec.seed`; labels use stream 0 and
//! the velocity field stream 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{integrate_svf, warp_labels, DisplacementField, VelocityField, DEFAULT_SQUARING_STEPS};
use crate::volume::{gaussian_smooth, GridMeta, LabelVolume, Tissue};

/// Identity of the pseudo-random generator, recorded in phantom manifests.
pub const GENERATOR: &str = "rand_chacha::ChaCha8Rng::seed_from_u64(seed); stream 0 = labels, stream 1 = velocity";

const LABEL_STREAM: u64 = 0;
const VELOCITY_STREAM: u64 = 1;

/// Voxels next to each face where the synthetic velocity is exactly zero.
pub const ZERO_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Voxels per axis.
    pub size: usize,
    pub seed: u64,
    /// Largest velocity norm, in voxels.
    pub amplitude: f64,
    /// Smoothing of the velocity noise, in voxels.
    pub sigma: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::InvalidInput(format!("phantom size must be >= 32, got {}", self.size)));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::InvalidInput(format!("phantom amplitude must be >= 0, got {}", self.amplitude)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("phantom sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta::cube(self.size)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Smooth random function on the unit sphere: a sum of a few plane waves.
struct SphereNoise {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SphereNoise {
    fn new(rng: &mut ChaCha8Rng, n: usize, amplitude: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let mut dir = [0.0f64; 3];
                for d in dir.iter_mut() {
                    *d = rng.sample(StandardNormal);
                }
                let len = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
                let freq = rng.gen_range(1.0..3.0);
                let omega = dir.map(|c| c / len * freq);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = amplitude * rng.gen_range(0.5..1.0) / (n as f64).sqrt();
                (omega, phase, amp)
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, dir: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(w, phase, amp)| amp * (w[0] * dir[0] + w[1] * dir[1] + w[2] * dir[2] + phase).sin())
            .sum()
    }
}

/// Concentric perturbed ellipsoids: WM core, GM shell (2–4 voxels), CSF
/// rim, background outside.
pub fn make_phantom_labels(spec: &PhantomSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let mut rng = spec.rng(LABEL_STREAM);
    let n = spec.size as f64;
    let center: [f64; 3] = std::array::from_fn(|_| (n - 1.0) / 2.0 + rng.gen_range(-1.0..1.0));
    let outer = 0.40 * n;
    let ratios = [1.0, rng.gen_range(0.86..0.94), rng.gen_range(0.85..0.9)];
    let surface = SphereNoise::new(&mut rng, 8, 0.08 * outer);
    let gm_thickness = SphereNoise::new(&mut rng, 6, 0.4);
    let csf_thickness = 2.0;
    LabelVolume::from_fn(spec.meta(), |x, y, z| {
        let rel = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
        let scaled: [f64; 3] = std::array::from_fn(|a| rel[a] / ratios[a]);
        let r = scaled.iter().map(|c| c * c).sum::<f64>().sqrt();
        let dir = if r > 1e-9 { scaled.map(|c| c / r) } else { [1.0, 0.0, 0.0] };
        let r_out = outer + surface.eval(dir);
        let r_gm = r_out - csf_thickness;
        let r_wm = r_gm - (3.0 + gm_thickness.eval(dir));
        let t = if r < r_wm {
            Tissue::Wm
        } else if r < r_gm {
            Tissue::Gm
        } else if r < r_out {
            Tissue::Csf
        } else {
            Tissue::Background
        };
        t.label()
    })
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smoothed white-noise velocity rescaled to `max |v| = amplitude`, zero
/// within [`ZERO_MARGIN`] voxels of the faces and tapered smoothly inward.
pub fn make_synthetic_svf(spec: &PhantomSpec) -> Result<VelocityField> {
    spec.validate()?;
    let meta = spec.meta();
    if spec.amplitude == 0.0 {
        return Ok(VelocityField::zeros(meta));
    }
    let mut rng = spec.rng(VELOCITY_STREAM);
    let mut comps: [Vec<f64>; 3] = Default::default();
    for comp in comps.iter_mut() {
        let noise: Vec<f64> = (0..meta.len()).map(|_| rng.sample(StandardNormal)).collect();
        *comp = gaussian_smooth(&noise, &meta, spec.sigma);
    }
    let ramp = spec.sigma.max(4.0);
    let taper = |i: usize, n: usize| {
        let d = i.min(n - 1 - i);
        if d < ZERO_MARGIN {
            0.0
        } else {
            smoothstep((d - ZERO_MARGIN) as f64 / ramp)
        }
    };
    let mut data: Vec<[f64; 3]> = (0..meta.len())
        .map(|i| {
            let c = meta.coords(i);
            let w = taper(c[0], meta.dims[0]) * taper(c[1], meta.dims[1]) * taper(c[2], meta.dims[2]);
            [comps[0][i] * w, comps[1][i] * w, comps[2][i] * w]
        })
        .collect();
    let max = data.iter().map(|v| crate::transform::norm(*v)).fold(0.0, f64::max);
    if max > 0.0 {
        let s = spec.amplitude / max;
        for v in data.iter_mut() {
            *v = v.map(|c| c * s);
        }
    }
    VelocityField::new(meta, data)
}

/// A synthetic registration pair with known deformation.
#[derive(Clone, Debug)]
pub struct PhantomPair {
    pub moving: LabelVolume,
    pub fixed: LabelVolume,
    /// `moving = fixed ∘ truth`; a perfect registration is `truth⁻¹`.
    pub truth: DisplacementField,
    pub velocity: VelocityField,
}

/// Fixed phantom, moving = fixed warped by the integrated synthetic velocity.
pub fn make_pair(spec: &PhantomSpec) -> Result<PhantomPair> {
    let fixed = make_phantom_labels(spec)?;
    let velocity = make_synthetic_svf(spec)?;
    let truth = integrate_svf(&velocity, DEFAULT_SQUARING_STEPS);
    let moving = warp_labels(&fixed, &truth)?;
    Ok(PhantomPair {
        moving,
        fixed,
        truth,
        velocity,
    })
}

//! Deterministic synthetic phantoms with analytic ground truth.
//!
//! A phantom is an ellipsoid, optionally with its boundary radius modulated
//! by a sectoral spherical harmonic (`sin^L(theta) cos(L (phi - phase))`),
//! rendered as `contrast * mask + noise` with a few optional intensity
//! nuisances (global offset, linear drift along z, blurred boundary).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, tag};
use crate::volume::{Grid3, LabelMask, Spacing, Volume};

pub const MIN_PHANTOM_EXTENT: usize = 16;
pub const MAX_PHANTOM_EXTENT: usize = 128;
pub const MAX_LOBE_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseShape {
    Ellipsoid,
    LobedEllipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub base_shape: BaseShape,
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    /// Shape centre in voxel coordinates; `None` places it at `extent / 2`.
    pub center: Option<[f64; 3]>,
    pub lobe_count: u32,
    /// Fraction of the radius, in `[0, 0.5]`.
    pub lobe_amplitude: f64,
    /// Azimuthal phase of the lobes, radians.
    pub lobe_phase: f64,
    pub noise_sigma: f64,
    pub intensity_contrast: f64,
    pub background: f64,
    /// Intensity added linearly along z, from `-drift/2` at z = 0 to `+drift/2` at the last slice.
    pub slice_drift: f64,
    /// Gaussian blur (voxels) applied to the intensity edge only; the mask stays sharp.
    pub boundary_blur: f64,
    pub spacing: [f32; 3],
    pub seed: u64,
}

impl PhantomSpec {
    /// Plain centred ellipsoid with unit contrast and no noise.
    pub fn ellipsoid(shape: [usize; 3], radii: [f64; 3], seed: u64) -> Self {
        Self {
            shape,
            base_shape: BaseShape::Ellipsoid,
            radii,
            center: None,
            lobe_count: 0,
            lobe_amplitude: 0.0,
            lobe_phase: 0.0,
            noise_sigma: 0.0,
            intensity_contrast: 1.0,
            background: 0.0,
            slice_drift: 0.0,
            boundary_blur: 0.0,
            spacing: [1.0; 3],
            seed,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        self.center.unwrap_or([
            self.shape[0] as f64 / 2.0,
            self.shape[1] as f64 / 2.0,
            self.shape[2] as f64 / 2.0,
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .shape
            .iter()
            .any(|&n| !(MIN_PHANTOM_EXTENT..=MAX_PHANTOM_EXTENT).contains(&n))
        {
            return Err(Error::Config(format!(
                "phantom extents must lie in [{MIN_PHANTOM_EXTENT}, {MAX_PHANTOM_EXTENT}], got {:?}",
                self.shape
            )));
        }
        if !(0.0..=MAX_LOBE_AMPLITUDE).contains(&self.lobe_amplitude) {
            return Err(Error::Config(format!(
                "lobe_amplitude must lie in [0, {MAX_LOBE_AMPLITUDE}], got {}",
                self.lobe_amplitude
            )));
        }
        if self.radii.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(Error::Config(format!("radii must be positive, got {:?}", self.radii)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.intensity_contrast.is_finite() && self.intensity_contrast > 0.0) {
            return Err(Error::Config("intensity_contrast must be finite and > 0".into()));
        }
        if !(self.boundary_blur.is_finite() && self.boundary_blur >= 0.0) {
            return Err(Error::Config("boundary_blur must be finite and >= 0".into()));
        }
        Spacing(self.spacing).validate()
    }

    /// Boundary radius (in normalized units) along the unit direction `u`.
    fn boundary_radius(&self, u: [f64; 3]) -> f64 {
        match self.base_shape {
            BaseShape::Ellipsoid => 1.0,
            BaseShape::LobedEllipsoid => {
                if self.lobe_count == 0 {
                    return 1.0;
                }
                let l = self.lobe_count as i32;
                let sin_theta = (u[0] * u[0] + u[1] * u[1]).sqrt();
                let phi = u[1].atan2(u[0]);
                1.0 + self.lobe_amplitude
                    * sin_theta.powi(l)
                    * (l as f64 * (phi - self.lobe_phase)).cos()
            }
        }
    }

    /// Analytic inside test at voxel `(x, y, z)`.
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let c = self.center();
        let d = [
            (x as f64 - c[0]) / self.radii[0],
            (y as f64 - c[1]) / self.radii[1],
            (z as f64 - c[2]) / self.radii[2],
        ];
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if rho == 0.0 {
            return true;
        }
        let u = [d[0] / rho, d[1] / rho, d[2] / rho];
        rho <= self.boundary_radius(u)
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let dims = spec.shape;
    let spacing = Spacing(spec.spacing);
    let mask = Grid3::from_fn(dims, |x, y, z| spec.contains(x, y, z) as u8);

    let mut edge: Vec<f64> = mask.as_slice().iter().map(|&m| m as f64).collect();
    if spec.boundary_blur > 0.0 {
        edge = gaussian_blur(&edge, dims, spec.boundary_blur);
    }

    let nz = dims[2];
    let mut rng = rng_for(spec.seed, &[tag::PHANTOM]);
    let mut data = Vec::with_capacity(edge.len());
    for (i, e) in edge.iter().enumerate() {
        let z = i / (dims[0] * dims[1]);
        let mut v = spec.intensity_contrast * e + spec.background;
        if spec.slice_drift != 0.0 {
            v += spec.slice_drift * (z as f64 / (nz - 1) as f64 - 0.5);
        }
        if spec.noise_sigma > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            v += spec.noise_sigma * n;
        }
        data.push(v as f32);
    }
    let volume = Volume::new(Grid3::from_vec(dims, data)?, spacing)?;
    let mask = LabelMask::new(mask, spacing)?;
    Ok((volume, mask))
}

/// Separable Gaussian blur with a kernel truncated at 3 sigma and zero padding.
fn gaussian_blur(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let q = pos + j as isize - radius;
                if (0..n).contains(&q) {
                    acc += k * cur[(i as isize + (q - pos) * strides[axis] as isize) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Distribution from which per-case phantom specs are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomTemplate {
    pub shape: [usize; 3],
    pub base_shape: BaseShape,
    /// Semi-axis range as a fraction of the extent along each axis.
    pub radius_fraction: [f64; 2],
    pub lobe_count: u32,
    pub lobe_amplitude: f64,
    pub noise_sigma: f64,
    pub intensity_contrast: f64,
    /// Relative per-case jitter of the contrast, uniform in `[-j, j]`.
    pub contrast_jitter: f64,
    pub background: [f64; 2],
    /// Centre offset per axis as a fraction of the semi-axis, with random sign.
    /// Zero keeps the shape centred; values below 1 keep the geometric centre inside.
    pub eccentricity: f64,
    pub slice_drift: [f64; 2],
    pub boundary_blur: f64,
    pub spacing: [f32; 3],
}

impl Default for PhantomTemplate {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            base_shape: BaseShape::LobedEllipsoid,
            radius_fraction: [0.2, 0.3],
            lobe_count: 3,
            lobe_amplitude: 0.3,
            noise_sigma: 0.5,
            intensity_contrast: 1.0,
            contrast_jitter: 0.3,
            background: [-0.3, 0.3],
            eccentricity: 0.0,
            slice_drift: [0.0, 0.0],
            boundary_blur: 1.0,
            spacing: [1.0; 3],
        }
    }
}

impl PhantomTemplate {
    pub fn sample(&self, dataset_seed: u64, case_index: u64) -> PhantomSpec {
        let mut rng = rng_for(dataset_seed, &[tag::PHANTOM, case_index]);
        let [f_lo, f_hi] = self.radius_fraction;
        let radii = [0, 1, 2].map(|a| self.shape[a] as f64 * rng.random_range(f_lo..=f_hi));
        let lobe_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let contrast =
            self.intensity_contrast * (1.0 + self.contrast_jitter * rng.random_range(-1.0..=1.0));
        let background = uniform(&mut rng, self.background);
        let drift = uniform(&mut rng, self.slice_drift);
        let center = if self.eccentricity > 0.0 {
            let mut c = [0.0; 3];
            for a in 0..3 {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                c[a] = self.shape[a] as f64 / 2.0 + sign * self.eccentricity * radii[a];
            }
            Some(c)
        } else {
            None
        };
        PhantomSpec {
            shape: self.shape,
            base_shape: self.base_shape,
            radii,
            center,
            lobe_count: self.lobe_count,
            lobe_amplitude: self.lobe_amplitude,
            lobe_phase,
            noise_sigma: self.noise_sigma,
            intensity_contrast: contrast.max(1e-3),
            background,
            slice_drift: drift,
            boundary_blur: self.boundary_blur,
            spacing: self.spacing,
            seed: rng.random(),
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

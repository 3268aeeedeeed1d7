//! Volumetric data model shared by every other module.
//!
//! Arrays are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Anatomical planes are bound to array axes as
//! sagittal = x, coronal = y, axial = z.

pub mod sgv1;

pub use sgv1::{read_volume, write_volume, DtypeCode, VolumeFile, SGV1_HEADER_LEN, SGV1_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest extent accepted on any axis.
pub const MIN_EXTENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlaneAxis {
    /// Fixes the x index.
    Sagittal,
    /// Fixes the y index.
    Coronal,
    /// Fixes the z index.
    Axial,
}

impl PlaneAxis {
    pub const ALL: [PlaneAxis; 3] = [PlaneAxis::Sagittal, PlaneAxis::Coronal, PlaneAxis::Axial];

    /// Array axis (0 = x, 1 = y, 2 = z) held constant by this plane.
    pub fn array_axis(self) -> usize {
        match self {
            PlaneAxis::Sagittal => 0,
            PlaneAxis::Coronal => 1,
            PlaneAxis::Axial => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            PlaneAxis::Sagittal => 'S',
            PlaneAxis::Coronal => 'C',
            PlaneAxis::Axial => 'A',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'S' => Some(PlaneAxis::Sagittal),
            'C' => Some(PlaneAxis::Coronal),
            'A' => Some(PlaneAxis::Axial),
            _ => None,
        }
    }
}

/// Dense 3D grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let yz = i / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// 2D cross-section at `index` along `axis`.
    pub fn slice(&self, axis: PlaneAxis, index: usize) -> Result<Slice2<T>> {
        let a = axis.array_axis();
        let extent = self.dims[a];
        if index >= extent {
            return Err(Error::Index {
                axis,
                index,
                extent,
            });
        }
        let [nx, ny, nz] = self.dims;
        let (width, height) = match axis {
            PlaneAxis::Sagittal => (ny, nz),
            PlaneAxis::Coronal => (nx, nz),
            PlaneAxis::Axial => (nx, ny),
        };
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                let (x, y, z) = match axis {
                    PlaneAxis::Sagittal => (index, u, v),
                    PlaneAxis::Coronal => (u, index, v),
                    PlaneAxis::Axial => (u, v, index),
                };
                data.push(self.get(x, y, z));
            }
        }
        Ok(Slice2 {
            width,
            height,
            data,
        })
    }
}

/// Row-major 2D cross-section; `u` is the faster in-plane axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Slice2<T> {
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[u + self.width * v]
    }
}

/// Voxel spacing in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f32; 3]);

impl Spacing {
    pub const ISOTROPIC: Spacing = Spacing([1.0, 1.0, 1.0]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "spacing must be finite and positive, got {:?}",
                self.0
            )))
        }
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::ISOTROPIC
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::Shape(format!(
            "every extent must be at least {MIN_EXTENT}, got {dims:?}"
        )));
    }
    Ok(())
}

/// Scalar image volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid3<f32>,
    spacing: Spacing,
}

impl Volume {
    pub fn new(grid: Grid3<f32>, spacing: Spacing) -> Result<Self> {
        check_dims(grid.dims())?;
        spacing.validate()?;
        if let Some(i) = grid.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { grid, spacing })
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        self.grid.as_slice()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.grid.as_slice().iter().map(|&v| v as f64).collect()
    }

    pub fn extract_slice(&self, axis: PlaneAxis, index: usize) -> Result<Slice2<f32>> {
        self.grid.slice(axis, index)
    }
}

/// Binary label mask: 0 = background, 1 = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    grid: Grid3<u8>,
    spacing: Spacing,
}

impl LabelMask {
    pub fn new(grid: Grid3<u8>, spacing: Spacing) -> Result<Self> {
        check_dims(grid.dims())?;
        spacing.validate()?;
        if let Some(i) = grid.as_slice().iter().position(|&v| v > 1) {
            return Err(Error::Config(format!(
                "label value {} at voxel {i} is not 0 or 1",
                grid.as_slice()[i]
            )));
        }
        Ok(Self { grid, spacing })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        Self::new(Grid3::from_fn(dims, |x, y, z| f(x, y, z) as u8), spacing)
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        self.grid.as_slice()
    }

    pub fn is_foreground(&self, x: usize, y: usize, z: usize) -> bool {
        self.grid.get(x, y, z) == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.grid.as_slice().iter().filter(|&&v| v == 1).count()
    }

    pub fn extract_slice(&self, axis: PlaneAxis, index: usize) -> Result<Slice2<u8>> {
        self.grid.slice(axis, index)
    }

    /// Whether the slice at `index` along `axis` holds any foreground voxel.
    pub fn slice_has_foreground(&self, axis: PlaneAxis, index: usize) -> bool {
        let [nx, ny, nz] = self.dims();
        let (ra, rb) = match axis {
            PlaneAxis::Sagittal => (ny, nz),
            PlaneAxis::Coronal => (nx, nz),
            PlaneAxis::Axial => (nx, ny),
        };
        (0..rb).any(|b| {
            (0..ra).any(|a| {
                let (x, y, z) = match axis {
                    PlaneAxis::Sagittal => (index, a, b),
                    PlaneAxis::Coronal => (a, index, b),
                    PlaneAxis::Axial => (a, b, index),
                };
                self.grid.get(x, y, z) == 1
            })
        })
    }

    pub fn check_same_shape(&self, other: &LabelMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

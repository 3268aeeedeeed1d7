//! Sparse slice annotation: slice selection, per-role weight matrices and
//! masked labels.
//!
//! Each sub-network role is supervised by the annotated slices other than its
//! namesake: with the orthogonal strategy the sagittal network sees the
//! coronal and axial slices, the coronal network sees sagittal and axial, and
//! the axial network sees sagittal and coronal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid3, LabelMask, PlaneAxis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    S,
    C,
    A,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::S, Role::C, Role::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn plane(self) -> PlaneAxis {
        match self {
            Role::S => PlaneAxis::Sagittal,
            Role::C => PlaneAxis::Coronal,
            Role::A => PlaneAxis::Axial,
        }
    }

    /// The two roles whose predictions supervise this one on unlabeled data.
    pub fn peers(self) -> [Role; 2] {
        match self {
            Role::S => [Role::C, Role::A],
            Role::C => [Role::S, Role::A],
            Role::A => [Role::S, Role::C],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::S => "s",
            Role::C => "c",
            Role::A => "a",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// One slice per orthogonal plane.
    #[serde(rename = "SCA")]
    Sca,
    /// One coronal and one axial slice.
    #[serde(rename = "CA")]
    Ca,
    /// Two coronal slices and one axial slice.
    #[serde(rename = "CAC")]
    Cac,
    /// Three axial slices.
    #[serde(rename = "parallel-3")]
    Parallel3,
    /// One axial slice.
    #[serde(rename = "single-plane")]
    SinglePlane,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sca,
        Strategy::Ca,
        Strategy::Cac,
        Strategy::Parallel3,
        Strategy::SinglePlane,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sca => "SCA",
            Strategy::Ca => "CA",
            Strategy::Cac => "CAC",
            Strategy::Parallel3 => "parallel-3",
            Strategy::SinglePlane => "single-plane",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown annotation strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotatedSlice {
    pub axis: PlaneAxis,
    pub index: usize,
}

impl fmt::Display for AnnotatedSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.axis.letter(), self.index)
    }
}

impl FromStr for AnnotatedSlice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad slice token {s:?}, expected e.g. \"A:16\""));
        let (a, i) = s.split_once(':').ok_or_else(bad)?;
        let mut chars = a.chars();
        let axis = match (chars.next(), chars.next()) {
            (Some(c), None) => PlaneAxis::from_letter(c).ok_or_else(bad)?,
            _ => return Err(bad()),
        };
        Ok(AnnotatedSlice {
            axis,
            index: i.parse().map_err(|_| bad())?,
        })
    }
}

/// Orthogonal slice indices: `p` sagittal (x), `q` coronal (y), `r` axial (z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceTriple {
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

/// The slices annotated on one volume under some strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSet {
    pub strategy: Strategy,
    pub slices: Vec<AnnotatedSlice>,
}

impl SliceSet {
    pub fn triple(&self) -> Option<SliceTriple> {
        if self.strategy != Strategy::Sca {
            return None;
        }
        let find = |axis| self.slices.iter().find(|s| s.axis == axis).map(|s| s.index);
        Some(SliceTriple {
            p: find(PlaneAxis::Sagittal)?,
            q: find(PlaneAxis::Coronal)?,
            r: find(PlaneAxis::Axial)?,
        })
    }

    /// Slices routed to `role`: with three annotated slices, slice `i` is
    /// withheld from role `i`; with fewer, every role sees all of them.
    pub fn slices_for(&self, role: Role) -> Vec<AnnotatedSlice> {
        if self.slices.len() == 3 {
            self.slices
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != role.index())
                .map(|(_, s)| *s)
                .collect()
        } else {
            self.slices.clone()
        }
    }
}

impl From<SliceTriple> for SliceSet {
    fn from(t: SliceTriple) -> Self {
        SliceSet {
            strategy: Strategy::Sca,
            slices: vec![
                AnnotatedSlice {
                    axis: PlaneAxis::Sagittal,
                    index: t.p,
                },
                AnnotatedSlice {
                    axis: PlaneAxis::Coronal,
                    index: t.q,
                },
                AnnotatedSlice {
                    axis: PlaneAxis::Axial,
                    index: t.r,
                },
            ],
        }
    }
}

fn foreground_slices(gt: &LabelMask, axis: PlaneAxis) -> Vec<usize> {
    let extent = gt.dims()[axis.array_axis()];
    (0..extent)
        .filter(|&i| gt.slice_has_foreground(axis, i))
        .collect()
}

/// Foreground-containing slice closest to `target`; ties go to the smaller index.
fn nearest_foreground(candidates: &[usize], target: f64) -> Option<usize> {
    candidates.iter().copied().min_by(|&a, &b| {
        let da = (a as f64 - target).abs();
        let db = (b as f64 - target).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    })
}

fn centre_slice(gt: &LabelMask, axis: PlaneAxis) -> Result<AnnotatedSlice> {
    let extent = gt.dims()[axis.array_axis()];
    let fg = foreground_slices(gt, axis);
    let index = nearest_foreground(&fg, extent as f64 / 2.0).ok_or(Error::Annotation {
        axis,
        message: "no slice on this plane contains foreground".into(),
    })?;
    Ok(AnnotatedSlice { axis, index })
}

/// Slices at the given quantiles of the foreground extent along `axis`.
fn quantile_slices(gt: &LabelMask, axis: PlaneAxis, qs: &[f64]) -> Result<Vec<AnnotatedSlice>> {
    let fg = foreground_slices(gt, axis);
    let (Some(&lo), Some(&hi)) = (fg.first(), fg.last()) else {
        return Err(Error::Annotation {
            axis,
            message: "no slice on this plane contains foreground".into(),
        });
    };
    Ok(qs
        .iter()
        .map(|q| {
            let target = lo as f64 + q * (hi - lo) as f64;
            AnnotatedSlice {
                axis,
                index: nearest_foreground(&fg, target).unwrap(),
            }
        })
        .collect())
}

pub fn select_slices(gt: &LabelMask, strategy: Strategy) -> Result<SliceSet> {
    use PlaneAxis::*;
    let slices = match strategy {
        Strategy::Sca => vec![
            centre_slice(gt, Sagittal)?,
            centre_slice(gt, Coronal)?,
            centre_slice(gt, Axial)?,
        ],
        Strategy::Ca => vec![centre_slice(gt, Coronal)?, centre_slice(gt, Axial)?],
        Strategy::Cac => {
            let cs = quantile_slices(gt, Coronal, &[1.0 / 3.0, 2.0 / 3.0])?;
            vec![cs[0], centre_slice(gt, Axial)?, cs[1]]
        }
        Strategy::Parallel3 => quantile_slices(gt, Axial, &[0.25, 0.5, 0.75])?,
        Strategy::SinglePlane => vec![centre_slice(gt, Axial)?],
    };
    Ok(SliceSet { strategy, slices })
}

/// Binary indicator of the slices supervising one role.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub role: Role,
    pub data: Grid3<u8>,
}

impl WeightMatrix {
    pub fn popcount(&self) -> usize {
        self.data.as_slice().iter().filter(|&&w| w == 1).count()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.data.dims()
    }
}

pub fn weight_from_slices(dims: [usize; 3], slices: &[AnnotatedSlice]) -> Result<Grid3<u8>> {
    for s in slices {
        let extent = dims[s.axis.array_axis()];
        if s.index >= extent {
            return Err(Error::Index {
                axis: s.axis,
                index: s.index,
                extent,
            });
        }
    }
    Ok(Grid3::from_fn(dims, |x, y, z| {
        let c = [x, y, z];
        slices.iter().any(|s| c[s.axis.array_axis()] == s.index) as u8
    }))
}

pub fn build_weight_matrix(dims: [usize; 3], slices: &SliceSet, role: Role) -> Result<WeightMatrix> {
    Ok(WeightMatrix {
        role,
        data: weight_from_slices(dims, &slices.slices_for(role))?,
    })
}

/// `gt ⊗ w` together with the weights; off-weight voxels carry no label.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabel {
    pub labels: Grid3<u8>,
    pub weights: Grid3<u8>,
}

impl SparseLabel {
    pub fn weight_sum(&self) -> usize {
        self.weights.as_slice().iter().map(|&w| w as usize).sum()
    }
}

pub fn sparse_label(gt: &LabelMask, w: &WeightMatrix) -> Result<SparseLabel> {
    if gt.dims() != w.dims() {
        return Err(Error::Shape(format!(
            "label {:?} vs weight {:?}",
            gt.dims(),
            w.dims()
        )));
    }
    let labels: Vec<u8> = gt
        .data()
        .iter()
        .zip(w.data.as_slice())
        .map(|(&y, &wv)| y * wv)
        .collect();
    Ok(SparseLabel {
        labels: Grid3::from_vec(gt.dims(), labels)?,
        weights: w.data.clone(),
    })
}

/// Everything the trainer needs about one labeled volume.
#[derive(Debug, Clone)]
pub struct SparseAnnotation {
    pub slices: SliceSet,
    pub weights: [WeightMatrix; 3],
    dense_gt: LabelMask,
}

impl SparseAnnotation {
    pub fn new(gt: LabelMask, slices: SliceSet) -> Result<Self> {
        let dims = gt.dims();
        let weights = [
            build_weight_matrix(dims, &slices, Role::S)?,
            build_weight_matrix(dims, &slices, Role::C)?,
            build_weight_matrix(dims, &slices, Role::A)?,
        ];
        Ok(Self {
            slices,
            weights,
            dense_gt: gt,
        })
    }

    pub fn weight(&self, role: Role) -> &WeightMatrix {
        &self.weights[role.index()]
    }

    pub fn label(&self, role: Role) -> SparseLabel {
        sparse_label(&self.dense_gt, self.weight(role)).expect("shapes fixed at construction")
    }

    /// Dense ground truth, for metrics and oracles only.
    pub fn dense_gt(&self) -> &LabelMask {
        &self.dense_gt
    }
}

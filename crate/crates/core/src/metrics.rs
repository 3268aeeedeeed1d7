//! Overlap and surface-distance metrics, aggregation, and feature export.
//!
//! Boundary voxels are foreground voxels with at least one 6-connected
//! background neighbour, where positions outside the volume count as
//! background. Surface distances pool both directed boundary-to-boundary
//! distance sets; `hd95` is their 95th percentile with linear interpolation
//! between order statistics and `asd` their mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotation::Role;
use crate::cotrain::Bundle;
use crate::error::{Error, Result};
use crate::nn::{volume_input, ForwardMode};
use crate::volume::{Grid3, LabelMask, Spacing, Volume};

fn check_shapes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(2|P∩G| / (|P|+|G|), |P∩G| / |P∪G|)`; two empty masks give `(1, 1)`.
pub fn dice_jaccard(pred: &LabelMask, gt: &LabelMask) -> Result<(f64, f64)> {
    check_shapes(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok((1.0, 1.0));
    }
    let union = np + ng - inter;
    Ok((2.0 * inter as f64 / (np + ng) as f64, inter as f64 / union as f64))
}

/// Boundary voxel indicator.
pub fn boundary(mask: &Grid3<u8>) -> Grid3<u8> {
    let [nx, ny, nz] = mask.dims();
    Grid3::from_fn(mask.dims(), |x, y, z| {
        if mask.get(x, y, z) == 0 {
            return 0;
        }
        let bg = |dx: isize, dy: isize, dz: isize| {
            let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
            a < 0
                || b < 0
                || c < 0
                || a >= nx as isize
                || b >= ny as isize
                || c >= nz as isize
                || mask.get(a as usize, b as usize, c as usize) == 0
        };
        u8::from(
            bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1),
        )
    })
}

/// Exact 1D squared-distance lower envelope (Felzenszwalb-Huttenlocher) for
/// samples at positions `i * step`.
fn edt_1d(f: &mut [f64], step: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while (j as isize) < k && z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance (in physical units) from every voxel to the
/// nearest voxel where `feature` is nonzero.
pub fn squared_edt(feature: &Grid3<u8>, spacing: [f64; 3]) -> Grid3<f64> {
    let dims = feature.dims();
    let mut d: Vec<f64> = feature
        .as_slice()
        .iter()
        .map(|&v| if v != 0 { 0.0 } else { f64::INFINITY })
        .collect();
    let maxn = *dims.iter().max().expect("3 dims");
    let (mut f, mut v, mut z, mut out) = (vec![0.0; maxn], vec![0; maxn], vec![0.0; maxn + 1], vec![0.0; maxn]);
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..dims[o1] {
            for b in 0..dims[o2] {
                let base = a * strides[o1] + b * strides[o2];
                for i in 0..n {
                    f[i] = d[base + i * strides[axis]];
                }
                edt_1d(&mut f[..n], spacing[axis], &mut v, &mut z, &mut out[..n]);
                for i in 0..n {
                    d[base + i * strides[axis]] = f[i];
                }
            }
        }
    }
    Grid3::from_vec(dims, d).expect("dims unchanged")
}

/// Linear-interpolation percentile of a sorted sample, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q / 100.0 * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
}

/// Summarizes a pooled set of directed distances.
pub fn summarize_distances(mut pool: Vec<f64>) -> SurfaceDistances {
    pool.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let asd = pool.iter().sum::<f64>() / pool.len() as f64;
    SurfaceDistances {
        hd95: percentile_sorted(&pool, 95.0),
        asd,
    }
}

/// Symmetric boundary distances in physical units.
pub fn surface_distances(pred: &LabelMask, gt: &LabelMask, spacing: Spacing) -> Result<SurfaceDistances> {
    check_shapes(pred, gt)?;
    if pred.foreground_count() == 0 {
        return Err(Error::EmptyMask("prediction"));
    }
    if gt.foreground_count() == 0 {
        return Err(Error::EmptyMask("reference"));
    }
    let sp = spacing.as_f64();
    let bp = boundary(pred.grid());
    let bg = boundary(gt.grid());
    let dp = squared_edt(&bp, sp);
    let dg = squared_edt(&bg, sp);
    let mut pool = Vec::new();
    for (i, &b) in bp.as_slice().iter().enumerate() {
        if b == 1 {
            pool.push(dg.as_slice()[i].sqrt());
        }
    }
    for (i, &b) in bg.as_slice().iter().enumerate() {
        if b == 1 {
            pool.push(dp.as_slice()[i].sqrt());
        }
    }
    Ok(summarize_distances(pool))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn evaluate_pair(id: &str, pred: &LabelMask, gt: &LabelMask) -> Result<VolumeMetrics> {
    let (dice, jaccard) = dice_jaccard(pred, gt)?;
    let (hd95, asd) = match surface_distances(pred, gt, gt.spacing()) {
        Ok(s) => (Some(s.hd95), Some(s.asd)),
        Err(Error::EmptyMask(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(VolumeMetrics {
        id: id.to_string(),
        dice,
        jaccard,
        hd95,
        asd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Number of volumes contributing.
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    if values.is_empty() {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
            count: 0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate {
        mean,
        std: var.sqrt(),
        count: values.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub volumes: Vec<VolumeMetrics>,
    pub dice: Aggregate,
    pub jaccard: Aggregate,
    pub hd95: Aggregate,
    pub asd: Aggregate,
}

impl MetricReport {
    pub fn from_volumes(volumes: Vec<VolumeMetrics>) -> Self {
        let col = |f: &dyn Fn(&VolumeMetrics) -> Option<f64>| -> Vec<f64> { volumes.iter().filter_map(f).collect() };
        Self {
            dice: aggregate(&col(&|v| Some(v.dice))),
            jaccard: aggregate(&col(&|v| Some(v.jaccard))),
            hd95: aggregate(&col(&|v| v.hd95)),
            asd: aggregate(&col(&|v| v.asd)),
            volumes,
        }
    }

    /// Number of volumes without surface distances.
    pub fn missing_surface(&self) -> usize {
        self.volumes.iter().filter(|v| v.hd95.is_none()).count()
    }

    /// CSV with a comment header describing the estimators.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut s = String::new();
        s.push_str("# hd95: 95th percentile (linear interpolation) of pooled symmetric boundary distances, mm\n");
        s.push_str("# asd: mean of the same pooled distances, mm; NA = empty mask, excluded from means\n");
        s.push_str("id,dice,jaccard,hd95,asd\n");
        for v in &self.volumes {
            let _ = writeln!(s, "{},{},{},{},{}", v.id, v.dice, v.jaccard, fmt_opt(v.hd95), fmt_opt(v.asd));
        }
        let pick: [(&str, fn(&Aggregate) -> f64); 2] = [("mean", |a| a.mean), ("std", |a| a.std)];
        for (name, a) in pick {
            let _ = writeln!(
                s,
                "# {name},{},{},{},{}",
                a(&self.dice),
                a(&self.jaccard),
                a(&self.hd95),
                a(&self.asd)
            );
        }
        let _ = writeln!(s, "# surface distances missing for {} volume(s)", self.missing_surface());
        s
    }
}

/// Parses the data rows of [`MetricReport::to_csv`] output.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<VolumeMetrics>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if !header_seen {
            if l != "id,dice,jaccard,hd95,asd" {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unexpected header {l:?}"),
                });
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields, found {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("{s:?}: {e}"),
            })
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        out.push(VolumeMetrics {
            id: f[0].to_string(),
            dice: num(f[1])?,
            jaccard: num(f[2])?,
            hd95: opt(f[3])?,
            asd: opt(f[4])?,
        });
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 1,
            message: "no header row".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTap {
    /// Pooled bottleneck feature.
    #[default]
    FImg,
    /// Spatial mean of the pre-classification features.
    ThetaPooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub role: Role,
    pub values: Vec<f64>,
}

/// Eval-mode features of every role on every volume, in input order.
pub fn export_features(bundle: &Bundle, volumes: &[(String, Volume)], tap: FeatureTap) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::with_capacity(volumes.len() * 3);
    for (id, v) in volumes {
        let x = volume_input(v);
        for role in Role::ALL {
            let f = bundle.net(role).features(&x, ForwardMode::Eval)?;
            let values = match tap {
                FeatureTap::FImg => f.f_img,
                FeatureTap::ThetaPooled => f.theta.global_average(),
            };
            rows.push(FeatureRow {
                id: id.clone(),
                role,
                values,
            });
        }
    }
    Ok(rows)
}

/// Tab-separated table: `id  role  f0  f1 ...`.
pub fn features_to_tsv(rows: &[FeatureRow]) -> String {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("id\trole");
    for i in 0..width {
        let _ = write!(s, "\tf{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{}", r.id, r.role);
        for v in &r.values {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], pts: &[[usize; 3]]) -> LabelMask {
        LabelMask::from_fn(dims, Spacing::ISOTROPIC, |x, y, z| pts.contains(&[x, y, z])).unwrap()
    }

    #[test]
    fn overlap_cases() {
        let a = mask([4, 4, 4], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = mask([4, 4, 4], &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        let (d, j) = dice_jaccard(&a, &b).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_jaccard(&a, &a).unwrap(), (1.0, 1.0));
        let e = mask([4, 4, 4], &[]);
        assert_eq!(dice_jaccard(&e, &e).unwrap(), (1.0, 1.0));
        let c = mask([4, 4, 4], &[[3, 3, 3]]);
        assert_eq!(dice_jaccard(&a, &c).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn two_points_three_apart() {
        let a = mask([8, 4, 4], &[[1, 1, 1]]);
        let b = mask([8, 4, 4], &[[4, 1, 1]]);
        let s = surface_distances(&a, &b, Spacing::ISOTROPIC).unwrap();
        assert_eq!(s.hd95, 3.0);
        assert_eq!(s.asd, 3.0);
        let s = surface_distances(&a, &a, Spacing::ISOTROPIC).unwrap();
        assert_eq!((s.hd95, s.asd), (0.0, 0.0));
        let e = mask([8, 4, 4], &[]);
        assert!(matches!(surface_distances(&a, &e, Spacing::ISOTROPIC), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn percentile_matches_linear_rule() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 50.0), 3.0);
        assert!((percentile_sorted(&v, 95.0) - 4.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn boundary_of_solid_cube_is_its_shell() {
        let m = LabelMask::from_fn([6, 6, 6], Spacing::ISOTROPIC, |x, y, z| {
            (1..5).contains(&x) && (1..5).contains(&y) && (1..5).contains(&z)
        })
        .unwrap();
        let b = boundary(m.grid());
        let count = b.as_slice().iter().filter(|&&v| v == 1).count();
        assert_eq!(count, 64 - 8);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rep = MetricReport::from_volumes(vec![
            VolumeMetrics {
                id: "a".into(),
                dice: 0.5,
                jaccard: 1.0 / 3.0,
                hd95: Some(2.5),
                asd: Some(1.25),
            },
            VolumeMetrics {
                id: "b".into(),
                dice: 0.0,
                jaccard: 0.0,
                hd95: None,
                asd: None,
            },
        ]);
        assert_eq!(rep.missing_surface(), 1);
        assert_eq!(rep.hd95.count, 1);
        assert_eq!(parse_metrics_csv(&rep.to_csv()).unwrap(), rep.volumes);
    }
}

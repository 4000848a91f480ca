//! Overlap and surface-distance metrics between label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, CLASS_NAMES, NUM_CLASSES};

/// Tissue classes evaluated in reports (background excluded).
pub const TISSUE_CLASSES: [u8; 7] = [1, 2, 3, 4, 5, 6, 7];

fn check_geometry(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if !a.geometry().approx_eq(b.geometry()) {
        return Err(Error::InvalidGeometry("label maps are on different grids".into()));
    }
    Ok(())
}

/// Dice similarity `2|P∩T| / (|P| + |T|)`; 1.0 when the class is absent from
/// both maps.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    check_geometry(pred, truth)?;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Class voxels with at least one 6-neighbour outside the class (the grid
/// border counts as outside).
pub fn surface_mask(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let mut out = vec![false; mask.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if !mask[idx] {
                    continue;
                }
                let inside = |di: isize, dj: isize, dk: isize| {
                    let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                    a >= 0
                        && b >= 0
                        && c >= 0
                        && (a as usize) < nx
                        && (b as usize) < ny
                        && (c as usize) < nz
                        && mask[a as usize + nx * (b as usize + ny * c as usize)]
                };
                out[idx] = !(inside(-1, 0, 0)
                    && inside(1, 0, 0)
                    && inside(0, -1, 0)
                    && inside(0, 1, 0)
                    && inside(0, 0, -1)
                    && inside(0, 0, 1));
            }
        }
    }
    out
}

/// One-dimensional lower envelope pass of the squared Euclidean distance
/// transform, with sample positions `q * spacing`.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * spacing;
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
                z[1] = f64::INFINITY;
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
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel; infinite when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let maxn = dims.iter().cloned().max().unwrap_or(1);
    let mut line = vec![0.0; maxn];
    let mut out = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut z = vec![0.0; maxn + 1];
    let [nx, ny, nz] = dims;
    for axis in 0..3 {
        let n = dims[axis];
        let stride = [1, nx, nx * ny][axis];
        let starts: Vec<usize> = match axis {
            0 => (0..ny * nz).map(|jk| jk * nx).collect(),
            1 => (0..nz).flat_map(|k| (0..nx).map(move |i| i + nx * ny * k)).collect(),
            _ => (0..nx * ny).collect(),
        };
        for s in starts {
            for t in 0..n {
                line[t] = d[s + t * stride];
            }
            edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut z);
            for t in 0..n {
                d[s + t * stride] = out[t];
            }
        }
    }
    d
}

/// Average symmetric surface distance (mm): surface distances pooled over both
/// directions and averaged.
pub fn assd(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<f64> {
    check_geometry(pred, truth)?;
    let dims = pred.dims();
    let spacing = pred.geometry().spacing();
    let pm: Vec<bool> = pred.labels().iter().map(|&l| l == class_id).collect();
    let tm: Vec<bool> = truth.labels().iter().map(|&l| l == class_id).collect();
    if !pm.iter().any(|&b| b) || !tm.iter().any(|&b| b) {
        return Err(Error::UndefinedDistance { class_id });
    }
    let ps = surface_mask(&pm, dims);
    let ts = surface_mask(&tm, dims);
    let dt_t = squared_distance_transform(&ts, dims, spacing);
    let dt_p = squared_distance_transform(&ps, dims, spacing);
    let mut total = 0.0;
    let mut count = 0usize;
    for idx in 0..ps.len() {
        if ps[idx] {
            total += dt_t[idx].sqrt();
            count += 1;
        }
        if ts[idx] {
            total += dt_p[idx].sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-subject segmentation quality over the seven tissue classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueReport {
    pub subject: String,
    pub ga: f64,
    /// DSC for classes 1..=7.
    pub dsc: Vec<f64>,
    /// ASSD (mm) for classes 1..=7; `None` when undefined (empty mask).
    pub assd: Vec<Option<f64>>,
    pub mean_dsc: f64,
    /// Mean over the classes where ASSD is defined.
    pub mean_assd: Option<f64>,
}

impl TissueReport {
    pub fn compute(pred: &LabelMap, truth: &LabelMap, subject: impl Into<String>, ga: f64) -> Result<Self> {
        let mut dsc = Vec::with_capacity(7);
        let mut dist = Vec::with_capacity(7);
        for c in TISSUE_CLASSES {
            dsc.push(dice(pred, truth, c)?);
            dist.push(match assd(pred, truth, c) {
                Ok(v) => Some(v),
                Err(Error::UndefinedDistance { .. }) => None,
                Err(e) => return Err(e),
            });
        }
        let mean_dsc = dsc.iter().sum::<f64>() / dsc.len() as f64;
        let defined: Vec<f64> = dist.iter().flatten().cloned().collect();
        let mean_assd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok(TissueReport { subject: subject.into(), ga, dsc, assd: dist, mean_dsc, mean_assd })
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["subject".to_string(), "ga".to_string()];
        for c in TISSUE_CLASSES {
            cols.push(format!("dsc_{}", CLASS_NAMES[c as usize]));
        }
        for c in TISSUE_CLASSES {
            cols.push(format!("assd_{}", CLASS_NAMES[c as usize]));
        }
        cols.push("dsc_overall".into());
        cols.push("assd_overall".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.subject.clone(), format!("{:.3}", self.ga)];
        cols.extend(self.dsc.iter().map(|v| format!("{v:.6}")));
        cols.extend(self.assd.iter().map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
        cols.push(format!("{:.6}", self.mean_dsc));
        cols.push(self.mean_assd.map(|x| format!("{x:.6}")).unwrap_or_default());
        cols.join(",")
    }
}

const _: () = assert!(NUM_CLASSES == 8);

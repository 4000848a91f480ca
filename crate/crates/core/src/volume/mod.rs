//! Volumetric image carriers shared by every stage of the pipeline.
//!
//! Voxel data is stored x-fastest (`i + nx * (j + ny * k)`), which is also the
//! NIfTI on-disk order. Geometry values are kept at single precision so that a
//! volume written to disk and read back has exactly the same geometry.

mod filter;
mod normalize;
pub(crate) mod resample;
mod transform;

pub use filter::{block_average, block_spread, convolve_axis, convolve_axis_transpose, gaussian_kernel, smooth};
pub use normalize::{intensity_stats, normalize, normalize_masked, normalize_with_labels};
pub use resample::{resample, resample_transformed, warp_labels, Interpolation};
pub(crate) use resample::{sample_affine_labels, sample_affine_linear, trilinear, Affine3};
pub use transform::RigidTransform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tissue classes in the label schema, background included.
pub const NUM_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "CSF",
    "cGM",
    "WM",
    "ventricles",
    "cerebellum",
    "dGM",
    "brainstem",
];

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const CORTICAL_GM: u8 = 2;
pub const WHITE_MATTER: u8 = 3;
pub const VENTRICLES: u8 = 4;
pub const CEREBELLUM: u8 = 5;
pub const DEEP_GM: u8 = 6;
pub const BRAINSTEM: u8 = 7;

/// Anatomical axis of the voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Axis {
        Axis::ALL[i % 3]
    }
}

#[inline]
pub(crate) fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Voxel-to-world mapping of a regular grid: dims, spacing (mm) and a rigid
/// plus axis-scale affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
}

#[derive(Serialize, Deserialize)]
struct GeometryRepr {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
}

impl TryFrom<GeometryRepr> for Geometry {
    type Error = Error;
    fn try_from(r: GeometryRepr) -> Result<Self> {
        Geometry::new(r.dims, r.spacing, r.affine)
    }
}

impl From<Geometry> for GeometryRepr {
    fn from(g: Geometry) -> Self {
        GeometryRepr { dims: g.dims, spacing: g.spacing, affine: g.affine }
    }
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!("non-positive spacing {spacing:?}")));
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidGeometry("affine last row must be (0, 0, 0, 1)".into()));
        }
        let mut a = affine;
        for row in a.iter_mut().take(3) {
            for v in row.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::InvalidGeometry("non-finite affine entry".into()));
                }
                *v = snap_f32(*v);
            }
        }
        let spacing = spacing.map(snap_f32);
        // Columns must be orthogonal with norms equal to the spacing.
        for c in 0..3 {
            let norm = (0..3).map(|r| a[r][c] * a[r][c]).sum::<f64>().sqrt();
            if (norm - spacing[c]).abs() > 1e-4 * spacing[c] {
                return Err(Error::InvalidGeometry(format!(
                    "affine column {c} has norm {norm}, spacing is {}",
                    spacing[c]
                )));
            }
            for d in (c + 1)..3 {
                let dot: f64 = (0..3).map(|r| a[r][c] * a[r][d]).sum();
                if dot.abs() > 1e-4 * spacing[c] * spacing[d] {
                    return Err(Error::InvalidGeometry("affine has shear".into()));
                }
            }
        }
        Ok(Geometry { dims, spacing, affine: a })
    }

    /// Axis-aligned grid whose center voxel sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = spacing[a];
            affine[a][3] = -(dims[a] as f64 - 1.0) / 2.0 * spacing[a];
        }
        affine[3][3] = 1.0;
        Geometry::new(dims, spacing, affine)
    }

    pub fn isotropic(n: usize, spacing: f64) -> Result<Self> {
        Geometry::centered([n; 3], [spacing; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> [[f64; 4]; 4] {
        self.affine
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        self.affine3().apply(p)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.affine3().inverse().apply(p)
    }

    pub(crate) fn affine3(&self) -> Affine3 {
        Affine3 { m: [self.affine[0], self.affine[1], self.affine[2]] }
    }

    pub fn is_isotropic(&self) -> bool {
        let s = self.spacing;
        (s[0] - s[1]).abs() <= 1e-6 * s[0] && (s[0] - s[2]).abs() <= 1e-6 * s[0]
    }

    /// Geometry equality up to single-precision round-off.
    pub fn approx_eq(&self, other: &Geometry) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let tol = 1e-5 * self.spacing.iter().cloned().fold(1.0, f64::max);
        (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() <= 1e-6 * self.spacing[a])
            && (0..3).all(|r| (0..4).all(|c| (self.affine[r][c] - other.affine[r][c]).abs() <= tol))
    }

    /// World position of the geometric center of the grid.
    pub fn center(&self) -> [f64; 3] {
        let c = self.dims.map(|d| (d as f64 - 1.0) / 2.0);
        self.voxel_to_world(c)
    }

    /// Sub-grid starting at voxel `origin` (may be negative or extend past the
    /// grid, e.g. for padding) with the given dims.
    pub fn subgrid(&self, origin: [isize; 3], dims: [usize; 3]) -> Result<Geometry> {
        let o = self.voxel_to_world(origin.map(|v| v as f64));
        let mut affine = self.affine;
        for r in 0..3 {
            affine[r][3] = o[r];
        }
        Geometry::new(dims, self.spacing, affine)
    }

    /// Grid with every axis step scaled by `factor` (integer decimation). Voxel
    /// `i` of the new grid sits at voxel `factor * i` of this one.
    pub fn decimated(&self, factors: [usize; 3]) -> Result<Geometry> {
        let mut affine = self.affine;
        let mut dims = self.dims;
        let mut spacing = self.spacing;
        for a in 0..3 {
            let f = factors[a].max(1);
            for row in affine.iter_mut().take(3) {
                row[a] *= f as f64;
            }
            dims[a] = self.dims[a].div_ceil(f);
            spacing[a] *= f as f64;
        }
        Geometry::new(dims, spacing, affine)
    }

    /// Same field of view and center, sampled isotropically at `spacing` mm.
    pub fn resampled_isotropic(&self, spacing: f64) -> Result<Geometry> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidGeometry(format!("spacing {spacing}")));
        }
        let dims = [0, 1, 2].map(|a| ((self.dims[a] as f64 * self.spacing[a]) / spacing).round().max(1.0) as usize);
        let center = self.center();
        let mut affine = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                affine[r][c] = self.affine[r][c] / self.spacing[c] * spacing;
            }
        }
        for r in 0..3 {
            let off: f64 = (0..3).map(|c| affine[r][c] * (dims[c] as f64 - 1.0) / 2.0).sum();
            affine[r][3] = center[r] - off;
        }
        affine[3][3] = 1.0;
        Geometry::new(dims, [spacing; 3], affine)
    }
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                geometry.dims()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("volume contains non-finite intensities".into()));
        }
        Ok(Volume { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Volume { geometry, data: vec![0.0; n] }
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        let n = geometry.len();
        Volume { geometry, data: vec![value; n] }
    }

    /// Builds a volume by evaluating `f` at every voxel's world position.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        let aff = geometry.affine3();
        let mut data = Vec::with_capacity(geometry.len());
        let [nx, ny, nz] = geometry.dims();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(aff.apply([i as f64, j as f64, k as f64])));
                }
            }
        }
        Volume::new(geometry, data)
    }

    pub(crate) fn from_parts_unchecked(geometry: Geometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        Volume { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.geometry.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all voxels.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Copies the block starting at `origin` (zero outside the grid).
    pub fn crop(&self, origin: [isize; 3], dims: [usize; 3]) -> Result<Volume> {
        let g = self.geometry.subgrid(origin, dims)?;
        let data = crop_raw(&self.data, self.dims(), origin, dims, 0.0);
        Ok(Volume::from_parts_unchecked(g, data))
    }
}

/// Canonical 8-class tissue label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "label length {} does not match grid {:?}",
                labels.len(),
                geometry.dims()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Schema(format!("label value {bad} outside 0..=7")));
        }
        Ok(LabelMap { geometry, labels })
    }

    pub fn background(geometry: Geometry) -> Self {
        let n = geometry.len();
        LabelMap { geometry, labels: vec![0; n] }
    }

    pub(crate) fn from_parts_unchecked(geometry: Geometry, labels: Vec<u8>) -> Self {
        debug_assert!(labels.iter().all(|&l| (l as usize) < NUM_CLASSES));
        LabelMap { geometry, labels }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.geometry.index(i, j, k)]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn class_set(&self) -> Vec<u8> {
        let c = self.class_counts();
        (0..NUM_CLASSES as u8).filter(|&l| c[l as usize] > 0).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }

    pub fn crop(&self, origin: [isize; 3], dims: [usize; 3]) -> Result<LabelMap> {
        let g = self.geometry.subgrid(origin, dims)?;
        let data = crop_raw(&self.labels, self.dims(), origin, dims, 0u8);
        Ok(LabelMap { geometry: g, labels: data })
    }
}

/// Label grid whose values are not restricted to the canonical schema, e.g.
/// annotations that carry extra classes before harmonisation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLabelMap {
    pub geometry: Geometry,
    pub labels: Vec<u8>,
}

impl RawLabelMap {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::InvalidGeometry("label length does not match grid".into()));
        }
        Ok(RawLabelMap { geometry, labels })
    }
}

impl From<LabelMap> for RawLabelMap {
    fn from(l: LabelMap) -> Self {
        RawLabelMap { geometry: l.geometry, labels: l.labels }
    }
}

pub(crate) fn crop_raw<T: Copy>(src: &[T], sdims: [usize; 3], origin: [isize; 3], dims: [usize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; dims[0] * dims[1] * dims[2]];
    for k in 0..dims[2] {
        let sk = origin[2] + k as isize;
        if sk < 0 || sk >= sdims[2] as isize {
            continue;
        }
        for j in 0..dims[1] {
            let sj = origin[1] + j as isize;
            if sj < 0 || sj >= sdims[1] as isize {
                continue;
            }
            for i in 0..dims[0] {
                let si = origin[0] + i as isize;
                if si < 0 || si >= sdims[0] as isize {
                    continue;
                }
                let s = si as usize + sdims[0] * (sj as usize + sdims[1] * sk as usize);
                out[i + dims[0] * (j + dims[1] * k)] = src[s];
            }
        }
    }
    out
}

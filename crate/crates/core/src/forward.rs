//! Slice-stack acquisition model: rigid motion, separable Gaussian point
//! spread function and block-average decimation, with its exact adjoint.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::resample::trilinear;
use crate::volume::{
    block_average, block_spread, convolve_axis, convolve_axis_transpose, gaussian_kernel, Axis, Geometry,
    RigidTransform, Volume,
};

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949;

/// Rigid motion of the subject during the acquisition of one stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Stack { transform: RigidTransform },
    /// One transform per low-resolution slice.
    PerSlice { transforms: Vec<RigidTransform> },
}

impl Motion {
    pub fn none() -> Self {
        Motion::Stack { transform: RigidTransform::identity() }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Motion::Stack { transform } => transform.is_identity(),
            Motion::PerSlice { transforms } => transforms.iter().all(|t| t.is_identity()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionModel {
    /// Through-plane (slice-select) direction.
    pub orientation: Axis,
    /// Isotropic high-resolution grid the operator acts on.
    pub hr: Geometry,
    pub in_plane_spacing: f64,
    pub slice_thickness: f64,
    pub psf_fwhm_through: f64,
    pub psf_fwhm_inplane: f64,
    pub motion: Motion,
    /// Noise level relative to the intensity sd of the imaged volume.
    pub noise_sd: f64,
}

impl AcquisitionModel {
    pub fn new(orientation: Axis, hr: Geometry) -> Self {
        let in_plane = 1.125;
        let thickness = 3.3;
        AcquisitionModel {
            orientation,
            hr,
            in_plane_spacing: in_plane,
            slice_thickness: thickness,
            psf_fwhm_through: thickness,
            psf_fwhm_inplane: 1.2 * in_plane,
            motion: Motion::none(),
            noise_sd: 0.0,
        }
    }

    /// Integer decimation factor per axis.
    pub fn factors(&self) -> Result<[usize; 3]> {
        if !self.hr.is_isotropic() {
            return Err(Error::InvalidGeometry("acquisition operators need an isotropic HR grid".into()));
        }
        let h = self.hr.spacing()[0];
        let mut f = [0usize; 3];
        for (a, fa) in f.iter_mut().enumerate() {
            let s = if a == self.orientation.index() { self.slice_thickness } else { self.in_plane_spacing };
            let r = (s / h).round();
            if !(r >= 1.0 && r.is_finite()) {
                return Err(Error::InvalidGeometry(format!("spacing {s} mm not derivable from HR spacing {h} mm")));
            }
            *fa = r as usize;
        }
        Ok(f)
    }

    /// Grid of the low-resolution stack; each LR voxel sits at the center of
    /// its HR block.
    pub fn lr_geometry(&self) -> Result<Geometry> {
        let f = self.factors()?;
        let hr_aff = self.hr.affine();
        let mut affine = hr_aff;
        for a in 0..3 {
            for r in 0..3 {
                affine[r][a] = hr_aff[r][a] * f[a] as f64;
                affine[r][3] += hr_aff[r][a] * (f[a] as f64 - 1.0) / 2.0;
            }
        }
        let dims = [0, 1, 2].map(|a| self.hr.dims()[a].div_ceil(f[a]));
        let spacing = [0, 1, 2].map(|a| self.hr.spacing()[a] * f[a] as f64);
        Geometry::new(dims, spacing, affine)
    }

    fn sigmas(&self) -> [f64; 3] {
        let h = self.hr.spacing()[0];
        [0, 1, 2].map(|a| {
            let fwhm = if a == self.orientation.index() { self.psf_fwhm_through } else { self.psf_fwhm_inplane };
            fwhm / FWHM_TO_SIGMA / h
        })
    }
}

/// Low-resolution stack and the model that explains it.
#[derive(Debug, Clone, PartialEq)]
pub struct LRStack {
    pub volume: Volume,
    pub model: AcquisitionModel,
}

struct Gather {
    idx: Vec<[u32; 8]>,
    w: Vec<[f64; 8]>,
}

/// Precomputed operator `A` of one stack on its HR grid.
pub struct StackOperator {
    hr_dims: [usize; 3],
    lr: Geometry,
    factors: [usize; 3],
    kernels: [Vec<f64>; 3],
    axis_order: [usize; 3],
    gather: Option<Gather>,
}

impl StackOperator {
    pub fn new(model: &AcquisitionModel) -> Result<Self> {
        let factors = model.factors()?;
        let lr = model.lr_geometry()?;
        for v in [model.psf_fwhm_inplane, model.psf_fwhm_through] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("PSF FWHM {v}")));
            }
        }
        let sig = model.sigmas();
        let kernels = [gaussian_kernel(sig[0]), gaussian_kernel(sig[1]), gaussian_kernel(sig[2])];
        let gather = if model.motion.is_identity() { None } else { Some(build_gather(model, &lr, factors)?) };
        let t = model.orientation.index();
        let axis_order = [t, (t + 1) % 3, (t + 2) % 3];
        Ok(StackOperator { hr_dims: model.hr.dims(), lr, factors, kernels, axis_order, gather })
    }

    pub fn lr_geometry(&self) -> &Geometry {
        &self.lr
    }

    pub fn hr_len(&self) -> usize {
        self.hr_dims.iter().product()
    }

    pub fn lr_len(&self) -> usize {
        self.lr.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut m = match &self.gather {
            None => x.to_vec(),
            Some(g) => g
                .idx
                .iter()
                .zip(&g.w)
                .map(|(ix, w)| (0..8).map(|t| w[t] * x[ix[t] as usize]).sum())
                .collect(),
        };
        // Blur and decimation on different axes commute, so each axis is
        // blurred and then decimated, through-plane first, to shrink the grid
        // early.
        let mut dims = self.hr_dims;
        for &a in &self.axis_order {
            m = convolve_axis(&m, dims, a, &self.kernels[a], true);
            let (d, nd) = block_average(&m, dims, a, self.factors[a]);
            m = d;
            dims = nd;
        }
        m
    }

    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut dims_seq = [self.hr_dims; 4];
        for (s, &a) in self.axis_order.iter().enumerate() {
            let mut d = dims_seq[s];
            d[a] = d[a].div_ceil(self.factors[a]);
            dims_seq[s + 1] = d;
        }
        let mut m = y.to_vec();
        for (s, &a) in self.axis_order.iter().enumerate().rev() {
            m = block_spread(&m, dims_seq[s + 1], dims_seq[s], a, self.factors[a]);
            m = convolve_axis_transpose(&m, dims_seq[s], a, &self.kernels[a], true);
        }
        match &self.gather {
            None => m,
            Some(g) => {
                let mut out = vec![0.0; m.len()];
                for ((ix, w), v) in g.idx.iter().zip(&g.w).zip(&m) {
                    for t in 0..8 {
                        out[ix[t] as usize] += w[t] * v;
                    }
                }
                out
            }
        }
    }
}

fn build_gather(model: &AcquisitionModel, lr: &Geometry, factors: [usize; 3]) -> Result<Gather> {
    let hr = &model.hr;
    let ax = model.orientation.index();
    let slice_inverse: Vec<_> = match &model.motion {
        Motion::Stack { transform } => vec![transform.inverse()],
        Motion::PerSlice { transforms } => {
            if transforms.len() != lr.dims()[ax] {
                return Err(Error::Parameter(format!(
                    "{} slice transforms for {} slices",
                    transforms.len(),
                    lr.dims()[ax]
                )));
            }
            transforms.iter().map(|t| t.inverse()).collect()
        }
    };
    let to_world = hr.affine3();
    let to_voxel = to_world.inverse();
    let dims = hr.dims();
    let n = hr.len();
    let mut idx = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for p in 0..n {
        let c = hr.coords(p);
        let t = if slice_inverse.len() == 1 { &slice_inverse[0] } else { &slice_inverse[c[ax] / factors[ax]] };
        let world = to_world.apply([c[0] as f64, c[1] as f64, c[2] as f64]);
        let src = to_voxel.apply(t.apply(world));
        match trilinear(src, dims) {
            Some((ix, wt)) => {
                idx.push(ix.map(|i| i as u32));
                w.push(wt);
            }
            None => {
                idx.push([0; 8]);
                w.push([0.0; 8]);
            }
        }
    }
    Ok(Gather { idx, w })
}

/// `A x` for a single model.
pub fn apply(model: &AcquisitionModel, x: &Volume) -> Result<Volume> {
    check_grid(model, x)?;
    let op = StackOperator::new(model)?;
    Volume::new(op.lr.clone(), op.forward(x.data()))
}

/// `Aᵀ y` for a single model.
pub fn apply_adjoint(model: &AcquisitionModel, y: &Volume) -> Result<Volume> {
    let op = StackOperator::new(model)?;
    if !y.geometry().approx_eq(&op.lr) {
        return Err(Error::InvalidGeometry("stack grid does not match the acquisition model".into()));
    }
    Volume::new(model.hr.clone(), op.adjoint(y.data()))
}

fn check_grid(model: &AcquisitionModel, x: &Volume) -> Result<()> {
    if !x.geometry().approx_eq(&model.hr) {
        return Err(Error::InvalidGeometry("volume grid does not match the acquisition model".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_stacks: usize,
    pub in_plane_spacing: f64,
    pub slice_thickness: f64,
    /// Defaults to the slice thickness.
    pub psf_fwhm_through: Option<f64>,
    /// Defaults to 1.2 × in-plane spacing.
    pub psf_fwhm_inplane: Option<f64>,
    pub motion_sd_deg: f64,
    pub motion_sd_mm: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub per_slice_motion: bool,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            n_stacks: 3,
            in_plane_spacing: 1.125,
            slice_thickness: 3.3,
            psf_fwhm_through: None,
            psf_fwhm_inplane: None,
            motion_sd_deg: 2.0,
            motion_sd_mm: 1.0,
            noise_sd: 0.02,
            per_slice_motion: false,
        }
    }
}

impl SimulationSpec {
    pub fn model(&self, orientation: Axis, hr: Geometry) -> AcquisitionModel {
        AcquisitionModel {
            orientation,
            hr,
            in_plane_spacing: self.in_plane_spacing,
            slice_thickness: self.slice_thickness,
            psf_fwhm_through: self.psf_fwhm_through.unwrap_or(self.slice_thickness),
            psf_fwhm_inplane: self.psf_fwhm_inplane.unwrap_or(1.2 * self.in_plane_spacing),
            motion: Motion::none(),
            noise_sd: self.noise_sd,
        }
    }
}

/// Simulates `spec.n_stacks` stacks with orientations cycling x, y, z, random
/// rigid motion and additive Gaussian noise.
pub fn simulate_stacks(x: &Volume, spec: &SimulationSpec, seed: u64) -> Result<Vec<LRStack>> {
    if spec.n_stacks == 0 {
        return Err(Error::Parameter("at least one stack is required".into()));
    }
    let mut rng = seeded(seed);
    let rot = Normal::new(0.0, spec.motion_sd_deg.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let tr = Normal::new(0.0, spec.motion_sd_mm.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let draw = |rng: &mut crate::rng::Rng| {
        let r = [0; 3].map(|_| rot.sample(rng));
        let t = [0; 3].map(|_| tr.sample(rng));
        RigidTransform::from_degrees(r, t)
    };
    let noise_abs = spec.noise_sd * x.std_dev();
    let noise = Normal::new(0.0, noise_abs.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.n_stacks);
    for s in 0..spec.n_stacks {
        let mut model = spec.model(Axis::from_index(s), x.geometry().clone());
        model.motion = if spec.per_slice_motion {
            let n = model.lr_geometry()?.dims()[model.orientation.index()];
            Motion::PerSlice { transforms: (0..n).map(|_| draw(&mut rng)).collect() }
        } else {
            Motion::Stack { transform: draw(&mut rng) }
        };
        let clean = apply(&model, x)?;
        let data = if noise_abs > 0.0 {
            clean.data().iter().map(|v| v + noise.sample(&mut rng)).collect()
        } else {
            clean.data().to_vec()
        };
        out.push(LRStack { volume: Volume::new(clean.geometry().clone(), data)?, model });
    }
    Ok(out)
}

//! Deterministic synthetic brain-like phantoms with known tissue labels.
//!
//! Anatomy is built from analytic ellipsoids and a cylinder whose sizes scale
//! with a gestational-age-like parameter. Painting order: CSF shell, cortical
//! ribbon, white matter, deep gray matter, ventricles, (corpus callosum),
//! cerebellum, brainstem. Everything but CSF is clipped to the inner cortical
//! surface so that CSF always forms the outer shell.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::volume::{convolve_axis, gaussian_kernel, Geometry, LabelMap, RawLabelMap, Volume, NUM_CLASSES};

pub const GA_MIN: f64 = 21.0;
pub const GA_MAX: f64 = 35.0;

/// Extra raw label used for the corpus callosum before it is merged into WM.
pub const CORPUS_CALLOSUM: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub ga: f64,
    pub seed: u64,
    pub grid: Geometry,
    /// Indexed by class id; background should stay at zero.
    pub class_intensities: Vec<ClassIntensity>,
    pub corpus_callosum_intensity: ClassIntensity,
    /// Relative amplitude of the multiplicative bias field.
    pub bias_amplitude: f64,
    /// Correlation length (σ, mm) of the within-class texture.
    pub texture_sigma_mm: f64,
    /// Paint a separate corpus callosum label in the raw output.
    pub corpus_callosum: bool,
}

impl PhantomParams {
    pub fn new(ga: f64, seed: u64) -> Self {
        PhantomParams {
            ga,
            seed,
            grid: Geometry::isotropic(64, 1.1).expect("static grid"),
            class_intensities: default_intensities(),
            corpus_callosum_intensity: ClassIntensity { mean: 0.62, sd: 0.04 },
            bias_amplitude: 0.2,
            texture_sigma_mm: 1.1,
            corpus_callosum: false,
        }
    }

    pub fn with_grid(mut self, grid: Geometry) -> Self {
        self.grid = grid;
        self
    }

    /// No texture noise and no bias field.
    pub fn noise_free(mut self) -> Self {
        for c in &mut self.class_intensities {
            c.sd = 0.0;
        }
        self.corpus_callosum_intensity.sd = 0.0;
        self.bias_amplitude = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(GA_MIN..=GA_MAX).contains(&self.ga) {
            return Err(Error::Parameter(format!("ga {} outside [{GA_MIN}, {GA_MAX}]", self.ga)));
        }
        if self.class_intensities.len() != NUM_CLASSES {
            return Err(Error::Parameter(format!("expected {NUM_CLASSES} class intensities")));
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(Error::Parameter("bias amplitude must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// T2-like ordering: CSF brightest, WM mid, deep gray matter darkest.
pub fn default_intensities() -> Vec<ClassIntensity> {
    let means = [0.0, 1.0, 0.40, 0.68, 0.92, 0.50, 0.32, 0.58];
    means.iter().enumerate().map(|(c, &m)| ClassIntensity { mean: m, sd: if c == 0 { 0.0 } else { 0.04 } }).collect()
}

/// Size scale relative to the oldest subject.
pub fn ga_scale(ga: f64) -> f64 {
    0.70 + 0.30 * (ga - GA_MIN) / (GA_MAX - GA_MIN)
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.c[a]) / self.r[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

struct Anatomy {
    outer: Ellipsoid,
    cortex_inner: Ellipsoid,
    wm: Ellipsoid,
    dgm: [Ellipsoid; 2],
    ventricles: [Ellipsoid; 2],
    cc: ([f64; 3], [f64; 3]),
    cerebellum: Ellipsoid,
    stem_center: [f64; 2],
    stem_radius: f64,
    stem_top: f64,
}

impl Anatomy {
    fn new(ga: f64, jitter: [f64; 3]) -> Self {
        let s = ga_scale(ga);
        let base = [22.0, 18.0, 17.0];
        let r: [f64; 3] = [0, 1, 2].map(|a| base[a] * jitter[a] * s);
        let (t_csf, t_gm) = (2.5 * s, 2.4 * s);
        let o = [0.0; 3];
        let outer = Ellipsoid { c: o, r };
        let cortex_inner = Ellipsoid { c: o, r: r.map(|v| v - t_csf) };
        let wm = Ellipsoid { c: o, r: r.map(|v| v - t_csf - t_gm) };
        let side = |sign: f64, c: [f64; 3], rr: [f64; 3]| Ellipsoid {
            c: [c[0] * r[0], sign * c[1] * r[1], c[2] * r[2]],
            r: [rr[0] * r[0], rr[1] * r[1], rr[2] * r[2]],
        };
        let dgm_c = [0.05, 0.25, -0.12];
        let dgm_r = [0.22, 0.14, 0.14];
        let ven_c = [0.02, 0.22, 0.12];
        let ven_r = [0.38, 0.10, 0.14];
        Anatomy {
            outer,
            cortex_inner,
            wm,
            dgm: [side(1.0, dgm_c, dgm_r), side(-1.0, dgm_c, dgm_r)],
            ventricles: [side(1.0, ven_c, ven_r), side(-1.0, ven_c, ven_r)],
            cc: ([-0.35 * r[0], -0.30 * r[1], 0.28 * r[2]], [0.40 * r[0], 0.30 * r[1], 0.38 * r[2]]),
            cerebellum: Ellipsoid { c: [-0.62 * r[0], 0.0, -0.50 * r[2]], r: [0.26 * r[0], 0.42 * r[1], 0.25 * r[2]] },
            stem_center: [-0.25 * r[0], 0.0],
            stem_radius: 0.13 * r[1],
            stem_top: -0.05 * r[2],
        }
    }

    fn label(&self, p: [f64; 3], with_cc: bool) -> u8 {
        if !self.outer.contains(p) {
            return 0;
        }
        if !self.cortex_inner.contains(p) {
            return 1;
        }
        let mut l = if self.wm.contains(p) { 3 } else { 2 };
        if self.wm.contains(p) {
            if self.dgm.iter().any(|e| e.contains(p)) {
                l = 6;
            }
            if self.ventricles.iter().any(|e| e.contains(p)) {
                l = 4;
            }
            if with_cc && l == 3 && (0..3).all(|a| p[a] >= self.cc.0[a] && p[a] <= self.cc.1[a]) {
                l = CORPUS_CALLOSUM;
            }
        }
        if self.cerebellum.contains(p) {
            l = 5;
        }
        let (dx, dy) = (p[0] - self.stem_center[0], p[1] - self.stem_center[1]);
        if p[2] <= self.stem_top && dx * dx + dy * dy <= self.stem_radius * self.stem_radius {
            l = 7;
        }
        l
    }
}

/// Generates the intensity volume and raw labels (class 8 marks the corpus
/// callosum when enabled).
pub fn generate_phantom_raw(p: &PhantomParams) -> Result<(Volume, RawLabelMap)> {
    p.validate()?;
    let mut rng = seeded(p.seed);
    let jitter: [f64; 3] = [0; 3].map(|_| rng.random_range(0.95..1.05));
    let phases: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let anatomy = Anatomy::new(p.ga, jitter);

    let g = &p.grid;
    let n = g.len();
    let aff = g.affine3();
    let world: Vec<[f64; 3]> = (0..n)
        .map(|idx| {
            let c = g.coords(idx);
            aff.apply([c[0] as f64, c[1] as f64, c[2] as f64])
        })
        .collect();
    let labels: Vec<u8> = world.iter().map(|&w| anatomy.label(w, p.corpus_callosum)).collect();

    let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let texture = class_texture(&noise, &labels, g, p.texture_sigma_mm);

    let extent: [f64; 3] = [0, 1, 2].map(|a| g.dims()[a] as f64 * g.spacing()[a]);
    let data: Vec<f64> = (0..n)
        .map(|idx| {
            let l = labels[idx];
            if l == 0 {
                return 0.0;
            }
            let ci = if l == CORPUS_CALLOSUM { p.corpus_callosum_intensity } else { p.class_intensities[l as usize] };
            let w = world[idx];
            let bias = 1.0
                + p.bias_amplitude
                    * (0..3).map(|a| (std::f64::consts::PI * w[a] / extent[a] + phases[a]).cos()).product::<f64>();
            bias * (ci.mean + ci.sd * texture[idx])
        })
        .collect();
    Ok((Volume::new(g.clone(), data)?, RawLabelMap::new(g.clone(), labels)?))
}

/// Generates an intensity volume and its canonical 8-class label map.
pub fn generate_phantom(p: &PhantomParams) -> Result<(Volume, LabelMap)> {
    let (v, raw) = generate_phantom_raw(p)?;
    let labels = raw.labels.iter().map(|&l| if l == CORPUS_CALLOSUM { 3 } else { l }).collect();
    Ok((v, LabelMap::new(raw.geometry, labels)?))
}

/// Unit-variance noise smoothed within each class (normalized convolution), so
/// texture never leaks across tissue boundaries.
fn class_texture(noise: &[f64], labels: &[u8], g: &Geometry, sigma_mm: f64) -> Vec<f64> {
    let dims = g.dims();
    let kernels: Vec<Vec<f64>> = (0..3).map(|a| gaussian_kernel(sigma_mm / g.spacing()[a])).collect();
    let var_factor: f64 = kernels
        .iter()
        .map(|k| {
            let s: f64 = k.iter().sum();
            k.iter().map(|v| v * v).sum::<f64>() / (s * s)
        })
        .product();
    let gain = 1.0 / var_factor.sqrt();
    let mut out = vec![0.0; noise.len()];
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for c in classes.into_iter().filter(|&c| c != 0) {
        let mask: Vec<f64> = labels.iter().map(|&l| (l == c) as u8 as f64).collect();
        let mut num: Vec<f64> = noise.iter().zip(&mask).map(|(n, m)| n * m).collect();
        let mut den = mask.clone();
        for (a, k) in kernels.iter().enumerate() {
            num = convolve_axis(&num, dims, a, k, false);
            den = convolve_axis(&den, dims, a, k, false);
        }
        for idx in 0..out.len() {
            if mask[idx] > 0.0 && den[idx] > 0.0 {
                out[idx] = (num[idx] / den[idx]) * gain * den[idx].sqrt().min(1.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSubject {
    pub id: String,
    pub ga: f64,
    pub seed: u64,
    pub volume: Volume,
    pub labels: LabelMap,
    pub raw_labels: RawLabelMap,
}

/// Gestational ages evenly covering `[lo, hi]`; a single subject sits at the
/// midpoint.
pub fn cohort_ages(n: usize, ga_range: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = ga_range;
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn subject_id(prefix: &str, i: usize) -> String {
    format!("{prefix}-{:03}", i + 1)
}

/// Builds `n` subjects with evenly spread ages and seeds derived from
/// `master_seed`; `template` supplies every other parameter.
pub fn make_cohort(n: usize, ga_range: (f64, f64), master_seed: u64, template: &PhantomParams) -> Result<Vec<CohortSubject>> {
    make_cohort_with_prefix(n, ga_range, master_seed, template, "sub")
}

pub fn make_cohort_with_prefix(
    n: usize,
    ga_range: (f64, f64),
    master_seed: u64,
    template: &PhantomParams,
    prefix: &str,
) -> Result<Vec<CohortSubject>> {
    if n == 0 {
        return Err(Error::Parameter("cohort needs at least one subject".into()));
    }
    let ages = cohort_ages(n, ga_range);
    ages.into_par_iter()
        .enumerate()
        .map(|(i, ga)| {
            let seed = derive_seed(master_seed, i as u64);
            let params = PhantomParams { ga, seed, ..template.clone() };
            let (volume, raw) = generate_phantom_raw(&params)?;
            let labels = LabelMap::new(
                raw.geometry.clone(),
                raw.labels.iter().map(|&l| if l == CORPUS_CALLOSUM { 3 } else { l }).collect(),
            )?;
            Ok(CohortSubject { id: subject_id(prefix, i), ga, seed, volume, labels, raw_labels: raw })
        })
        .collect()
}

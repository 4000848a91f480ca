//! Train-time augmentation, patch sampling and sliding-window inference.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::segmenter::{ProbField, Segmenter};
use crate::volume::{normalize, sample_affine_labels, sample_affine_linear, Affine3, LabelMap, Volume, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: [f64; 3],
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub bias_order: usize,
    /// Largest absolute log-gain of the bias field.
    pub bias_amplitude: f64,
    /// Noise sd relative to the sd of the nonzero voxels.
    pub noise_sd_rel: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: [0.5; 3],
            max_rotation_deg: 10.0,
            scale_range: (0.9, 1.1),
            bias_order: 3,
            bias_amplitude: 0.3,
            noise_sd_rel: 0.05,
        }
    }
}

impl AugmentConfig {
    /// No spatial or intensity change; the output is only normalized.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: [0.0; 3],
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            bias_order: 0,
            bias_amplitude: 0.0,
            noise_sd_rel: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("flip probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Parameter(format!("scale range ({lo}, {hi}) must be positive and ordered")));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(nonneg(self.max_rotation_deg) && nonneg(self.bias_amplitude) && nonneg(self.noise_sd_rel)) {
            return Err(Error::Parameter("augmentation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

fn legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

fn flip_axis<T: Copy>(data: &[T], dims: [usize; 3], axis: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut c = [i, j, k];
                c[axis] = dims[axis] - 1 - c[axis];
                out[i + dims[0] * (j + dims[1] * k)] = data[c[0] + dims[0] * (c[1] + dims[1] * c[2])];
            }
        }
    }
    out
}

/// Random flips, rotation and scaling (shared by volume and labels), then a
/// smooth multiplicative bias field and Gaussian noise on the volume, which is
/// finally normalized. Deterministic given `seed`.
pub fn augment_sample(v: &Volume, l: &LabelMap, cfg: &AugmentConfig, seed: u64) -> Result<(Volume, LabelMap)> {
    cfg.validate()?;
    if !v.geometry().approx_eq(l.geometry()) {
        return Err(Error::InvalidGeometry("volume and labels grids differ".into()));
    }
    let mut rng = seeded(seed);
    let g = v.geometry().clone();
    let dims = g.dims();
    let mut data = v.data().to_vec();
    let mut labels = l.labels().to_vec();

    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_prob[axis] {
            data = flip_axis(&data, dims, axis);
            labels = flip_axis(&labels, dims, axis);
        }
    }

    let max_rad = cfg.max_rotation_deg.to_radians();
    let angles = [0; 3].map(|_| if max_rad > 0.0 { rng.random_range(-max_rad..=max_rad) } else { 0.0 });
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    if angles.iter().any(|a| *a != 0.0) || scale != 1.0 {
        let r = crate::volume::RigidTransform::new(angles, [0.0; 3]).matrix();
        // Pull-back map: target point p reads the source at c + (R s)⁻¹ (p − c).
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = r[j][i] / scale;
            }
        }
        let map = Affine3::about(g.center(), inv);
        let src = Volume::from_parts_unchecked(g.clone(), data);
        data = sample_affine_linear(&src, &g, &map).into_data();
        labels = sample_affine_labels(&labels, &g, &g, &map);
    }

    if cfg.bias_amplitude > 0.0 && cfg.bias_order > 0 {
        let mut terms = Vec::new();
        for a in 0..=cfg.bias_order {
            for b in 0..=cfg.bias_order - a {
                for c in 0..=cfg.bias_order - a - b {
                    if a + b + c > 0 {
                        terms.push(([a, b, c], rng.random_range(-1.0..=1.0)));
                    }
                }
            }
        }
        let norm_coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        let field: Vec<f64> = (0..g.len())
            .map(|idx| {
                let c = g.coords(idx);
                let x = [0, 1, 2].map(|a| norm_coord(c[a], dims[a]));
                terms.iter().map(|(o, w)| w * legendre(o[0], x[0]) * legendre(o[1], x[1]) * legendre(o[2], x[2])).sum()
            })
            .collect();
        let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            for (d, f) in data.iter_mut().zip(&field) {
                *d *= (cfg.bias_amplitude * f / peak).exp();
            }
        }
    }

    if cfg.noise_sd_rel > 0.0 {
        let nz: Vec<f64> = data.iter().cloned().filter(|x| *x != 0.0).collect();
        if nz.len() > 1 {
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            let sd = (nz.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nz.len() as f64).sqrt();
            let noise = Normal::new(0.0, cfg.noise_sd_rel * sd).map_err(|e| Error::Parameter(e.to_string()))?;
            for d in data.iter_mut().filter(|d| **d != 0.0) {
                *d += noise.sample(&mut rng);
            }
        }
    }

    let out = normalize(&Volume::from_parts_unchecked(g.clone(), data))?;
    Ok((out, LabelMap::from_parts_unchecked(g, labels)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Edge length in voxels.
    pub size: usize,
    /// Fraction of a window shared with its neighbour during inference.
    pub overlap: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { size: 32, overlap: 0.5 }
    }
}

impl PatchSpec {
    pub fn full_scale() -> Self {
        PatchSpec { size: 96, overlap: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Parameter(format!("patch size {} is below 8", self.size)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Parameter(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        ((self.size as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    /// Window start positions along an axis of length `n`; the last window
    /// is clamped to end at the border.
    pub fn starts(&self, n: usize) -> Vec<usize> {
        if n <= self.size {
            return vec![0];
        }
        let mut s: Vec<usize> = (0..).map(|i| i * self.stride()).take_while(|&p| p + self.size < n).collect();
        s.push(n - self.size);
        s
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub origin: [isize; 3],
    pub volume: Volume,
    pub labels: LabelMap,
}

/// Draws `n` patches. Even-numbered draws are centred on a random
/// non-background voxel (when there is one), odd draws are uniform over the
/// valid origins. Volumes smaller than a patch are zero-padded.
pub fn sample_patches(v: &Volume, l: &LabelMap, spec: &PatchSpec, n: usize, rng: &mut Rng) -> Result<Vec<Patch>> {
    spec.validate()?;
    if !v.geometry().approx_eq(l.geometry()) {
        return Err(Error::InvalidGeometry("volume and labels grids differ".into()));
    }
    let dims = v.dims();
    let span = dims.map(|d| d.saturating_sub(spec.size));
    let foreground: Vec<usize> = (0..l.labels().len()).filter(|&i| l.labels()[i] != 0).collect();
    let size = [spec.size; 3];
    let mut out = Vec::with_capacity(n);
    for draw in 0..n {
        let origin: [isize; 3] = if draw % 2 == 0 && !foreground.is_empty() {
            let c = l.geometry().coords(foreground[rng.random_range(0..foreground.len())]);
            [0, 1, 2].map(|a| (c[a] as isize - spec.size as isize / 2).clamp(0, span[a] as isize))
        } else {
            span.map(|s| rng.random_range(0..=s) as isize)
        };
        out.push(Patch { origin, volume: v.crop(origin, size)?, labels: l.crop(origin, size)? });
    }
    Ok(out)
}

/// Tiles `v` with windows of `spec.size` at stride `size·(1 − overlap)` and
/// averages the ensemble's probabilities uniformly over covering windows.
pub fn sliding_window_predict<M: Segmenter>(v: &Volume, models: &[M], spec: &PatchSpec) -> Result<ProbField> {
    spec.validate()?;
    if models.is_empty() {
        return Err(Error::Input("at least one model is required".into()));
    }
    let dims = v.dims();
    let starts = [0, 1, 2].map(|a| spec.starts(dims[a]));
    let mut origins = Vec::new();
    for &k in &starts[2] {
        for &j in &starts[1] {
            for &i in &starts[0] {
                origins.push([i, j, k]);
            }
        }
    }
    let size = [spec.size; 3];
    let preds: Vec<ProbField> = origins
        .par_iter()
        .map(|o| M::predict_ensemble(models, &v.crop(o.map(|x| x as isize), size)?))
        .collect::<Result<_>>()?;
    let g = v.geometry();
    let mut acc = vec![0.0; g.len() * NUM_CLASSES];
    let mut hits = vec![0u32; g.len()];
    for (o, p) in origins.iter().zip(&preds) {
        let ext = [0, 1, 2].map(|a| spec.size.min(dims[a] - o[a]));
        for k in 0..ext[2] {
            for j in 0..ext[1] {
                for i in 0..ext[0] {
                    let src = i + spec.size * (j + spec.size * k);
                    let dst = g.index(o[0] + i, o[1] + j, o[2] + k);
                    hits[dst] += 1;
                    acc[dst * NUM_CLASSES..(dst + 1) * NUM_CLASSES]
                        .iter_mut()
                        .zip(p.voxel(src))
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    for (p, &h) in acc.chunks_exact_mut(NUM_CLASSES).zip(&hits) {
        let h = h as f64;
        p.iter_mut().for_each(|x| *x /= h);
    }
    ProbField::new(g.clone(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_values() {
        assert_eq!(legendre(0, 0.3), 1.0);
        assert_eq!(legendre(1, 0.3), 0.3);
        assert!((legendre(2, 0.5) - (-0.125)).abs() < 1e-15);
        assert!((legendre(3, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_starts_cover_the_axis() {
        let s = PatchSpec { size: 32, overlap: 0.5 };
        assert_eq!(s.starts(48), vec![0, 16]);
        assert_eq!(s.starts(64), vec![0, 16, 32]);
        assert_eq!(s.starts(70), vec![0, 16, 32, 38]);
        assert_eq!(s.starts(20), vec![0]);
        let s0 = PatchSpec { size: 16, overlap: 0.0 };
        assert_eq!(s0.starts(48), vec![0, 16, 32]);
    }

    #[test]
    fn invalid_specs() {
        assert!(PatchSpec { size: 4, overlap: 0.5 }.validate().is_err());
        assert!(PatchSpec { size: 16, overlap: 1.0 }.validate().is_err());
        let mut c = AugmentConfig::default();
        c.scale_range = (1.1, 0.9);
        assert!(c.validate().is_err());
        c = AugmentConfig::default();
        c.flip_prob[1] = 1.5;
        assert!(c.validate().is_err());
    }
}

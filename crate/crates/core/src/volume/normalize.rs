use super::{LabelMap, Volume};
use crate::error::{Error, Result};

/// Mean and population standard deviation of the voxels selected by `mask`.
pub fn intensity_stats(v: &Volume, mask: &[bool]) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for (x, &m) in v.data().iter().zip(mask) {
        if m {
            n += 1;
            sum += x;
        }
    }
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = v.data().iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

/// Z-score over the voxels selected by `mask`; voxels outside the mask are 0.
pub fn normalize_masked(v: &Volume, mask: &[bool]) -> Result<Volume> {
    let (mean, sd) =
        intensity_stats(v, mask).ok_or_else(|| Error::DegenerateIntensity("empty normalization support".into()))?;
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateIntensity("constant intensity over the support".into()));
    }
    let data = v.data().iter().zip(mask).map(|(&x, &m)| if m { (x - mean) / sd } else { 0.0 }).collect();
    Ok(Volume::from_parts_unchecked(v.geometry().clone(), data))
}

/// Z-score over the nonzero voxels.
pub fn normalize(v: &Volume) -> Result<Volume> {
    let mask: Vec<bool> = v.data().iter().map(|&x| x != 0.0).collect();
    normalize_masked(v, &mask)
}

/// Z-score over the brain support given by a label map (labels ≠ 0).
pub fn normalize_with_labels(v: &Volume, labels: &LabelMap) -> Result<Volume> {
    if !v.geometry().approx_eq(labels.geometry()) {
        return Err(Error::InvalidGeometry("labels and volume grids differ".into()));
    }
    let mask: Vec<bool> = labels.labels().iter().map(|&l| l != 0).collect();
    normalize_masked(v, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn two_level() -> Volume {
        let g = Geometry::isotropic(4, 1.0).unwrap();
        // 32 background, 16 at 10, 16 at 20.
        let data = (0..64).map(|i| if i < 32 { 0.0 } else if i < 48 { 10.0 } else { 20.0 }).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn support_moments_are_standardized() {
        let n = normalize(&two_level()).unwrap();
        let sup: Vec<f64> = n.data()[32..].to_vec();
        let mean = sup.iter().sum::<f64>() / 32.0;
        let sd = (sup.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 32.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((sd - 1.0).abs() < 1e-6);
        assert!(n.data()[..32].iter().all(|&x| x == 0.0));
        // Values of the two levels are exactly ±1.
        assert!((n.data()[40] + 1.0).abs() < 1e-12 && (n.data()[60] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idempotent() {
        let once = normalize(&two_level()).unwrap();
        let twice = normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let g = Geometry::isotropic(3, 1.0).unwrap();
        assert!(matches!(normalize(&Volume::filled(g.clone(), 4.0)), Err(Error::DegenerateIntensity(_))));
        assert!(matches!(normalize(&Volume::zeros(g)), Err(Error::DegenerateIntensity(_))));
    }
}

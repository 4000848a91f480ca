//! Rigid 6-DOF intensity registration (mean squared error, Nelder–Mead,
//! Gaussian pyramid) and weak label propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    resample, smooth, trilinear, warp_labels, Affine3, Interpolation, LabelMap, RigidTransform, Volume,
};

/// Fixed voxels that must map inside the moving image for a pose to be
/// scored; poses below this overlap fraction get an infinite cost.
const MIN_OVERLAP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    /// 0 is the finest level.
    pub level: usize,
    pub spacing: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Moves the moving image onto the fixed one.
    pub transform: RigidTransform,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub levels: Vec<LevelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub levels: usize,
    /// Initial simplex size at the coarsest level (mm and degrees); halved at
    /// every finer level.
    pub initial_step: f64,
    /// Simplex size (mm / degrees) at which a level stops.
    pub tolerance: f64,
    pub max_evaluations: usize,
    /// Restarts of the simplex around the current optimum on every level
    /// but the finest.
    pub restarts: usize,
    /// Extra simplex starts on the coarsest level, rotated by `±coarse_angle`
    /// degrees about each axis in turn (at most 6). The lowest cost wins.
    pub coarse_starts: usize,
    pub coarse_angle: f64,
    /// Coarse optima (lowest coarse cost first) refined down to the finest
    /// level, where the final choice is made.
    pub refined_candidates: usize,
    /// Voxel stride of the cost samples on the finest level.
    pub fine_sampling: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            initial_step: 4.0,
            tolerance: 0.05,
            max_evaluations: 100,
            restarts: 0,
            coarse_starts: 6,
            coarse_angle: 8.0,
            refined_candidates: 7,
            fine_sampling: 2,
        }
    }
}

struct Level {
    fixed: Volume,
    moving: Volume,
}

/// MSE over fixed voxels whose pre-image lies in the moving support, with
/// the number of such voxels. Only every `stride`-th voxel along each axis
/// is visited.
fn mse(fixed: &Volume, moving: &Volume, t: &RigidTransform, stride: usize) -> (f64, usize) {
    let map = moving
        .geometry()
        .affine3()
        .inverse()
        .then_after(&Affine3::from_rigid(&t.inverse()).then_after(&fixed.geometry().affine3()));
    let dims = moving.dims();
    let src = moving.data();
    let f = fixed.data();
    let [nx, ny, nz] = fixed.dims();
    let (mut total, mut count) = (0.0, 0usize);
    let di = [map.m[0][0], map.m[1][0], map.m[2][0]];
    for k in (0..nz).step_by(stride) {
        for j in (0..ny).step_by(stride) {
            let row = map.apply([0.0, j as f64, k as f64]);
            for i in (0..nx).step_by(stride) {
                let idx = i + nx * (j + ny * k);
                let c = [row[0] + di[0] * i as f64, row[1] + di[1] * i as f64, row[2] + di[2] * i as f64];
                if let Some((ix, w)) = trilinear(c, dims) {
                    let mut v = 0.0;
                    for t in 0..8 {
                        v += w[t] * src[ix[t]];
                    }
                    let d = f[idx] - v;
                    total += d * d;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        (f64::INFINITY, 0)
    } else {
        (total / count as f64, count)
    }
}

/// Pose parameters `[tx, ty, tz (mm), rx, ry, rz (deg)]`, rotating about
/// `center` and applied after `init`.
fn pose(p: &[f64; 6], center: [f64; 3], init: &RigidTransform) -> RigidTransform {
    let r = RigidTransform::from_degrees([p[3], p[4], p[5]], [0.0; 3]);
    let rc = r.apply(center);
    let t = [0, 1, 2].map(|a| center[a] - rc[a] + p[a]);
    RigidTransform { rotation: r.rotation, translation: t }.compose(init)
}

fn pyramid(v: &Volume, levels: usize) -> Result<Vec<Volume>> {
    let mut out = vec![v.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        if prev.dims().iter().any(|&d| d < 8) {
            break;
        }
        let s = smooth(prev, prev.geometry().spacing()[0]);
        let g = prev.geometry().decimated([2; 3])?;
        out.push(resample(&s, &g, Interpolation::Linear));
    }
    Ok(out)
}

struct NelderMead {
    evaluations: usize,
}

impl NelderMead {
    fn minimize(
        &mut self,
        f: &mut impl FnMut(&[f64; 6]) -> f64,
        start: [f64; 6],
        step: f64,
        tol: f64,
        max_eval: usize,
    ) -> ([f64; 6], f64) {
        let mut pts: Vec<[f64; 6]> = vec![start];
        for d in 0..6 {
            let mut p = start;
            p[d] += step;
            pts.push(p);
        }
        let mut vals: Vec<f64> = pts.iter().map(|p| self.eval(f, p)).collect();
        let budget = self.evaluations + max_eval;
        loop {
            let mut order: Vec<usize> = (0..7).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
            pts = order.iter().map(|&i| pts[i]).collect();
            vals = order.iter().map(|&i| vals[i]).collect();
            let size = pts[1..]
                .iter()
                .map(|p| (0..6).map(|d| (p[d] - pts[0][d]).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if size < tol || self.evaluations >= budget {
                return (pts[0], vals[0]);
            }
            let mut centroid = [0.0; 6];
            for p in &pts[..6] {
                for d in 0..6 {
                    centroid[d] += p[d] / 6.0;
                }
            }
            let along = |s: f64| -> [f64; 6] { std::array::from_fn(|d| centroid[d] + s * (pts[6][d] - centroid[d])) };
            let xr = along(-1.0);
            let fr = self.eval(f, &xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = self.eval(f, &xe);
                if fe < fr {
                    pts[6] = xe;
                    vals[6] = fe;
                } else {
                    pts[6] = xr;
                    vals[6] = fr;
                }
                continue;
            }
            if fr < vals[5] {
                pts[6] = xr;
                vals[6] = fr;
                continue;
            }
            let (xc, fc) = if fr < vals[6] {
                let x = along(-0.5);
                (x, self.eval(f, &x))
            } else {
                let x = along(0.5);
                (x, self.eval(f, &x))
            };
            if fc < vals[6].min(fr) {
                pts[6] = xc;
                vals[6] = fc;
                continue;
            }
            for i in 1..7 {
                let p: [f64; 6] = std::array::from_fn(|d| pts[0][d] + 0.5 * (pts[i][d] - pts[0][d]));
                pts[i] = p;
                vals[i] = self.eval(f, &p);
            }
        }
    }

    fn eval(&mut self, f: &mut impl FnMut(&[f64; 6]) -> f64, p: &[f64; 6]) -> f64 {
        self.evaluations += 1;
        f(p)
    }
}

/// Finds `t` minimizing the MSE between `fixed` and `moving` warped by `t`,
/// coarse to fine. Deterministic given its inputs.
pub fn register_rigid(
    moving: &Volume,
    fixed: &Volume,
    init: &RigidTransform,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    if cfg.levels == 0 {
        return Err(Error::Parameter("at least one pyramid level is required".into()));
    }
    let (initial_cost, overlap) = mse(fixed, moving, init, 1);
    if overlap == 0 {
        return Err(Error::NoOverlap);
    }
    let fixed_levels = pyramid(fixed, cfg.levels)?;
    let moving_levels = pyramid(moving, cfg.levels)?;
    let n_levels = fixed_levels.len().min(moving_levels.len());
    let levels: Vec<Level> = (0..n_levels)
        .map(|l| Level { fixed: fixed_levels[l].clone(), moving: moving_levels[l].clone() })
        .collect();
    let center = fixed.geometry().center();

    let cost_at = |l: usize, p: &[f64; 6]| -> f64 {
        let lv = &levels[l];
        let stride = if l == 0 { cfg.fine_sampling.max(1) } else { 1 };
        let samples: usize = lv.fixed.dims().iter().map(|d| d.div_ceil(stride)).product();
        let (c, n) = mse(&lv.fixed, &lv.moving, &pose(p, center, init), stride);
        if n < ((MIN_OVERLAP * samples as f64) as usize).max(1) {
            f64::INFINITY
        } else {
            c
        }
    };
    let step_at = |l: usize| cfg.initial_step / (1 << (n_levels - 1 - l)) as f64;
    let descend = |l: usize, start: [f64; 6], nm: &mut NelderMead| -> ([f64; 6], f64) {
        let mut cost = |p: &[f64; 6]| cost_at(l, p);
        let mut best = (start, cost(&start));
        let mut step = step_at(l);
        let restarts = if l == 0 { 0 } else { cfg.restarts };
        for _ in 0..=restarts {
            let (p, v) = nm.minimize(&mut cost, best.0, step, cfg.tolerance, cfg.max_evaluations);
            if v <= best.1 {
                best = (p, v);
            }
            step *= 0.5;
        }
        best
    };
    let summary = |l: usize, before: f64, after: f64, evaluations: usize| LevelSummary {
        level: l,
        spacing: levels[l].fixed.geometry().spacing()[0],
        cost_before: before,
        cost_after: after,
        evaluations,
    };

    // Coarsest level: the plain descent plus optional rotated starts. Each
    // distinct optimum is carried down the pyramid and judged on the finest
    // level, since coarse costs can prefer a wrong basin.
    let top = n_levels - 1;
    let mut nm = NelderMead { evaluations: 1 };
    let coarse_before = cost_at(top, &[0.0; 6]);
    let mut candidates = vec![descend(top, [0.0; 6], &mut nm)];
    for s in 0..cfg.coarse_starts.min(6) {
        let mut start = [0.0; 6];
        start[3 + s / 2] = if s % 2 == 0 { cfg.coarse_angle } else { -cfg.coarse_angle };
        let (p, v) = nm.minimize(&mut |q: &[f64; 6]| cost_at(top, q), start, step_at(top), cfg.tolerance, cfg.max_evaluations);
        let distinct = candidates.iter().all(|(c, _)| (0..6).any(|d| (c[d] - p[d]).abs() > cfg.tolerance * 10.0));
        if v.is_finite() && distinct {
            candidates.push((p, v));
        }
    }
    let coarse_evaluations = nm.evaluations;
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    candidates.truncate(cfg.refined_candidates.max(1));

    let mut chosen: Option<([f64; 6], f64, Vec<LevelSummary>)> = None;
    for (start, coarse_cost) in candidates {
        let mut summaries = vec![summary(top, coarse_before, coarse_cost, coarse_evaluations)];
        let (mut params, mut last) = (start, coarse_cost);
        for l in (0..top).rev() {
            let mut nm = NelderMead { evaluations: 1 };
            let before = cost_at(l, &params);
            (params, last) = descend(l, params, &mut nm);
            summaries.push(summary(l, before, last, nm.evaluations));
        }
        if chosen.as_ref().is_none_or(|c| last < c.1) {
            chosen = Some((params, last, summaries));
        }
    }
    let (params, _, summaries) = chosen.expect("at least one candidate");
    let mut transform = pose(&params, center, init);
    let (mut final_cost, _) = mse(fixed, moving, &transform, 1);
    if !(final_cost <= initial_cost) {
        transform = *init;
        final_cost = initial_cost;
    }
    Ok(RegistrationResult { transform, initial_cost, final_cost, levels: summaries })
}

/// Registers `src_vol` onto `dst_vol` and carries `labels_src` across with
/// nearest-neighbour interpolation. The result lives on the grid of
/// `dst_vol`.
pub fn propagate_labels(
    labels_src: &LabelMap,
    src_vol: &Volume,
    dst_vol: &Volume,
    cfg: &RegistrationConfig,
) -> Result<(LabelMap, RegistrationResult)> {
    if !labels_src.geometry().approx_eq(src_vol.geometry()) {
        return Err(Error::InvalidGeometry("source labels and volume grids differ".into()));
    }
    let reg = register_rigid(src_vol, dst_vol, &RigidTransform::identity(), cfg)?;
    let labels = warp_labels(labels_src, &reg.transform, dst_vol.geometry());
    Ok((labels, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{resample_transformed, Geometry};

    fn blob() -> Volume {
        let g = Geometry::isotropic(32, 1.5).unwrap();
        Volume::from_fn(g, |p| {
            let e = (p[0] / 12.0).powi(2) + (p[1] / 9.0).powi(2) + (p[2] / 7.0).powi(2);
            let inner = ((p[0] - 3.0) / 4.0).powi(2) + ((p[1] + 2.0) / 3.0).powi(2) + (p[2] / 3.0).powi(2);
            (if e < 1.0 { 1.0 } else { 0.0 }) + (if inner < 1.0 { 0.5 } else { 0.0 })
        })
        .unwrap()
    }

    #[test]
    fn self_registration_is_identity() {
        let v = blob();
        let r = register_rigid(&v, &v, &RigidTransform::identity(), &RegistrationConfig::default()).unwrap();
        let (a, t) = r.transform.magnitude();
        assert!(t <= 0.05 * 1.5 && a <= 0.05, "{t} {a}");
        assert!(r.final_cost <= r.initial_cost);
    }

    #[test]
    fn recovers_known_motion() {
        let v = blob();
        let truth = RigidTransform::from_degrees([0.0, 0.0, 3.0], [2.0, -1.5, 0.5]);
        let fixed = resample_transformed(&v, &truth, v.geometry(), Interpolation::Linear);
        let r = register_rigid(&v, &fixed, &RigidTransform::identity(), &RegistrationConfig::default()).unwrap();
        let err = r.transform.compose(&truth.inverse());
        let (a, t) = err.magnitude();
        assert!(t <= 0.2 * 1.5 && a <= 0.5, "{t} {a}");
    }

    #[test]
    fn disjoint_fields_of_view() {
        let v = blob();
        let far = Geometry::new([32; 3], [1.5; 3], {
            let mut a = v.geometry().affine();
            a[0][3] += 500.0;
            a
        })
        .unwrap();
        let w = Volume::new(far, v.data().to_vec()).unwrap();
        assert!(matches!(
            register_rigid(&v, &w, &RigidTransform::identity(), &RegistrationConfig::default()),
            Err(Error::NoOverlap)
        ));
    }
}

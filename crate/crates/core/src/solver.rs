//! Regularized least-squares super-resolution from several LR stacks:
//!
//! `f(x) = Σ_k ½‖A_k x − y_k‖² + w·R(x)`
//!
//! with a quadratic gradient penalty (conjugate gradients) or a Huber total
//! variation (gradient descent with Barzilai–Borwein steps and Armijo
//! backtracking).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{LRStack, Motion, StackOperator};
use crate::volume::{Geometry, RigidTransform, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularizer {
    /// `R(x) = ½‖∇x‖²`.
    TikhonovGradient,
    /// `R(x) = Σ_p h_δ(|∇x(p)|)`; `delta` defaults to 1% of the intensity sd
    /// of the stacks.
    HuberTv { delta: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightConvention {
    /// Larger λ means weaker regularization: `w = w_ref · λ_ref / λ`.
    LambdaStyle,
    /// `w = α`.
    AlphaStyle,
}

impl WeightConvention {
    pub fn tag(self) -> &'static str {
        match self {
            WeightConvention::LambdaStyle => "lambda",
            WeightConvention::AlphaStyle => "alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub regularizer: Regularizer,
    pub convention: WeightConvention,
    pub weight_value: f64,
    #[serde(default = "default_lambda_ref")]
    pub lambda_ref: f64,
    #[serde(default = "default_w_ref")]
    pub w_ref: f64,
    pub max_iters: usize,
    /// Stop when the relative objective decrease of an accepted step falls
    /// below this value.
    pub tolerance: f64,
    #[serde(default = "default_hr_spacing")]
    pub hr_spacing: f64,
}

fn default_lambda_ref() -> f64 {
    0.75
}

fn default_w_ref() -> f64 {
    0.05
}

fn default_hr_spacing() -> f64 {
    1.1
}

impl ReconConfig {
    pub fn new(regularizer: Regularizer, convention: WeightConvention, weight_value: f64) -> Self {
        ReconConfig {
            regularizer,
            convention,
            weight_value,
            lambda_ref: default_lambda_ref(),
            w_ref: default_w_ref(),
            max_iters: 200,
            tolerance: 1e-5,
            hr_spacing: default_hr_spacing(),
        }
    }

    /// Default-weight configuration of the λ-style pipeline.
    pub fn lambda_default() -> Self {
        ReconConfig::new(Regularizer::HuberTv { delta: None }, WeightConvention::LambdaStyle, 0.75)
    }

    pub fn with_weight(&self, weight_value: f64) -> Self {
        ReconConfig { weight_value, ..self.clone() }
    }

    /// Internal weight `w` multiplying the regularizer.
    pub fn derived_weight(&self) -> Result<f64> {
        derived_weight(self.convention, self.weight_value, self.lambda_ref, self.w_ref)
    }
}

pub fn derived_weight(convention: WeightConvention, value: f64, lambda_ref: f64, w_ref: f64) -> Result<f64> {
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::Parameter(format!("regularization weight {value} must be positive")));
    }
    let w = match convention {
        WeightConvention::AlphaStyle => value,
        WeightConvention::LambdaStyle => {
            if !(lambda_ref > 0.0 && w_ref > 0.0) {
                return Err(Error::Parameter("λ mapping constants must be positive".into()));
            }
            w_ref * lambda_ref / value
        }
    };
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub volume: Volume,
    /// Objective at the initial estimate followed by every accepted iterate.
    pub objective_trace: Vec<f64>,
    /// `½ Σ_k ‖A_k x − y_k‖²` at the returned estimate.
    pub data_residual: f64,
    /// `R(x)` (unweighted) at the returned estimate.
    pub regularizer_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub derived_weight: f64,
}

/// Sweep manifest record of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub convention: WeightConvention,
    pub weight: f64,
    pub derived_w: f64,
    pub regularizer: Regularizer,
    pub iterations: usize,
    pub converged: bool,
    pub data_residual: f64,
    pub regularizer_value: f64,
    pub objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub file: Option<String>,
}

impl SweepEntry {
    pub fn new(cfg: &ReconConfig, r: &ReconResult) -> Self {
        SweepEntry {
            convention: cfg.convention,
            weight: cfg.weight_value,
            derived_w: r.derived_weight,
            regularizer: cfg.regularizer,
            iterations: r.iterations,
            converged: r.converged,
            data_residual: r.data_residual,
            regularizer_value: r.regularizer_value,
            objective_trace: r.objective_trace.clone(),
            file: None,
        }
    }
}

/// Forward differences along each axis in voxel units, zero across the far
/// boundary (Neumann).
pub fn gradient(x: &[f64], dims: [usize; 3]) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = dims;
    let mut g = [vec![0.0; x.len()], vec![0.0; x.len()], vec![0.0; x.len()]];
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            for i in 0..nx {
                let p = row + i;
                if i + 1 < nx {
                    g[0][p] = x[p + 1] - x[p];
                }
                if j + 1 < ny {
                    g[1][p] = x[p + nx] - x[p];
                }
                if k + 1 < nz {
                    g[2][p] = x[p + nx * ny] - x[p];
                }
            }
        }
    }
    g
}

/// Adjoint of [`gradient`].
pub fn gradient_adjoint(g: &[Vec<f64>; 3], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut out = vec![0.0; n];
    for k in 0..nz {
        for j in 0..ny {
            let row = nx * (j + ny * k);
            for i in 0..nx {
                let p = row + i;
                if i + 1 < nx {
                    out[p] -= g[0][p];
                    out[p + 1] += g[0][p];
                }
                if j + 1 < ny {
                    out[p] -= g[1][p];
                    out[p + nx] += g[1][p];
                }
                if k + 1 < nz {
                    out[p] -= g[2][p];
                    out[p + nx * ny] += g[2][p];
                }
            }
        }
    }
    out
}

/// Mean isotropic gradient magnitude (intensity per mm); lower is smoother.
pub fn total_variation(v: &Volume) -> f64 {
    let g = gradient(v.data(), v.dims());
    let s = v.geometry().spacing();
    let total: f64 = (0..v.data().len())
        .map(|p| ((g[0][p] / s[0]).powi(2) + (g[1][p] / s[1]).powi(2) + (g[2][p] / s[2]).powi(2)).sqrt())
        .sum();
    total / v.data().len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Operators and data of one reconstruction problem.
pub struct Problem {
    geometry: Geometry,
    ops: Vec<StackOperator>,
    ys: Vec<Vec<f64>>,
    intensity_sd: f64,
}

impl Problem {
    /// Uses each stack's own acquisition model (including per-slice motion).
    pub fn from_models(stacks: &[LRStack]) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| Error::Input("no stacks to reconstruct from".into()))?;
        let geometry = first.model.hr.clone();
        let mut ops = Vec::with_capacity(stacks.len());
        let mut ys = Vec::with_capacity(stacks.len());
        for s in stacks {
            if !s.model.hr.approx_eq(&geometry) {
                return Err(Error::Input("stacks do not share a reconstruction grid".into()));
            }
            let op = StackOperator::new(&s.model)?;
            if !s.volume.geometry().approx_eq(op.lr_geometry()) {
                return Err(Error::InvalidGeometry("stack grid does not match its acquisition model".into()));
            }
            ops.push(op);
            ys.push(s.volume.data().to_vec());
        }
        let all: Vec<f64> = ys.iter().flatten().cloned().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let sd = (all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64).sqrt();
        Ok(Problem { geometry, ops, ys, intensity_sd: sd })
    }

    /// Replaces each stack's motion by the given per-stack transform.
    pub fn new(stacks: &[LRStack], transforms: &[RigidTransform]) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::Input("no stacks to reconstruct from".into()));
        }
        if transforms.len() != stacks.len() {
            return Err(Error::Input(format!("{} transforms for {} stacks", transforms.len(), stacks.len())));
        }
        let moved: Vec<LRStack> = stacks
            .iter()
            .zip(transforms)
            .map(|(s, t)| {
                let mut model = s.model.clone();
                model.motion = Motion::Stack { transform: *t };
                LRStack { volume: s.volume.clone(), model }
            })
            .collect();
        Problem::from_models(&moved)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn n(&self) -> usize {
        self.geometry.len()
    }

    fn dims(&self) -> [usize; 3] {
        self.geometry.dims()
    }

    fn residuals(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.ops
            .iter()
            .zip(&self.ys)
            .map(|(op, y)| op.forward(x).iter().zip(y).map(|(a, b)| a - b).collect())
            .collect()
    }

    fn adjoint_sum(&self, rs: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (op, r) in self.ops.iter().zip(rs) {
            for (o, v) in out.iter_mut().zip(op.adjoint(r)) {
                *o += v;
            }
        }
        out
    }

    fn data_term(rs: &[Vec<f64>]) -> f64 {
        0.5 * rs.iter().map(|r| dot(r, r)).sum::<f64>()
    }

    /// Adjoint average `Σ Aᵀy / Σ Aᵀ1`, zero where no stack reaches.
    fn initial_estimate(&self) -> Result<Vec<f64>> {
        let num = self.adjoint_sum(&self.ys);
        let ones: Vec<Vec<f64>> = self.ys.iter().map(|y| vec![1.0; y.len()]).collect();
        let den = self.adjoint_sum(&ones);
        if !den.iter().any(|&d| d > 1e-12) {
            return Err(Error::Input("stacks do not overlap the reconstruction grid".into()));
        }
        Ok(num.iter().zip(&den).map(|(a, d)| if *d > 1e-12 { a / d } else { 0.0 }).collect())
    }

    fn huber_delta(&self, delta: Option<f64>) -> Result<f64> {
        let d = delta.unwrap_or(0.01 * self.intensity_sd);
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::Parameter(format!("Huber delta {d} must be positive")));
        }
        Ok(d)
    }

    pub fn solve(&self, cfg: &ReconConfig) -> Result<ReconResult> {
        self.solve_from(cfg, None)
    }

    /// Like [`Problem::solve`], starting from `init` instead of the adjoint
    /// average (warm start along a regularization path).
    pub fn solve_from(&self, cfg: &ReconConfig, init: Option<&Volume>) -> Result<ReconResult> {
        let w = cfg.derived_weight()?;
        let h = self.geometry.spacing()[0];
        if (h - cfg.hr_spacing).abs() > 1e-4 * cfg.hr_spacing || !self.geometry.is_isotropic() {
            return Err(Error::Parameter(format!(
                "reconstruction spacing {} mm differs from the stack model grid ({h} mm)",
                cfg.hr_spacing
            )));
        }
        let x0 = match init {
            Some(v) if v.geometry().approx_eq(&self.geometry) => v.data().to_vec(),
            Some(_) => return Err(Error::InvalidGeometry("initial volume is not on the reconstruction grid".into())),
            None => self.initial_estimate()?,
        };
        let (x, trace, converged, iterations) = match cfg.regularizer {
            Regularizer::TikhonovGradient => self.conjugate_gradient(x0, w, cfg)?,
            Regularizer::HuberTv { delta } => self.huber_descent(x0, w, self.huber_delta(delta)?, cfg)?,
        };
        let rs = self.residuals(&x);
        let data_residual = Problem::data_term(&rs);
        let regularizer_value = match cfg.regularizer {
            Regularizer::TikhonovGradient => tikhonov_value(&gradient(&x, self.dims())),
            Regularizer::HuberTv { delta } => huber_value(&gradient(&x, self.dims()), self.huber_delta(delta)?),
        };
        let volume = Volume::new(self.geometry.clone(), x)
            .map_err(|_| Error::Divergence("non-finite voxel in the reconstruction".into()))?;
        Ok(ReconResult {
            volume,
            objective_trace: trace,
            data_residual,
            regularizer_value,
            converged,
            iterations,
            derived_weight: w,
        })
    }

    /// CG on `(Σ AᵀA + w ∇ᵀ∇) x = Σ Aᵀy`. Residuals and gradients are updated
    /// by recurrence so the objective of every iterate is evaluated exactly.
    fn conjugate_gradient(&self, mut x: Vec<f64>, w: f64, cfg: &ReconConfig) -> Result<(Vec<f64>, Vec<f64>, bool, usize)> {
        let dims = self.dims();
        let mut rs = self.residuals(&x);
        let mut gx = gradient(&x, dims);
        let objective = |rs: &[Vec<f64>], gx: &[Vec<f64>; 3]| Problem::data_term(rs) + w * tikhonov_value(gx);
        let mut f = finite(objective(&rs, &gx))?;
        let mut trace = vec![f];

        // r = b − H x = −(Σ Aᵀ r_k + w ∇ᵀ∇x)
        let mut r: Vec<f64> = {
            let a = self.adjoint_sum(&rs);
            let l = gradient_adjoint(&gx, dims);
            a.iter().zip(&l).map(|(u, v)| -(u + w * v)).collect()
        };
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        let r0 = rr.sqrt().max(f64::MIN_POSITIVE);
        let mut converged = rr == 0.0;
        let mut iterations = 0;
        while !converged && iterations < cfg.max_iters {
            let ap: Vec<Vec<f64>> = self.ops.iter().map(|op| op.forward(&p)).collect();
            let gp = gradient(&p, dims);
            let mut hp = self.adjoint_sum(&ap);
            for (h, v) in hp.iter_mut().zip(gradient_adjoint(&gp, dims)) {
                *h += w * v;
            }
            let php = dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let alpha = rr / php;
            let mut rs_new = rs.clone();
            for (rk, apk) in rs_new.iter_mut().zip(&ap) {
                for (a, b) in rk.iter_mut().zip(apk) {
                    *a += alpha * b;
                }
            }
            let mut gx_new = gx.clone();
            for a in 0..3 {
                for (u, v) in gx_new[a].iter_mut().zip(&gp[a]) {
                    *u += alpha * v;
                }
            }
            let f_new = finite(objective(&rs_new, &gx_new))?;
            if f_new >= f {
                // No decrease left at working precision.
                converged = true;
                break;
            }
            for (xi, pi) in x.iter_mut().zip(&p) {
                *xi += alpha * pi;
            }
            for (ri, hi) in r.iter_mut().zip(&hp) {
                *ri -= alpha * hi;
            }
            rs = rs_new;
            gx = gx_new;
            iterations += 1;
            trace.push(f_new);
            let decrease = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
            f = f_new;
            let rr_new = dot(&r, &r);
            if decrease < cfg.tolerance || rr_new.sqrt() <= 1e-13 * r0 {
                converged = true;
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
        }
        Ok((x, trace, converged, iterations))
    }

    fn huber_descent(
        &self,
        mut x: Vec<f64>,
        w: f64,
        delta: f64,
        cfg: &ReconConfig,
    ) -> Result<(Vec<f64>, Vec<f64>, bool, usize)> {
        const ARMIJO: f64 = 1e-4;
        const MAX_HALVINGS: usize = 10;
        const MAX_FAILURES: usize = 5;
        let dims = self.dims();
        let lipschitz = self.ops.len() as f64 + w * 12.0 / delta;
        let safe_step = 1.0 / lipschitz;

        let rs = self.residuals(&x);
        let gx = gradient(&x, dims);
        let mut f = finite(Problem::data_term(&rs) + w * huber_value(&gx, delta))?;
        let mut trace = vec![f];
        let mut grad = self.huber_gradient(&rs, &gx, w, delta);
        let grad_floor = 1e-12 * dot(&self.adjoint_sum(&self.ys), &self.adjoint_sum(&self.ys)).sqrt();
        let mut step = safe_step;
        let mut failures = 0;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < cfg.max_iters {
            let gg = dot(&grad, &grad);
            if gg.sqrt() <= grad_floor {
                converged = true;
                break;
            }
            let mut s = step;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let xt: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - s * g).collect();
                let rt = self.residuals(&xt);
                let gt = gradient(&xt, dims);
                let ft = finite(Problem::data_term(&rt) + w * huber_value(&gt, delta))?;
                if ft <= f - ARMIJO * s * gg {
                    accepted = Some((xt, rt, gt, ft));
                    break;
                }
                s *= 0.5;
            }
            let Some((xn, rn, gn, fn_)) = accepted else {
                failures += 1;
                if failures >= MAX_FAILURES {
                    break;
                }
                step = safe_step;
                continue;
            };
            failures = 0;
            iterations += 1;
            let grad_new = self.huber_gradient(&rn, &gn, w, delta);
            // Barzilai–Borwein step from the accepted move.
            let (mut ss, mut sy) = (0.0, 0.0);
            for p in 0..x.len() {
                let dx = xn[p] - x[p];
                ss += dx * dx;
                sy += dx * (grad_new[p] - grad[p]);
            }
            step = if sy > 0.0 && (ss / sy).is_finite() { ss / sy } else { safe_step };
            let decrease = (f - fn_) / f.abs().max(f64::MIN_POSITIVE);
            x = xn;
            grad = grad_new;
            f = fn_;
            trace.push(f);
            if decrease < cfg.tolerance {
                converged = true;
                break;
            }
        }
        Ok((x, trace, converged, iterations))
    }

    fn huber_gradient(&self, rs: &[Vec<f64>], gx: &[Vec<f64>; 3], w: f64, delta: f64) -> Vec<f64> {
        let mut scaled = gx.clone();
        for p in 0..gx[0].len() {
            let m = (gx[0][p] * gx[0][p] + gx[1][p] * gx[1][p] + gx[2][p] * gx[2][p]).sqrt();
            let s = 1.0 / m.max(delta);
            for a in 0..3 {
                scaled[a][p] *= s;
            }
        }
        let reg = gradient_adjoint(&scaled, self.dims());
        let mut out = self.adjoint_sum(rs);
        for (o, v) in out.iter_mut().zip(reg) {
            *o += w * v;
        }
        out
    }
}

fn finite(f: f64) -> Result<f64> {
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Divergence(format!("objective became {f}")))
    }
}

fn tikhonov_value(g: &[Vec<f64>; 3]) -> f64 {
    0.5 * g.iter().map(|c| dot(c, c)).sum::<f64>()
}

fn huber_value(g: &[Vec<f64>; 3], delta: f64) -> f64 {
    (0..g[0].len())
        .map(|p| {
            let m = (g[0][p] * g[0][p] + g[1][p] * g[1][p] + g[2][p] * g[2][p]).sqrt();
            if m <= delta {
                m * m / (2.0 * delta)
            } else {
                m - delta / 2.0
            }
        })
        .sum()
}

/// Reconstructs with the given per-stack transforms.
pub fn reconstruct(stacks: &[LRStack], transforms: &[RigidTransform], cfg: &ReconConfig) -> Result<ReconResult> {
    Problem::new(stacks, transforms)?.solve(cfg)
}

/// One reconstruction per weight value on a shared grid; any failure fails the
/// whole sweep. Results keep the order of `weights`.
pub fn multi_reconstruct(
    stacks: &[LRStack],
    transforms: &[RigidTransform],
    base: &ReconConfig,
    weights: &[f64],
) -> Result<Vec<(f64, ReconResult)>> {
    let problem = Problem::new(stacks, transforms)?;
    multi_reconstruct_problem(&problem, base, weights)
}

pub fn multi_reconstruct_problem(problem: &Problem, base: &ReconConfig, weights: &[f64]) -> Result<Vec<(f64, ReconResult)>> {
    if weights.is_empty() {
        return Err(Error::Parameter("empty weight list".into()));
    }
    for &v in weights {
        base.with_weight(v).derived_weight()?;
    }
    weights.par_iter().map(|&v| problem.solve(&base.with_weight(v)).map(|r| (v, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_stacks, SimulationSpec};

    #[test]
    fn weight_mapping_directions() {
        let l = |v| derived_weight(WeightConvention::LambdaStyle, v, 0.75, 0.05).unwrap();
        let a = |v| derived_weight(WeightConvention::AlphaStyle, v, 0.75, 0.05).unwrap();
        assert!((l(0.75) - 0.05).abs() < 1e-15);
        assert!(l(0.1) > l(0.75) && l(0.75) > l(1.5) && l(1.5) > l(3.0));
        assert!(a(0.01) < a(0.02) && a(0.05) < a(0.1));
        assert!(derived_weight(WeightConvention::AlphaStyle, 0.0, 0.75, 0.05).is_err());
        assert!(derived_weight(WeightConvention::LambdaStyle, -1.0, 0.75, 0.05).is_err());
    }

    #[test]
    fn gradient_adjoint_identity() {
        let dims = [4, 5, 3];
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: [Vec<f64>; 3] = [0, 1, 2].map(|a| (0..n).map(|i| ((i * 13 + a * 7) % 9) as f64 - 4.0).collect());
        let gx = gradient(&x, dims);
        let lhs: f64 = (0..3).map(|a| dot(&gx[a], &g[a])).sum();
        let rhs = dot(&x, &gradient_adjoint(&g, dims));
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn constants_are_fixed_points() {
        let g = Geometry::isotropic(12, 1.1).unwrap();
        let x = Volume::filled(g, 3.0);
        let spec = SimulationSpec { noise_sd: 0.0, motion_sd_deg: 0.0, motion_sd_mm: 0.0, ..Default::default() };
        let stacks = simulate_stacks(&x, &spec, 1).unwrap();
        let ids = vec![RigidTransform::identity(); 3];
        for reg in [Regularizer::TikhonovGradient, Regularizer::HuberTv { delta: Some(0.01) }] {
            let cfg = ReconConfig::new(reg, WeightConvention::AlphaStyle, 0.05);
            let r = reconstruct(&stacks, &ids, &cfg).unwrap();
            assert!(r.volume.data().iter().all(|v| (v - 3.0).abs() < 1e-6));
            assert!(r.converged);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let cfg = ReconConfig::lambda_default();
        assert!(matches!(reconstruct(&[], &[], &cfg), Err(Error::Input(_))));
        let g = Geometry::isotropic(9, 1.1).unwrap();
        let stacks = simulate_stacks(&Volume::filled(g, 1.0), &SimulationSpec::default(), 2).unwrap();
        assert!(matches!(reconstruct(&stacks, &[RigidTransform::identity()], &cfg), Err(Error::Input(_))));
        let far = vec![RigidTransform::translation([500.0, 0.0, 0.0]); 3];
        assert!(matches!(reconstruct(&stacks, &far, &cfg), Err(Error::Input(_))));
    }
}

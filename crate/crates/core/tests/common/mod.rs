//! Independent reference implementations used as test oracles. Everything
//! here is written from the definitions with dense matrices or exhaustive
//! enumeration, sharing no numerical code with the library.
#![allow(dead_code)]

use multirecon::forward::{AcquisitionModel, Motion};
use multirecon::volume::Geometry;

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense { rows, cols, a: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Dense::zeros(n, n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.a[r * self.cols + c] = v;
    }

    pub fn matmul(&self, o: &Dense) -> Dense {
        assert_eq!(self.cols, o.rows);
        let mut out = Dense::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let v = self.a[i * self.cols + k];
                if v == 0.0 {
                    continue;
                }
                let row = &o.a[k * o.cols..(k + 1) * o.cols];
                let dst = &mut out.a[i * o.cols..(i + 1) * o.cols];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += v * r;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.a[i * self.cols + j] * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> Dense {
        let mut t = Dense::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.a[j * self.rows + i] = self.a[i * self.cols + j];
            }
        }
        t
    }

    pub fn add_scaled(&mut self, o: &Dense, s: f64) {
        for (a, b) in self.a.iter_mut().zip(&o.a) {
            *a += s * b;
        }
    }
}

/// Solves `M x = b` for symmetric positive definite `M` (Cholesky).
pub fn solve_spd(m: &Dense, b: &[f64]) -> Vec<f64> {
    let n = m.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m.at(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        assert!(d > 0.0, "matrix not positive definite");
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m.at(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn flat(c: [usize; 3], d: [usize; 3]) -> usize {
    c[0] + d[0] * (c[1] + d[1] * c[2])
}

fn unflat(i: usize, d: [usize; 3]) -> [usize; 3] {
    [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
}

/// 1D renormalized Gaussian smoothing matrix (taps out to ceil(3σ)).
fn gauss_1d(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let mut k = vec![vec![0.0; n]; n];
    if sigma <= 0.0 {
        for (i, row) in k.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        return k;
    }
    let half = (3.0 * sigma).ceil() as i64;
    for (i, row) in k.iter_mut().enumerate() {
        let mut total = 0.0;
        for j in 0..n {
            let d = i as i64 - j as i64;
            if d.abs() <= half {
                let g = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
                row[j] = g;
                total += g;
            }
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    k
}

/// Dense operator acting along one axis of a 3D grid.
fn along_axis(dims_in: [usize; 3], dims_out: [usize; 3], axis: usize, m: &[Vec<f64>]) -> Dense {
    let nin: usize = dims_in.iter().product();
    let nout: usize = dims_out.iter().product();
    let mut out = Dense::zeros(nout, nin);
    for r in 0..nout {
        let c = unflat(r, dims_out);
        for (j, &w) in m[c[axis]].iter().enumerate() {
            if w != 0.0 {
                let mut ci = c;
                ci[axis] = j;
                out.set(r, flat(ci, dims_in), w);
            }
        }
    }
    out
}

/// Linear interpolation weights for coordinate `c` on `n` samples, zero
/// outside `[-0.5, n - 0.5]`, clamped to the edge samples inside it.
fn lin_1d(c: f64, n: usize) -> Vec<(usize, f64)> {
    if c < -0.5 - 1e-9 || c > n as f64 - 0.5 + 1e-9 {
        return vec![];
    }
    let c = c.max(0.0).min((n - 1) as f64);
    let i = c.floor() as usize;
    let f = c - i as f64;
    if i + 1 >= n || f < 1e-9 {
        return vec![(i.min(n - 1), 1.0)];
    }
    if f > 1.0 - 1e-9 {
        return vec![(i + 1, 1.0)];
    }
    vec![(i, 1.0 - f), (i + 1, f)]
}

/// Dense matrix of the motion resampling step.
fn motion_matrix(model: &AcquisitionModel, through_factor: usize) -> Dense {
    let g = &model.hr;
    let n = g.len();
    let d = g.dims();
    let mut m = Dense::zeros(n, n);
    let ax = model.orientation.index();
    for p in 0..n {
        let c = unflat(p, d);
        let t = match &model.motion {
            Motion::Stack { transform } => *transform,
            Motion::PerSlice { transforms } => transforms[c[ax] / through_factor],
        };
        let w = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
        let s = g.world_to_voxel(t.inverse().apply(w));
        for (i, wi) in lin_1d(s[0], d[0]) {
            for (j, wj) in lin_1d(s[1], d[1]) {
                for (k, wk) in lin_1d(s[2], d[2]) {
                    let q = flat([i, j, k], d);
                    m.set(p, q, m.at(p, q) + wi * wj * wk);
                }
            }
        }
    }
    m
}

/// Dense acquisition matrix `A = D_z D_y D_x B_z B_y B_x M`, assembled from
/// the model description.
pub fn dense_acquisition(model: &AcquisitionModel) -> Dense {
    let h = model.hr.spacing()[0];
    let d = model.hr.dims();
    let ax = model.orientation.index();
    let factor = |a: usize| {
        let s = if a == ax { model.slice_thickness } else { model.in_plane_spacing };
        (s / h).round() as usize
    };
    let mut a = motion_matrix(model, factor(ax));
    for axis in 0..3 {
        let fwhm = if axis == ax { model.psf_fwhm_through } else { model.psf_fwhm_inplane };
        let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt()) / h;
        a = along_axis(d, d, axis, &gauss_1d(d[axis], sigma)).matmul(&a);
    }
    let mut dims = d;
    for axis in 0..3 {
        let r = factor(axis);
        let m = dims[axis].div_ceil(r);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|b| {
                let lo = b * r;
                let hi = (lo + r).min(dims[axis]);
                (0..dims[axis]).map(|t| if t >= lo && t < hi { 1.0 / (hi - lo) as f64 } else { 0.0 }).collect()
            })
            .collect();
        let mut out = dims;
        out[axis] = m;
        a = along_axis(dims, out, axis, &rows).matmul(&a);
        dims = out;
    }
    a
}

/// Dense forward-difference gradient (Neumann boundary), stacked x, y, z.
pub fn dense_gradient(g: &Geometry) -> Dense {
    let d = g.dims();
    let n = g.len();
    let mut m = Dense::zeros(3 * n, n);
    for axis in 0..3 {
        for p in 0..n {
            let c = unflat(p, d);
            if c[axis] + 1 < d[axis] {
                let mut q = c;
                q[axis] += 1;
                m.set(axis * n + p, flat(q, d), 1.0);
                m.set(axis * n + p, p, -1.0);
            }
        }
    }
    m
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Average symmetric surface distance by exhaustive pairwise search.
pub fn brute_assd(p: &[bool], t: &[bool], d: [usize; 3], spacing: [f64; 3]) -> f64 {
    let surface = |m: &[bool]| -> Vec<[usize; 3]> {
        (0..m.len())
            .filter(|&i| m[i])
            .map(|i| unflat(i, d))
            .filter(|c| {
                (0..3).any(|a| {
                    [-1i64, 1].iter().any(|&s| {
                        let v = c[a] as i64 + s;
                        if v < 0 || v >= d[a] as i64 {
                            return true;
                        }
                        let mut q = *c;
                        q[a] = v as usize;
                        !m[flat(q, d)]
                    })
                })
            })
            .collect()
    };
    let (sp, st) = (surface(p), surface(t));
    let dist = |a: &[usize; 3], b: &[usize; 3]| {
        (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for a in &sp {
        total += st.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min);
    }
    for b in &st {
        total += sp.iter().map(|a| dist(a, b)).fold(f64::INFINITY, f64::min);
    }
    total / (sp.len() + st.len()) as f64
}

/// Two-sided signed-rank p-value by enumerating every sign assignment of the
/// nonzero absolute differences (midranks for ties).
pub fn enumerate_signed_rank(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().cloned().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let less = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    let denom = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / denom).min(1.0)
}

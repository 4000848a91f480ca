//! Separable filtering and block decimation on x-fastest 3D buffers.

use super::Volume;

/// Unnormalized Gaussian taps truncated at 3σ (σ in voxels). A non-positive σ
/// yields the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let half = (3.0 * sigma).ceil() as isize;
    (-half..=half).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect()
}

fn strides(dims: [usize; 3], axis: usize) -> (usize, usize) {
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    (dims[axis], stride)
}

/// Calls `f(start)` for the first element of every line along `axis`.
fn for_each_line(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = dims;
    match axis {
        0 => {
            for k in 0..nz {
                for j in 0..ny {
                    f(nx * (j + ny * k));
                }
            }
        }
        1 => {
            for k in 0..nz {
                for i in 0..nx {
                    f(i + nx * ny * k);
                }
            }
        }
        _ => {
            for j in 0..ny {
                for i in 0..nx {
                    f(i + nx * j);
                }
            }
        }
    }
}

/// Per-position normalizers of a truncated kernel on a line of length `n`.
fn boundary_norms(kernel: &[f64], n: usize) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    (0..n as isize)
        .map(|i| {
            (-half..=half)
                .filter(|d| (0..n as isize).contains(&(i + d)))
                .map(|d| kernel[(d + half) as usize])
                .sum()
        })
        .collect()
}

/// Convolution along one axis. With `renormalize` the kernel weights are
/// rescaled to sum to one at every output position (constants are preserved
/// up to the boundary); otherwise samples outside the grid count as zero.
pub fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], renormalize: bool) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let inv = inverse_norms(kernel, dims[axis], renormalize);
    let half = kernel.len() / 2;
    let mut out = shifted_sum(data, dims, axis, |d| kernel[(half as isize + d) as usize], half);
    scale_along(&mut out, dims, axis, &inv);
    out
}

/// Exact transpose of [`convolve_axis`].
pub fn convolve_axis_transpose(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64], renormalize: bool) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let inv = inverse_norms(kernel, dims[axis], renormalize);
    let half = kernel.len() / 2;
    let mut scaled = data.to_vec();
    scale_along(&mut scaled, dims, axis, &inv);
    shifted_sum(&scaled, dims, axis, |d| kernel[(half as isize - d) as usize], half)
}

fn inverse_norms(kernel: &[f64], n: usize, renormalize: bool) -> Vec<f64> {
    if renormalize {
        boundary_norms(kernel, n).iter().map(|v| 1.0 / v).collect()
    } else {
        vec![1.0 / kernel.iter().sum::<f64>(); n]
    }
}

/// `out[i] = Σ_d tap(d) · data[i + d]` along `axis`, `|d| ≤ half`, with
/// out-of-grid samples omitted. Inner loops run over contiguous memory.
fn shifted_sum(data: &[f64], dims: [usize; 3], axis: usize, tap: impl Fn(isize) -> f64, half: usize) -> Vec<f64> {
    let n = dims[axis];
    let inner: usize = dims[..axis].iter().product();
    let outer = data.len() / (n * inner);
    let mut out = vec![0.0; data.len()];
    let h = half as isize;
    if axis == 0 {
        for o in 0..outer {
            let line = &data[o * n..(o + 1) * n];
            let dst = &mut out[o * n..(o + 1) * n];
            for d in -h..=h {
                let t = tap(d);
                let lo = (-d).max(0) as usize;
                let hi = (n as isize - d).min(n as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                let src = &line[(lo as isize + d) as usize..(hi as isize + d) as usize];
                for (a, b) in dst[lo..hi].iter_mut().zip(src) {
                    *a += t * b;
                }
            }
        }
        return out;
    }
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let dst_start = base + i * inner;
            for d in -h..=h {
                let j = i as isize + d;
                if j < 0 || j >= n as isize {
                    continue;
                }
                let t = tap(d);
                let src_start = base + j as usize * inner;
                let dst = &mut out[dst_start..dst_start + inner];
                for (a, b) in dst.iter_mut().zip(&data[src_start..src_start + inner]) {
                    *a += t * b;
                }
            }
        }
    }
    out
}

fn scale_along(data: &mut [f64], dims: [usize; 3], axis: usize, s: &[f64]) {
    let n = dims[axis];
    let inner: usize = dims[..axis].iter().product();
    for (r, chunk) in data.chunks_mut(inner).enumerate() {
        let f = s[r % n];
        chunk.iter_mut().for_each(|v| *v *= f);
    }
}

/// Non-overlapping block average with factor `r` along `axis`; a trailing
/// partial block averages the voxels it has.
pub fn block_average(data: &[f64], dims: [usize; 3], axis: usize, r: usize) -> (Vec<f64>, [usize; 3]) {
    if r <= 1 {
        return (data.to_vec(), dims);
    }
    let mut out_dims = dims;
    out_dims[axis] = dims[axis].div_ceil(r);
    let (n, stride) = strides(dims, axis);
    let (_, out_stride) = strides(out_dims, axis);
    let m = out_dims[axis];
    let mut out = vec![0.0; out_dims[0] * out_dims[1] * out_dims[2]];
    for_each_line(out_dims, axis, |ostart| {
        let c = out_coords(ostart, out_dims);
        let start = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
        for b in 0..m {
            let lo = b * r;
            let hi = (lo + r).min(n);
            let mut s = 0.0;
            for t in lo..hi {
                s += data[start + t * stride];
            }
            out[ostart + b * out_stride] = s / (hi - lo) as f64;
        }
    });
    (out, out_dims)
}

/// Transpose of [`block_average`]: each coarse value, divided by its block
/// size, is spread over the block.
pub fn block_spread(data: &[f64], coarse_dims: [usize; 3], fine_dims: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    if r <= 1 {
        return data.to_vec();
    }
    let (n, stride) = strides(fine_dims, axis);
    let (_, cstride) = strides(coarse_dims, axis);
    let mut out = vec![0.0; fine_dims[0] * fine_dims[1] * fine_dims[2]];
    for_each_line(coarse_dims, axis, |cstart| {
        let c = out_coords(cstart, coarse_dims);
        let start = c[0] + fine_dims[0] * (c[1] + fine_dims[1] * c[2]);
        for b in 0..coarse_dims[axis] {
            let lo = b * r;
            let hi = (lo + r).min(n);
            let v = data[cstart + b * cstride] / (hi - lo) as f64;
            for t in lo..hi {
                out[start + t * stride] = v;
            }
        }
    });
    out
}

fn out_coords(idx: usize, dims: [usize; 3]) -> [usize; 3] {
    [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
}

/// Gaussian smoothing with per-axis σ in mm and boundary renormalization.
pub fn smooth(v: &Volume, sigma_mm: f64) -> Volume {
    let dims = v.dims();
    let sp = v.geometry().spacing();
    let mut data = v.data().to_vec();
    for a in 0..3 {
        let k = gaussian_kernel(sigma_mm / sp[a]);
        data = convolve_axis(&data, dims, a, &k, true);
    }
    Volume::from_parts_unchecked(v.geometry().clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 12.9898).sin() * 43758.5453 % 1.0).collect()
    }

    #[test]
    fn renormalized_convolution_preserves_constants() {
        let dims = [5, 7, 6];
        let k = gaussian_kernel(1.4);
        for axis in 0..3 {
            let out = convolve_axis(&vec![2.5; 210], dims, axis, &k, true);
            assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn convolution_transpose_identity() {
        let dims = [5, 7, 6];
        let x = pseudo(210, 1.0);
        let y = pseudo(210, 7.0);
        for axis in 0..3 {
            for renorm in [true, false] {
                let k = gaussian_kernel(1.1);
                let ax = convolve_axis(&x, dims, axis, &k, renorm);
                let aty = convolve_axis_transpose(&y, dims, axis, &k, renorm);
                assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_average_with_partial_block() {
        let dims = [1, 1, 7];
        let x: Vec<f64> = (0..7).map(|v| v as f64).collect();
        let (out, od) = block_average(&x, dims, 2, 3);
        assert_eq!(od, [1, 1, 3]);
        assert_eq!(out, vec![1.0, 4.0, 6.0]);
    }

    #[test]
    fn block_spread_is_transpose() {
        let dims = [4, 5, 8];
        for axis in 0..3 {
            let x = pseudo(160, 3.0);
            let (ax, cd) = block_average(&x, dims, axis, 3);
            let y = pseudo(ax.len(), 11.0);
            let aty = block_spread(&y, cd, dims, axis, 3);
            assert!((dot(&ax, &y) - dot(&x, &aty)).abs() < 1e-12);
        }
    }
}

//! Uniform 3-D grids: cloud-in-cell deposition, FFT convolution with a
//! compactly supported kernel, trilinear interpolation.

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::geom::Vec3;

/// Node `(i, j, k)` sits at `origin + h (i, j, k)`; `k` is the slowest index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridGeometry {
    /// Smallest grid with spacing `h` whose nodes cover `[lo, hi]`.
    pub fn covering(lo: Vec3, hi: Vec3, h: f64) -> Self {
        // at least two nodes per axis so every point has a full cell
        let dims = [0, 1, 2].map(|c| (((hi[c] - lo[c]) / h).ceil().max(0.0) as usize + 1).max(2));
        Self { origin: lo, spacing: h, dims }
    }

    /// Cube `[-r, r]^3`.
    pub fn cube(r: f64, h: f64) -> Self {
        Self::covering([-r; 3], [r; 3], h)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn node(&self, idx: usize) -> Vec3 {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        let h = self.spacing;
        [self.origin[0] + h * i as f64, self.origin[1] + h * j as f64, self.origin[2] + h * k as f64]
    }

    pub fn upper(&self) -> Vec3 {
        [0, 1, 2].map(|c| self.origin[c] + self.spacing * (self.dims[c] - 1) as f64)
    }

    pub fn contains(&self, q: Vec3) -> bool {
        let hi = self.upper();
        (0..3).all(|c| q[c] >= self.origin[c] && q[c] <= hi[c])
    }

    /// Lower corner node of the cell containing `q` and the fractional
    /// offsets inside it, or `None` outside the grid.
    #[inline]
    fn locate(&self, q: Vec3) -> Option<([usize; 3], Vec3)> {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for c in 0..3 {
            let u = (q[c] - self.origin[c]) / self.spacing;
            if !(u >= 0.0 && u <= (self.dims[c] - 1) as f64) {
                return None;
            }
            // the last node has no upper neighbour; use the cell below it
            let i = (u.floor() as usize).min(self.dims[c] - 2);
            base[c] = i;
            frac[c] = u - i as f64;
        }
        Some((base, frac))
    }

    #[inline]
    fn corners(&self, q: Vec3) -> Option<[(usize, f64); 8]> {
        let (b, f) = self.locate(q)?;
        let mut out = [(0usize, 0.0); 8];
        for (n, slot) in out.iter_mut().enumerate() {
            let (dx, dy, dz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                * (if dz == 1 { f[2] } else { 1.0 - f[2] });
            *slot = (self.index(b[0] + dx, b[1] + dy, b[2] + dz), w);
        }
        Some(out)
    }
}

/// Cloud-in-cell deposit of mass `weight` per point. Returns the index of
/// the first point outside the grid as the error.
pub fn deposit_cic(geom: &GridGeometry, points: &[Vec3], weight: f64) -> Result<Vec<f64>, usize> {
    let mut mass = vec![0.0; geom.len()];
    for (n, p) in points.iter().enumerate() {
        for (idx, w) in geom.corners(*p).ok_or(n)? {
            mass[idx] += weight * w;
        }
    }
    Ok(mass)
}

/// Node masses `rho(x) h^3` of a density.
pub fn sample_density(geom: &GridGeometry, rho: impl Fn(Vec3) -> f64) -> Vec<f64> {
    let h3 = geom.spacing.powi(3);
    (0..geom.len()).map(|i| rho(geom.node(i)) * h3).collect()
}

pub fn interpolate_scalar(geom: &GridGeometry, values: &[f64], q: Vec3) -> Option<f64> {
    Some(geom.corners(q)?.iter().map(|&(i, w)| w * values[i]).sum())
}

pub fn interpolate_vector(geom: &GridGeometry, values: &[Vec3], q: Vec3) -> Option<Vec3> {
    let mut out = [0.0; 3];
    for (i, w) in geom.corners(q)? {
        for c in 0..3 {
            out[c] += w * values[i][c];
        }
    }
    Some(out)
}

fn is_smooth(mut n: usize) -> bool {
    for p in [2, 3, 5] {
        while n.is_multiple_of(p) {
            n /= p;
        }
    }
    n == 1
}

fn next_smooth(n: usize) -> usize {
    (n.max(1)..).find(|&m| is_smooth(m)).unwrap()
}

/// In-place 3-D FFT of a `[p0, p1, p2]` array (first index fastest).
fn fft3(data: &mut [Complex<f64>], p: [usize; 3], dir: FftDirection, planner: &mut FftPlanner<f64>) {
    let stride = [1, p[0], p[0] * p[1]];
    for axis in 0..3 {
        let fft = planner.plan_fft(p[axis], dir);
        if axis == 0 {
            fft.process(data);
            continue;
        }
        let lines = data.len() / p[axis];
        let mut buf = vec![Complex::new(0.0, 0.0); data.len()];
        let starts: Vec<usize> = (0..data.len()).filter(|&i| (i / stride[axis]).is_multiple_of(p[axis])).collect();
        debug_assert_eq!(starts.len(), lines);
        for (l, &s) in starts.iter().enumerate() {
            for t in 0..p[axis] {
                buf[l * p[axis] + t] = data[s + t * stride[axis]];
            }
        }
        fft.process(&mut buf);
        for (l, &s) in starts.iter().enumerate() {
            for t in 0..p[axis] {
                data[s + t * stride[axis]] = buf[l * p[axis] + t];
            }
        }
    }
}

/// Linear (non-periodic) convolution of node masses with kernels of range
/// at most `range`: `out[n] = sum_m mass[m] kernel(x_n - x_m)`.
pub struct Convolver {
    geom: GridGeometry,
    reach: usize,
    padded: [usize; 3],
    mass_hat: Vec<Complex<f64>>,
}

impl Convolver {
    pub fn new(geom: GridGeometry, mass: &[f64], range: f64) -> Self {
        assert_eq!(mass.len(), geom.len());
        let reach = (range / geom.spacing).ceil() as usize;
        // P >= n + reach keeps wrapped images out of the stencil
        let padded = geom.dims.map(|n| next_smooth(n + reach));
        let mut mass_hat = vec![Complex::new(0.0, 0.0); padded.iter().product()];
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    mass_hat[(k * padded[1] + j) * padded[0] + i].re = mass[geom.index(i, j, k)];
                }
            }
        }
        let mut planner = FftPlanner::new();
        fft3(&mut mass_hat, padded, FftDirection::Forward, &mut planner);
        Self { geom, reach, padded, mass_hat }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn apply(&self, kernel: impl Fn(Vec3) -> f64) -> Vec<f64> {
        let p = self.padded;
        let r = self.reach as i64;
        let h = self.geom.spacing;
        let mut kern = vec![Complex::new(0.0, 0.0); self.mass_hat.len()];
        let wrap = |d: i64, n: usize| d.rem_euclid(n as i64) as usize;
        for c in -r..=r {
            for b in -r..=r {
                for a in -r..=r {
                    let v = kernel([a as f64 * h, b as f64 * h, c as f64 * h]);
                    if v != 0.0 {
                        kern[(wrap(c, p[2]) * p[1] + wrap(b, p[1])) * p[0] + wrap(a, p[0])].re = v;
                    }
                }
            }
        }
        let mut planner = FftPlanner::new();
        fft3(&mut kern, p, FftDirection::Forward, &mut planner);
        for (k, m) in kern.iter_mut().zip(&self.mass_hat) {
            *k *= *m;
        }
        fft3(&mut kern, p, FftDirection::Inverse, &mut planner);
        let norm = 1.0 / (p[0] * p[1] * p[2]) as f64;
        let g = &self.geom;
        let mut out = vec![0.0; g.len()];
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    out[g.index(i, j, k)] = kern[(k * p[1] + j) * p[0] + i].re * norm;
                }
            }
        }
        out
    }

    pub fn apply_vector(&self, kernel: impl Fn(Vec3) -> Vec3) -> Vec<Vec3> {
        let comps: Vec<Vec<f64>> = (0..3).map(|c| self.apply(|x| kernel(x)[c])).collect();
        (0..self.geom.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect()
    }
}

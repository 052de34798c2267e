//! Uniform cell list for short-range pair sums.
//!
//! Particles are bucketed by a stable counting sort, so members of a cell
//! are stored in ascending particle index and a neighbourhood query visits
//! candidates in ascending `(cell, index)` order. That order is what the
//! deterministic reductions rely on.

use crate::geom::Vec3;

/// Upper bound on the number of cells relative to the particle count; past
/// it the cell size is enlarged (which keeps every query exact).
const MAX_CELLS_PER_POINT: usize = 8;
const MIN_CELL_BUDGET: usize = 4096;

#[derive(Clone, Debug)]
pub struct CellGrid {
    origin: Vec3,
    cell_size: f64,
    dims: [usize; 3],
    /// `starts[c]..starts[c + 1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
    cell_of: Vec<usize>,
}

impl CellGrid {
    /// Build a grid over `points` whose cells are at least `min_cell_size`
    /// wide. Pairs closer than `min_cell_size` always lie in adjacent cells.
    pub fn build(points: &[Vec3], min_cell_size: f64) -> Self {
        assert!(min_cell_size > 0.0 && min_cell_size.is_finite(), "cell size must be positive");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        if points.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let budget = (MAX_CELLS_PER_POINT * points.len()).max(MIN_CELL_BUDGET);
        let mut cell_size = min_cell_size;
        let dims = loop {
            let d: Vec<usize> = (0..3).map(|c| ((hi[c] - lo[c]) / cell_size).floor() as usize + 1).collect();
            let total = d[0].saturating_mul(d[1]).saturating_mul(d[2]);
            if total <= budget {
                break [d[0], d[1], d[2]];
            }
            cell_size *= 1.5;
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut cell_of = Vec::with_capacity(points.len());
        let mut counts = vec![0usize; ncells + 1];
        for p in points {
            let mut idx = [0usize; 3];
            for c in 0..3 {
                idx[c] = (((p[c] - lo[c]) / cell_size).floor() as usize).min(dims[c] - 1);
            }
            let id = (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0];
            cell_of.push(id);
            counts[id + 1] += 1;
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0usize; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self { origin: lo, cell_size, dims, starts, order, cell_of }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_points(&self) -> usize {
        self.order.len()
    }

    pub fn cell_of(&self, i: usize) -> usize {
        self.cell_of[i]
    }

    /// Particle indices in cell `c`, ascending.
    pub fn members(&self, c: usize) -> &[usize] {
        &self.order[self.starts[c]..self.starts[c + 1]]
    }

    /// Visit every point that could lie within `range` of `q`, in ascending
    /// `(cell, index)` order. Callers filter by exact distance.
    #[inline]
    pub fn for_each_candidate(&self, q: Vec3, range: f64, mut visit: impl FnMut(usize)) {
        let reach = (range / self.cell_size).ceil().max(1.0);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for c in 0..3 {
            let x = (q[c] - self.origin[c]) / self.cell_size;
            let a = (x - reach).floor();
            let b = (x + reach).floor();
            if b < 0.0 || a > (self.dims[c] - 1) as f64 || !x.is_finite() {
                return;
            }
            lo[c] = a.max(0.0) as usize;
            hi[c] = (b as usize).min(self.dims[c] - 1);
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let row = (z * self.dims[1] + y) * self.dims[0];
                let (s, e) = (self.starts[row + lo[0]], self.starts[row + hi[0] + 1]);
                // cells lo[0]..=hi[0] of this row are contiguous in `order`
                for &i in &self.order[s..e] {
                    visit(i);
                }
            }
        }
    }

    /// Number of points `p` with `|p - q|^2 <= r^2`, skipping index `skip`.
    /// Cells entirely inside the ball are counted without visiting their
    /// members.
    pub fn count_in_ball(&self, points: &[Vec3], q: Vec3, r: f64, skip: Option<usize>) -> usize {
        let r2 = r * r;
        let cs = self.cell_size;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for c in 0..3 {
            let a = ((q[c] - r - self.origin[c]) / cs).floor();
            let b = ((q[c] + r - self.origin[c]) / cs).floor();
            if b < 0.0 || a > (self.dims[c] - 1) as f64 || !(a.is_finite() && b.is_finite()) {
                return 0;
            }
            lo[c] = a.max(0.0) as usize;
            hi[c] = (b as usize).min(self.dims[c] - 1);
        }
        // squared distance from q to the nearest and farthest point of a cell
        // along one axis, per axis index
        let axis = |c: usize, i: usize| {
            let a = self.origin[c] + i as f64 * cs - q[c];
            let b = a + cs;
            let near = if a > 0.0 {
                a
            } else if b < 0.0 {
                -b
            } else {
                0.0
            };
            let far = a.abs().max(b.abs());
            (near * near, far * far)
        };
        let mut count = 0usize;
        for z in lo[2]..=hi[2] {
            let (nz, fz) = axis(2, z);
            for y in lo[1]..=hi[1] {
                let (ny, fy) = axis(1, y);
                let row = (z * self.dims[1] + y) * self.dims[0];
                for x in lo[0]..=hi[0] {
                    let (nx, fx) = axis(0, x);
                    let cell = row + x;
                    let members = &self.order[self.starts[cell]..self.starts[cell + 1]];
                    if members.is_empty() || nx + ny + nz > r2 {
                        continue;
                    }
                    // the far corner bound carries rounding of order ulp(r^2);
                    // keep a relative guard so boundary points are checked exactly
                    if (fx + fy + fz) * (1.0 + 1e-12) < r2 {
                        count += members.len();
                        if let Some(s) = skip {
                            if self.cell_of[s] == cell {
                                count -= 1;
                            }
                        }
                    } else {
                        for &i in members {
                            if Some(i) != skip && crate::geom::norm2(crate::geom::sub(points[i], q)) <= r2 {
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        count
    }

    /// Neighbouring cell ids of `c` (including `c`) that are `>= c`, for
    /// half-stencil pair loops with range at most the cell size.
    pub fn upper_neighbours(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        let x = c % self.dims[0];
        let y = (c / self.dims[0]) % self.dims[1];
        let z = c / (self.dims[0] * self.dims[1]);
        let d = self.dims;
        (-1i64..=1).flat_map(move |dz| {
            (-1i64..=1).flat_map(move |dy| {
                (-1i64..=1).filter_map(move |dx| {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if nx < 0 || ny < 0 || nz < 0 || nx >= d[0] as i64 || ny >= d[1] as i64 || nz >= d[2] as i64 {
                        return None;
                    }
                    let id = ((nz as usize) * d[1] + ny as usize) * d[0] + nx as usize;
                    (id >= c).then_some(id)
                })
            })
        })
    }
}

//! Dense cubic voxel grids shared by the scatter, convolution and
//! trilinear-gather operations.

use crate::tape::Mat;

/// Cubic grid of `resolution³` cells spanning `[lo, hi]` on every axis.
///
/// Continuous coordinates place cell centres at integer positions
/// `0..resolution`, so the first and last centres sit on the bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFrame {
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
}

impl VoxelFrame {
    pub fn new(resolution: usize, lo: f64, hi: f64) -> Self {
        assert!(resolution >= 2, "voxel resolution must be at least 2");
        assert!(hi > lo);
        Self { resolution, lo, hi }
    }

    pub fn cells(&self) -> usize {
        self.resolution.pow(3)
    }

    fn step(&self) -> f64 {
        (self.resolution - 1) as f64 / (self.hi - self.lo)
    }

    /// Continuous cell coordinate along one axis and its derivative (zero when clamped).
    pub fn continuous(&self, x: f64) -> (f64, f64) {
        let top = (self.resolution - 1) as f64;
        let u = (x - self.lo) * self.step();
        if u < 0.0 {
            (0.0, 0.0)
        } else if u > top {
            (top, 0.0)
        } else {
            (u, self.step())
        }
    }

    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    /// Index of the cell whose centre is nearest to `p`.
    pub fn nearest_cell(&self, p: [f64; 3]) -> usize {
        let top = self.resolution - 1;
        let idx = |x: f64| (self.continuous(x).0.round() as usize).min(top);
        self.flat(idx(p[0]), idx(p[1]), idx(p[2]))
    }
}

/// Neighbour table for a 3×3×3 convolution evaluated at selected output rows.
pub struct ConvPlan {
    total: usize,
    rows: Vec<usize>,
    nbrs: Vec<u32>,
}

const NO_CELL: u32 = u32::MAX;

impl ConvPlan {
    /// `rows` are global output rows (`sample · r³ + cell`) to evaluate.
    pub fn new(frame: VoxelFrame, batch: usize, mut rows: Vec<usize>) -> Self {
        let r = frame.resolution as i64;
        let cells = frame.cells();
        rows.sort_unstable();
        rows.dedup();
        let mut nbrs = Vec::with_capacity(rows.len() * 27);
        for &row in &rows {
            let (b, cell) = (row / cells, row % cells);
            let (ix, iy, iz) = ((cell / (cells / frame.resolution)) as i64, ((cell / frame.resolution) % frame.resolution) as i64, (cell % frame.resolution) as i64);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let (x, y, z) = (ix + dx, iy + dy, iz + dz);
                        if x < 0 || y < 0 || z < 0 || x >= r || y >= r || z >= r {
                            nbrs.push(NO_CELL);
                        } else {
                            nbrs.push((b * cells + ((x * r + y) * r + z) as usize) as u32);
                        }
                    }
                }
            }
        }
        Self { total: batch * cells, rows, nbrs }
    }

    /// Plan evaluating every cell of every grid.
    pub fn dense(frame: VoxelFrame, batch: usize) -> Self {
        Self::new(frame, batch, (0..batch * frame.cells()).collect())
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn total_cells(&self) -> usize {
        self.total
    }

    pub(crate) fn im2col(&self, grid: &Mat) -> Mat {
        let cin = grid.ncols();
        let src = grid.as_slice().expect("standard layout");
        let mut col = Mat::zeros((self.rows.len(), 27 * cin));
        let dst = col.as_slice_mut().expect("standard layout");
        for (k, chunk) in self.nbrs.chunks_exact(27).enumerate() {
            for (o, &nb) in chunk.iter().enumerate() {
                if nb != NO_CELL {
                    let from = nb as usize * cin;
                    let to = k * 27 * cin + o * cin;
                    dst[to..to + cin].copy_from_slice(&src[from..from + cin]);
                }
            }
        }
        col
    }

    pub(crate) fn col2im(&self, dcol: &Mat, cin: usize) -> Mat {
        let src = dcol.as_slice().expect("standard layout");
        let mut grid = Mat::zeros((self.total, cin));
        let dst = grid.as_slice_mut().expect("standard layout");
        for (k, chunk) in self.nbrs.chunks_exact(27).enumerate() {
            for (o, &nb) in chunk.iter().enumerate() {
                if nb != NO_CELL {
                    let to = nb as usize * cin;
                    let from = k * 27 * cin + o * cin;
                    for c in 0..cin {
                        dst[to + c] += src[from + c];
                    }
                }
            }
        }
        grid
    }
}

/// Per-point corner cells and weights for trilinear interpolation.
pub struct TrilinearCache {
    cells: Vec<[usize; 8]>,
    frac: Vec<[f64; 3]>,
    slope: Vec<[f64; 3]>,
}

impl TrilinearCache {
    pub fn new(coords: &Mat, frame: VoxelFrame, batch: usize) -> Self {
        let rows = coords.nrows();
        assert_eq!(coords.ncols(), 3);
        assert!(batch > 0 && rows % batch == 0);
        let per = rows / batch;
        let top = frame.resolution - 2;
        let mut cells = Vec::with_capacity(rows);
        let mut frac = Vec::with_capacity(rows);
        let mut slope = Vec::with_capacity(rows);
        for i in 0..rows {
            let base = (i / per) * frame.cells();
            let mut i0 = [0usize; 3];
            let mut f = [0.0; 3];
            let mut d = [0.0; 3];
            for a in 0..3 {
                let (u, du) = frame.continuous(coords[[i, a]]);
                i0[a] = (u.floor() as usize).min(top);
                f[a] = u - i0[a] as f64;
                d[a] = du;
            }
            let mut c = [0usize; 8];
            for (k, slot) in c.iter_mut().enumerate() {
                let (bx, by, bz) = (k >> 2 & 1, k >> 1 & 1, k & 1);
                *slot = base + frame.flat(i0[0] + bx, i0[1] + by, i0[2] + bz);
            }
            cells.push(c);
            frac.push(f);
            slope.push(d);
        }
        Self { cells, frac, slope }
    }

    fn weights(f: &[f64; 3]) -> [f64; 8] {
        let mut w = [0.0; 8];
        for (k, slot) in w.iter_mut().enumerate() {
            let wx = if k >> 2 & 1 == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if k >> 1 & 1 == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if k & 1 == 1 { f[2] } else { 1.0 - f[2] };
            *slot = wx * wy * wz;
        }
        w
    }

    /// Sorted, de-duplicated global cells read by the interpolation.
    pub fn touched_cells(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.iter().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Re-indexes corner cells into a compact grid holding the sorted global `rows`.
    pub fn remap(mut self, rows: &[usize]) -> Self {
        for c in self.cells.iter_mut().flatten() {
            *c = rows.binary_search(c).expect("compact grid lacks a touched cell");
        }
        self
    }

    pub(crate) fn interpolate(&self, grid: &Mat) -> Mat {
        let mut out = Mat::zeros((self.cells.len(), grid.ncols()));
        for (i, (c, f)) in self.cells.iter().zip(&self.frac).enumerate() {
            let w = Self::weights(f);
            let mut o = out.row_mut(i);
            for k in 0..8 {
                if w[k] != 0.0 {
                    o.scaled_add(w[k], &grid.row(c[k]));
                }
            }
        }
        out
    }

    pub(crate) fn grad_grid(&self, g: &Mat, total: usize) -> Mat {
        let mut d = Mat::zeros((total, g.ncols()));
        for (i, (c, f)) in self.cells.iter().zip(&self.frac).enumerate() {
            let w = Self::weights(f);
            for k in 0..8 {
                d.row_mut(c[k]).scaled_add(w[k], &g.row(i));
            }
        }
        d
    }

    pub(crate) fn grad_coords(&self, g: &Mat, grid: &Mat) -> Mat {
        let mut d = Mat::zeros((self.cells.len(), 3));
        for i in 0..self.cells.len() {
            let (c, f, s) = (&self.cells[i], &self.frac[i], &self.slope[i]);
            let gi = g.row(i);
            for k in 0..8 {
                let sk = gi.dot(&grid.row(c[k]));
                if sk == 0.0 {
                    continue;
                }
                let b = [k >> 2 & 1, k >> 1 & 1, k & 1];
                let lin = |a: usize| if b[a] == 1 { f[a] } else { 1.0 - f[a] };
                let sign = |a: usize| if b[a] == 1 { 1.0 } else { -1.0 };
                d[[i, 0]] += sk * sign(0) * lin(1) * lin(2) * s[0];
                d[[i, 1]] += sk * lin(0) * sign(1) * lin(2) * s[1];
                d[[i, 2]] += sk * lin(0) * lin(1) * sign(2) * s[2];
            }
        }
        d
    }
}

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::params::{ParamId, ParamStore};
use crate::voxel::{ConvPlan, TrilinearCache, VoxelFrame};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<Vec<usize>>),
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, usize),
    ScatterMean(Var, Rc<Vec<usize>>, Rc<Vec<f64>>),
    Conv3d(Var, Var, Rc<ConvPlan>),
    Trilinear(Var, Var, Rc<TrilinearCache>),
    Idw(Var, Var, Var, Rc<Vec<[usize; 3]>>),
    Attention(Var, Var, Var, usize, usize, Vec<Mat>),
    Sum(Var),
    SoftmaxXent(Var, Rc<Vec<usize>>, Mat),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::Conv3d(a, b, _)
            | Op::Trilinear(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::SegmentMax(a, _)
            | Op::SegmentMean(a, _)
            | Op::ScatterMean(a, _, _)
            | Op::Sum(a)
            | Op::SoftmaxXent(a, _, _) => vec![*a],
            Op::Idw(a, b, c, _) | Op::Attention(a, b, c, _, _, _) => vec![*a, *b, *c],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Records a computation over dense matrices for reverse-mode differentiation.
///
/// Every value is a row-major 2D matrix. Batched point sets are stacked
/// along rows, with fixed-length segments per sample.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn std_layout(m: Mat) -> Mat {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: std_layout(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input leaf whose gradient is kept after [`Tape::backward`].
    pub fn variable(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value: std_layout(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row` where `row` is `1 × cols`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a * row` where `row` is `1 × cols`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a single row");
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    /// `a * col` where `col` is `rows × 1`, broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects a single column");
        let out = self.value(a) * self.value(col);
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) + k;
        self.push(out, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// Row gather: `out[i] = a[index[i]]`.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut out = Mat::zeros((index.len(), cols));
        for (i, &j) in index.iter().enumerate() {
            out.row_mut(i).assign(&src.row(j));
        }
        self.push(out, Op::Gather(a, index))
    }

    /// Max over consecutive groups of `seg` rows.
    pub fn segment_max(&mut self, a: Var, seg: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.dim();
        assert!(seg > 0 && rows % seg == 0, "segment_max: {rows} rows not divisible by {seg}");
        let groups = rows / seg;
        let mut out = Mat::from_elem((groups, cols), f64::NEG_INFINITY);
        let mut arg = vec![0usize; groups * cols];
        for g in 0..groups {
            for r in g * seg..(g + 1) * seg {
                for c in 0..cols {
                    let x = src[[r, c]];
                    if x > out[[g, c]] {
                        out[[g, c]] = x;
                        arg[g * cols + c] = r;
                    }
                }
            }
        }
        self.push(out, Op::SegmentMax(a, arg))
    }

    /// Mean over consecutive groups of `seg` rows.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.dim();
        assert!(seg > 0 && rows % seg == 0);
        let groups = rows / seg;
        let mut out = Mat::zeros((groups, cols));
        for r in 0..rows {
            let mut o = out.row_mut(r / seg);
            o += &src.row(r);
        }
        out /= seg as f64;
        self.push(out, Op::SegmentMean(a, seg))
    }

    /// Mean of the rows of `a` routed to each of `out_rows` targets; empty targets are zero.
    pub fn scatter_mean(&mut self, a: Var, index: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), index.len());
        let mut out = Mat::zeros((out_rows, src.ncols()));
        let mut counts = vec![0.0; out_rows];
        for (i, &j) in index.iter().enumerate() {
            let mut o = out.row_mut(j);
            o += &src.row(i);
            counts[j] += 1.0;
        }
        let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
        for (j, k) in inv.iter().enumerate() {
            if *k != 1.0 {
                let mut o = out.row_mut(j);
                o *= *k;
            }
        }
        self.push(out, Op::ScatterMean(a, index, Rc::new(inv)))
    }

    /// 3×3×3 zero-padded convolution over batched cubic grids.
    ///
    /// `weight` is `(27·c_in) × c_out`. Only the rows listed in the plan are
    /// evaluated, and the output holds them compactly in plan order.
    pub fn conv3d(&mut self, grid: Var, weight: Var, plan: Rc<ConvPlan>) -> Var {
        let g = self.value(grid);
        let w = self.value(weight);
        let cin = g.ncols();
        assert_eq!(w.nrows(), 27 * cin, "conv3d weight rows must be 27 × input width");
        assert_eq!(g.nrows(), plan.total_cells());
        let out = plan.im2col(g).dot(w);
        self.push(out, Op::Conv3d(grid, weight, plan))
    }

    /// Trilinear interpolation of grid features at continuous coordinates.
    ///
    /// `coords` is `(batch·n) × 3`; the sample of row `i` is `i / n`.
    pub fn trilinear(&mut self, grid: Var, coords: Var, frame: VoxelFrame, batch: usize) -> Var {
        let cache = Rc::new(TrilinearCache::new(self.value(coords), frame, batch));
        assert_eq!(self.shape(grid).0, batch * frame.cells());
        self.trilinear_with(grid, coords, cache)
    }

    /// [`Tape::trilinear`] over a compact grid whose row `k` holds global cell `rows[k]`.
    ///
    /// `rows` must be sorted and contain every cell the interpolation touches,
    /// as a [`ConvPlan`] built from [`TrilinearCache::touched_cells`] does.
    pub fn trilinear_rows(&mut self, grid: Var, coords: Var, frame: VoxelFrame, batch: usize, rows: &[usize]) -> Var {
        assert_eq!(self.shape(grid).0, rows.len());
        let cache = Rc::new(TrilinearCache::new(self.value(coords), frame, batch).remap(rows));
        self.trilinear_with(grid, coords, cache)
    }

    fn trilinear_with(&mut self, grid: Var, coords: Var, cache: Rc<TrilinearCache>) -> Var {
        let out = cache.interpolate(self.value(grid));
        self.push(out, Op::Trilinear(grid, coords, cache))
    }

    /// Inverse squared-distance interpolation from `src` rows onto `dst` positions
    /// using three precomputed neighbours per destination row.
    pub fn idw(&mut self, feats: Var, src_pos: Var, dst_pos: Var, nbrs: Rc<Vec<[usize; 3]>>) -> Var {
        let f = self.value(feats);
        let sp = self.value(src_pos);
        let dp = self.value(dst_pos);
        assert_eq!(dp.nrows(), nbrs.len());
        let mut out = Mat::zeros((dp.nrows(), f.ncols()));
        for (i, nb) in nbrs.iter().enumerate() {
            let w = idw_weights(dp, sp, i, nb);
            let total: f64 = w.iter().sum();
            let mut o = out.row_mut(i);
            for (k, &j) in nb.iter().enumerate() {
                o.scaled_add(w[k] / total, &f.row(j));
            }
        }
        self.push(out, Op::Idw(feats, src_pos, dst_pos, nbrs))
    }

    /// Softmax self-attention within each segment of `seg` rows.
    ///
    /// `q`, `k`, `v` share width `heads · d`; heads occupy contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seg: usize, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qm.dim();
        assert!(rows % seg == 0 && width % heads == 0);
        assert_eq!(km.dim(), qm.dim());
        assert_eq!(vm.nrows(), rows);
        let d = width / heads;
        let dv = vm.ncols() / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Mat::zeros((rows, vm.ncols()));
        let mut probs = Vec::with_capacity(rows / seg * heads);
        for b in 0..rows / seg {
            let r = b * seg..(b + 1) * seg;
            for h in 0..heads {
                let qs = qm.slice(s![r.clone(), h * d..(h + 1) * d]);
                let ks = km.slice(s![r.clone(), h * d..(h + 1) * d]);
                let vs = vm.slice(s![r.clone(), h * dv..(h + 1) * dv]);
                let mut p = qs.dot(&ks.t()) * scale;
                for mut row in p.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    row.mapv_inplace(|x| (x - m).exp());
                    let z = row.sum();
                    row /= z;
                }
                out.slice_mut(s![r.clone(), h * dv..(h + 1) * dv]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention(q, k, v, seg, heads, probs))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, one matrix per (segment, head).
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention(_, _, _, _, _, p) => Some(p),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn softmax_xent(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        let mut probs = l.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
            loss -= row[targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= l.nrows() as f64;
        self.push(Mat::from_elem((1, 1), loss), Op::SoftmaxXent(logits, targets, probs))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward expects a scalar root");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.needs(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g * val(*b));
                }
                if self.needs(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.needs(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.needs(*a) {
                    acc(*a, g * val(*r));
                }
                if self.needs(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if self.needs(*a) {
                    acc(*a, g * val(*c));
                }
                if self.needs(*c) {
                    acc(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(val(*a)).and(out).for_each(|d, &x, &y| {
                    let s = if x.abs() > 1e-3 { y / x } else { sigmoid(x) };
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * out),
            Op::Square(a) => acc(*a, g * val(*a) * 2.0),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.needs(*p) {
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = val(*a);
                let mut d = Mat::zeros(src.dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::Gather(a, index) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (i, &j) in index.iter().enumerate() {
                    let mut row = d.row_mut(j);
                    row += &g.row(i);
                }
                acc(*a, d);
            }
            Op::SegmentMax(a, arg) => {
                let mut d = Mat::zeros(val(*a).dim());
                let cols = g.ncols();
                for (k, &r) in arg.iter().enumerate() {
                    d[[r, k % cols]] += g[[k / cols, k % cols]];
                }
                acc(*a, d);
            }
            Op::SegmentMean(a, seg) => {
                let src = val(*a);
                let mut d = Mat::zeros(src.dim());
                let k = 1.0 / *seg as f64;
                for r in 0..src.nrows() {
                    d.row_mut(r).scaled_add(k, &g.row(r / seg));
                }
                acc(*a, d);
            }
            Op::ScatterMean(a, index, inv) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (i, &j) in index.iter().enumerate() {
                    d.row_mut(i).scaled_add(inv[j], &g.row(j));
                }
                acc(*a, d);
            }
            Op::Conv3d(grid, weight, plan) => {
                let gv = val(*grid);
                let w = val(*weight);
                if self.needs(*weight) {
                    let col = plan.im2col(gv);
                    acc(*weight, col.t().dot(g));
                }
                if self.needs(*grid) {
                    let dcol = g.dot(&w.t());
                    acc(*grid, plan.col2im(&dcol, gv.ncols()));
                }
            }
            Op::Trilinear(grid, coords, cache) => {
                if self.needs(*grid) {
                    acc(*grid, cache.grad_grid(g, val(*grid).nrows()));
                }
                if self.needs(*coords) {
                    acc(*coords, cache.grad_coords(g, val(*grid)));
                }
            }
            Op::Idw(feats, src_pos, dst_pos, nbrs) => {
                let f = val(*feats);
                let sp = val(*src_pos);
                let dp = val(*dst_pos);
                let mut df = Mat::zeros(f.dim());
                let mut dsp = Mat::zeros(sp.dim());
                let mut ddp = Mat::zeros(dp.dim());
                let want_pos = self.needs(*src_pos) || self.needs(*dst_pos);
                for (i, nb) in nbrs.iter().enumerate() {
                    let w = idw_weights(dp, sp, i, nb);
                    let total: f64 = w.iter().sum();
                    let gi = g.row(i);
                    let mut dhat = [0.0; 3];
                    for (k, &j) in nb.iter().enumerate() {
                        df.row_mut(j).scaled_add(w[k] / total, &gi);
                        dhat[k] = gi.dot(&f.row(j));
                    }
                    if !want_pos {
                        continue;
                    }
                    let mean: f64 = (0..3).map(|k| w[k] / total * dhat[k]).sum();
                    for (k, &j) in nb.iter().enumerate() {
                        // d out / d w_k, then w_k = 1 / (d2 + eps)
                        let dw = (dhat[k] - mean) / total;
                        let dd2 = -dw * w[k] * w[k];
                        for c in 0..3 {
                            let diff = dp[[i, c]] - sp[[j, c]];
                            ddp[[i, c]] += dd2 * 2.0 * diff;
                            dsp[[j, c]] -= dd2 * 2.0 * diff;
                        }
                    }
                }
                acc(*feats, df);
                acc(*src_pos, dsp);
                acc(*dst_pos, ddp);
            }
            Op::Attention(q, k, v, seg, heads, probs) => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let rows = qm.nrows();
                let d = qm.ncols() / heads;
                let dv = vm.ncols() / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Mat::zeros(qm.dim());
                let mut dk = Mat::zeros(km.dim());
                let mut dvm = Mat::zeros(vm.dim());
                for b in 0..rows / seg {
                    let r = b * seg..(b + 1) * seg;
                    for h in 0..*heads {
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), h * dv..(h + 1) * dv]);
                        let vs = vm.slice(s![r.clone(), h * dv..(h + 1) * dv]);
                        dvm.slice_mut(s![r.clone(), h * dv..(h + 1) * dv]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let tot = row.sum();
                            row.scaled_add(-tot, &prow);
                        }
                        ds *= scale;
                        let qs = qm.slice(s![r.clone(), h * d..(h + 1) * d]);
                        let ks = km.slice(s![r.clone(), h * d..(h + 1) * d]);
                        dq.slice_mut(s![r.clone(), h * d..(h + 1) * d]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![r.clone(), h * d..(h + 1) * d]).assign(&ds.t().dot(&qs));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dvm);
            }
            Op::Sum(a) => {
                let k = g[[0, 0]];
                acc(*a, Mat::from_elem(val(*a).dim(), k));
            }
            Op::SoftmaxXent(logits, targets, probs) => {
                let k = g[[0, 0]] / probs.nrows() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                d *= k;
                acc(*logits, d);
            }
        }
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(id, v)| (*id, *v))
    }
}

pub(crate) const IDW_EPS: f64 = 1e-8;

fn idw_weights(dst: &Mat, src: &Mat, i: usize, nb: &[usize; 3]) -> [f64; 3] {
    let mut w = [0.0; 3];
    for (k, &j) in nb.iter().enumerate() {
        let d2: f64 = (0..3).map(|c| (dst[[i, c]] - src[[j, c]]).powi(2)).sum();
        w[k] = 1.0 / (d2 + IDW_EPS);
    }
    w
}

/// Result of a reverse pass: gradients for leaves that required them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter bound on `tape`, sorted by parameter id.
    pub fn params(&self, tape: &Tape) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = tape
            .param_vars()
            .filter_map(|(id, v)| self.wrt(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! A [`Tape`] records eager operations; [`Tape::backward`] replays them in
//! reverse with hand-derived adjoints. The op set covers exactly what the
//! model needs (embedding lookups, linear algebra, RMS normalization,
//! rotary encodings, masked softmax, frame transforms, cross-entropy), so
//! every backward rule can be checked against central finite differences.
//! Training runs at f32; gradient checks instantiate the same graph at f64.

use ndarray::{s, Array2};
use std::rc::Rc;

use crate::frame::Frame;
use crate::maskgen::AttentionMask;

const RMS_EPS: f64 = 1e-12;
const ROPE_BASE: f64 = 10000.0;

/// Element type for all tensor math.
pub trait Scalar:
    num_traits::Float
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    /// `[r×c] + [1×c]` broadcast over rows.
    AddBias(TensorId, TensorId),
    Scale(TensorId, F),
    Matmul(TensorId, TensorId),
    /// `a · bᵀ`
    MatmulNt(TensorId, TensorId),
    Embed {
        table: TensorId,
        ids: Vec<usize>,
    },
    Gelu(TensorId),
    RmsNorm {
        src: TensorId,
        gain: TensorId,
    },
    /// Per-head unit-RMS normalization (no gain).
    UnitRms {
        src: TensorId,
        head_dim: usize,
    },
    Rope {
        src: TensorId,
        idx: Rc<Vec<i64>>,
        head_dim: usize,
    },
    /// The mask itself is not stored: the output already carries exact
    /// zeros at disallowed keys, which the adjoint preserves.
    MaskedSoftmax {
        src: TensorId,
    },
    Softplus(TensorId),
    /// Multiply a matrix by a `[1×1]` node.
    ScaleByScalar {
        src: TensorId,
        scalar: TensorId,
    },
    Slice {
        src: TensorId,
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    /// Per-row affine map by a rigid frame, applied to each 3-column group.
    FrameApply {
        src: TensorId,
        frames: Rc<Vec<Frame<F>>>,
    },
    FrameApplyInv {
        src: TensorId,
        frames: Rc<Vec<Frame<F>>>,
    },
    /// `out[i][j] = Σ_p ‖a_i^p − b_j^p‖²` over 3-column groups.
    PairSqDist {
        a: TensorId,
        b: TensorId,
    },
    /// Euclidean norm of each `group`-column block per row.
    RowGroupNorm {
        src: TensorId,
        group: usize,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Rc<Vec<Option<usize>>>,
        weights: Rc<Vec<F>>,
    },
}

pub struct Tape<F: Scalar> {
    values: Vec<Array2<F>>,
    ops: Vec<Op<F>>,
}

pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: TensorId) -> Option<&Array2<F>> {
        self.grads[id.0].as_ref()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Array2<F> {
        &self.values[id.0]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> TensorId {
        // Op kernels index rows as contiguous slices; keep every stored
        // value in standard layout.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.values.push(value);
        self.ops.push(op);
        TensorId(self.values.len() - 1)
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Array2<F>) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        debug_assert_eq!(self.values[bias.0].nrows(), 1);
        let v = &self.values[a.0] + &self.values[bias.0].row(0);
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> TensorId {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.values[a.0].dot(&self.values[b.0].t());
        self.push(v, Op::MatmulNt(a, b))
    }

    pub fn embed(&mut self, table: TensorId, ids: Vec<usize>) -> TensorId {
        let t = &self.values[table.0];
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        self.push(v, Op::Embed { table, ids })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(gelu_fwd);
        self.push(v, Op::Gelu(a))
    }

    pub fn rms_norm(&mut self, src: TensorId, gain: TensorId) -> TensorId {
        let x = &self.values[src.0];
        let g = &self.values[gain.0];
        debug_assert_eq!(g.nrows(), 1);
        debug_assert_eq!(g.ncols(), x.ncols());
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let r = row_rms(row.as_slice().unwrap());
            let inv = F::one() / r;
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x * inv * g[(0, j)];
            }
        }
        self.push(v, Op::RmsNorm { src, gain })
    }

    pub fn unit_rms(&mut self, src: TensorId, head_dim: usize) -> TensorId {
        let x = &self.values[src.0];
        debug_assert_eq!(x.ncols() % head_dim, 0);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let row = row.as_slice_mut().unwrap();
            for seg in row.chunks_mut(head_dim) {
                let r = row_rms(seg);
                let inv = F::one() / r;
                for x in seg.iter_mut() {
                    *x = *x * inv;
                }
            }
        }
        self.push(v, Op::UnitRms { src, head_dim })
    }

    pub fn rope(&mut self, src: TensorId, idx: Rc<Vec<i64>>, head_dim: usize) -> TensorId {
        let x = &self.values[src.0];
        debug_assert_eq!(x.nrows(), idx.len());
        debug_assert_eq!(head_dim % 2, 0);
        debug_assert_eq!(x.ncols() % head_dim, 0);
        let angles = rope_angles(head_dim);
        let mut v = x.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let m = idx[i] as f64;
            let row = row.as_slice_mut().unwrap();
            for seg in row.chunks_mut(head_dim) {
                for (t, pair) in seg.chunks_mut(2).enumerate() {
                    let ang = m * angles[t];
                    let (sin, cos) = (F::from_f64(ang.sin()), F::from_f64(ang.cos()));
                    let (x0, x1) = (pair[0], pair[1]);
                    pair[0] = x0 * cos - x1 * sin;
                    pair[1] = x0 * sin + x1 * cos;
                }
            }
        }
        self.push(v, Op::Rope { src, idx, head_dim })
    }

    pub fn masked_softmax(&mut self, src: TensorId, mask: Option<Rc<AttentionMask>>) -> TensorId {
        let x = &self.values[src.0];
        if let Some(m) = &mask {
            debug_assert_eq!(m.len(), x.nrows());
            debug_assert_eq!(m.len(), x.ncols());
        }
        let mut v = x.clone();
        for (q, mut row) in v.rows_mut().into_iter().enumerate() {
            let allow = |k: usize| mask.as_ref().map_or(true, |m| m.allowed(q, k));
            let mut mx = F::neg_infinity();
            for (k, x) in row.iter().enumerate() {
                if allow(k) && *x > mx {
                    mx = *x;
                }
            }
            let mut sum = F::zero();
            for (k, x) in row.iter_mut().enumerate() {
                if allow(k) {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                } else {
                    *x = F::zero();
                }
            }
            let inv = F::one() / sum;
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        self.push(v, Op::MaskedSoftmax { src })
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let v = self.values[a.0].mapv(|x| {
            let xf = x.as_f64();
            F::from_f64(if xf > 0.0 {
                xf + (-xf).exp().ln_1p()
            } else {
                xf.exp().ln_1p()
            })
        });
        self.push(v, Op::Softplus(a))
    }

    pub fn scale_by_scalar(&mut self, src: TensorId, scalar: TensorId) -> TensorId {
        debug_assert_eq!(self.values[scalar.0].len(), 1);
        let c = self.values[scalar.0][(0, 0)];
        let v = self.values[src.0].mapv(|x| x * c);
        self.push(v, Op::ScaleByScalar { src, scalar })
    }

    pub fn slice(&mut self, src: TensorId, r0: usize, r1: usize, c0: usize, c1: usize) -> TensorId {
        let v = self.values[src.0].slice(s![r0..r1, c0..c1]).to_owned();
        self.push(v, Op::Slice { src, r0, r1, c0, c1 })
    }

    pub fn concat_cols(&mut self, parts: Vec<TensorId>) -> TensorId {
        let rows = self.values[parts[0].0].nrows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut c = 0;
        for p in &parts {
            let part = &self.values[p.0];
            v.slice_mut(s![.., c..c + part.ncols()]).assign(part);
            c += part.ncols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<TensorId>) -> TensorId {
        let cols = self.values[parts[0].0].ncols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut r = 0;
        for p in &parts {
            let part = &self.values[p.0];
            v.slice_mut(s![r..r + part.nrows(), ..]).assign(part);
            r += part.nrows();
        }
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn frame_apply(&mut self, src: TensorId, frames: Rc<Vec<Frame<F>>>) -> TensorId {
        let x = &self.values[src.0];
        debug_assert_eq!(x.nrows(), frames.len());
        debug_assert_eq!(x.ncols() % 3, 0);
        let mut v = x.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let f = &frames[i];
            for p in row.as_slice_mut().unwrap().chunks_mut(3) {
                let y = f.apply([p[0], p[1], p[2]]);
                p.copy_from_slice(&y);
            }
        }
        self.push(v, Op::FrameApply { src, frames })
    }

    pub fn frame_apply_inv(&mut self, src: TensorId, frames: Rc<Vec<Frame<F>>>) -> TensorId {
        let x = &self.values[src.0];
        debug_assert_eq!(x.nrows(), frames.len());
        let mut v = x.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let f = &frames[i];
            for p in row.as_slice_mut().unwrap().chunks_mut(3) {
                let y = f.apply_inverse([p[0], p[1], p[2]]);
                p.copy_from_slice(&y);
            }
        }
        self.push(v, Op::FrameApplyInv { src, frames })
    }

    pub fn pair_sq_dist(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let xa = &self.values[a.0];
        let xb = &self.values[b.0];
        debug_assert_eq!(xa.ncols(), xb.ncols());
        let mut v = Array2::zeros((xa.nrows(), xb.nrows()));
        for i in 0..xa.nrows() {
            let ra = xa.row(i);
            let ra = ra.as_slice().unwrap();
            for j in 0..xb.nrows() {
                let rb = xb.row(j);
                let rb = rb.as_slice().unwrap();
                let mut acc = F::zero();
                for (x, y) in ra.iter().zip(rb) {
                    let d = *x - *y;
                    acc = acc + d * d;
                }
                v[(i, j)] = acc;
            }
        }
        self.push(v, Op::PairSqDist { a, b })
    }

    pub fn row_group_norm(&mut self, src: TensorId, group: usize) -> TensorId {
        let x = &self.values[src.0];
        debug_assert_eq!(x.ncols() % group, 0);
        let groups = x.ncols() / group;
        let mut v = Array2::zeros((x.nrows(), groups));
        for (i, row) in x.rows().into_iter().enumerate() {
            for (g, seg) in row.as_slice().unwrap().chunks(group).enumerate() {
                let sq: F = seg.iter().map(|x| *x * *x).sum();
                v[(i, g)] = sq.sqrt();
            }
        }
        self.push(v, Op::RowGroupNorm { src, group })
    }

    /// Weighted-mean cross-entropy over positions with a target; returns a
    /// `[1×1]` scalar node. Positions with `None` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: Rc<Vec<Option<usize>>>,
        weights: Rc<Vec<F>>,
    ) -> TensorId {
        let x = &self.values[logits.0];
        debug_assert_eq!(x.nrows(), targets.len());
        debug_assert_eq!(x.nrows(), weights.len());
        let loss = weighted_cross_entropy(x, &targets, &weights);
        let v = Array2::from_elem((1, 1), loss);
        self.push(v, Op::CrossEntropy { logits, targets, weights })
    }

    /// Reverse pass from `root` (seeded with ones).
    pub fn backward(&self, root: TensorId) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array2::ones(self.values[root.0].dim()));
        for i in (0..self.ops.len()).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            }
            let Some(g) = grads[i].take() else { continue };
            let g = if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().to_owned()
            };
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::AddBias(a, bias) => {
                    acc(&mut grads, *a, &g);
                    let col = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    acc(&mut grads, *bias, &col);
                }
                Op::Scale(a, c) => {
                    acc_owned(&mut grads, *a, g.mapv(|x| x * *c));
                }
                Op::Matmul(a, b) => {
                    acc_owned(&mut grads, *a, g.dot(&self.values[b.0].t()));
                    acc_owned(&mut grads, *b, self.values[a.0].t().dot(&g));
                }
                Op::MatmulNt(a, b) => {
                    acc_owned(&mut grads, *a, g.dot(&self.values[b.0]));
                    acc_owned(&mut grads, *b, g.t().dot(&self.values[a.0]));
                }
                Op::Embed { table, ids } => {
                    let t = &self.values[table.0];
                    let mut gt = Array2::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc_owned(&mut grads, *table, gt);
                }
                Op::Gelu(a) => {
                    let x = &self.values[a.0];
                    let mut gx = g;
                    gx.zip_mut_with(x, |gv, xv| *gv = *gv * gelu_bwd(*xv));
                    acc_owned(&mut grads, *a, gx);
                }
                Op::RmsNorm { src, gain } => {
                    let x = &self.values[src.0];
                    let gn = &self.values[gain.0];
                    let d = F::from_f64(x.ncols() as f64);
                    let mut gx = Array2::zeros(x.dim());
                    let mut ggain = Array2::<F>::zeros(gn.dim());
                    for (i, row) in x.rows().into_iter().enumerate() {
                        let r = row_rms(row.as_slice().unwrap());
                        let inv = F::one() / r;
                        let mut dot = F::zero();
                        for j in 0..x.ncols() {
                            let gj = g[(i, j)];
                            ggain[(0, j)] = ggain[(0, j)] + gj * row[j] * inv;
                            dot = dot + gj * gn[(0, j)] * row[j];
                        }
                        let coef = dot * inv * inv * inv / d;
                        for j in 0..x.ncols() {
                            gx[(i, j)] = g[(i, j)] * gn[(0, j)] * inv - row[j] * coef;
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                    acc_owned(&mut grads, *gain, ggain);
                }
                Op::UnitRms { src, head_dim } => {
                    let x = &self.values[src.0];
                    let d = F::from_f64(*head_dim as f64);
                    let mut gx = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        for h in 0..x.ncols() / head_dim {
                            let c0 = h * head_dim;
                            let seg: Vec<F> = (0..*head_dim).map(|j| x[(i, c0 + j)]).collect();
                            let r = row_rms(&seg);
                            let inv = F::one() / r;
                            let mut dot = F::zero();
                            for j in 0..*head_dim {
                                dot = dot + g[(i, c0 + j)] * seg[j];
                            }
                            let coef = dot * inv * inv * inv / d;
                            for j in 0..*head_dim {
                                gx[(i, c0 + j)] = g[(i, c0 + j)] * inv - seg[j] * coef;
                            }
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::Rope { src, idx, head_dim } => {
                    let angles = rope_angles(*head_dim);
                    let mut gx = g;
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let m = idx[i] as f64;
                        let row = row.as_slice_mut().unwrap();
                        for seg in row.chunks_mut(*head_dim) {
                            for (t, pair) in seg.chunks_mut(2).enumerate() {
                                let ang = m * angles[t];
                                let (sin, cos) = (F::from_f64(ang.sin()), F::from_f64(ang.cos()));
                                let (g0, g1) = (pair[0], pair[1]);
                                pair[0] = g0 * cos + g1 * sin;
                                pair[1] = -g0 * sin + g1 * cos;
                            }
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::MaskedSoftmax { src } => {
                    let p = &self.values[i];
                    let mut gx = Array2::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let mut dot = F::zero();
                        for k in 0..p.ncols() {
                            dot = dot + g[(r, k)] * p[(r, k)];
                        }
                        for k in 0..p.ncols() {
                            gx[(r, k)] = p[(r, k)] * (g[(r, k)] - dot);
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::Softplus(a) => {
                    let x = &self.values[a.0];
                    let mut gx = g;
                    gx.zip_mut_with(x, |gv, xv| {
                        let sig = F::from_f64(1.0 / (1.0 + (-xv.as_f64()).exp()));
                        *gv = *gv * sig;
                    });
                    acc_owned(&mut grads, *a, gx);
                }
                Op::ScaleByScalar { src, scalar } => {
                    let c = self.values[scalar.0][(0, 0)];
                    acc_owned(&mut grads, *src, g.mapv(|x| x * c));
                    let dot: F = g
                        .iter()
                        .zip(self.values[src.0].iter())
                        .map(|(a, b)| *a * *b)
                        .sum();
                    acc_owned(&mut grads, *scalar, Array2::from_elem((1, 1), dot));
                }
                Op::Slice { src, r0, r1, c0, c1 } => {
                    let mut gs = Array2::zeros(self.values[src.0].dim());
                    gs.slice_mut(s![*r0..*r1, *c0..*c1]).assign(&g);
                    acc_owned(&mut grads, *src, gs);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.values[p.0].ncols();
                        acc_owned(&mut grads, *p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let h = self.values[p.0].nrows();
                        acc_owned(&mut grads, *p, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::FrameApply { src, frames } => {
                    // y = R x + t  =>  gx = Rᵀ gy
                    let mut gx = g;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let f = &frames[r];
                        for p in row.as_slice_mut().unwrap().chunks_mut(3) {
                            let v = [p[0], p[1], p[2]];
                            let rt = &f.r;
                            p[0] = rt[0][0] * v[0] + rt[1][0] * v[1] + rt[2][0] * v[2];
                            p[1] = rt[0][1] * v[0] + rt[1][1] * v[1] + rt[2][1] * v[2];
                            p[2] = rt[0][2] * v[0] + rt[1][2] * v[1] + rt[2][2] * v[2];
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::FrameApplyInv { src, frames } => {
                    // y = Rᵀ (x − t)  =>  gx = R gy
                    let mut gx = g;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let f = &frames[r];
                        for p in row.as_slice_mut().unwrap().chunks_mut(3) {
                            let v = [p[0], p[1], p[2]];
                            let rm = &f.r;
                            p[0] = rm[0][0] * v[0] + rm[0][1] * v[1] + rm[0][2] * v[2];
                            p[1] = rm[1][0] * v[0] + rm[1][1] * v[1] + rm[1][2] * v[2];
                            p[2] = rm[2][0] * v[0] + rm[2][1] * v[1] + rm[2][2] * v[2];
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::PairSqDist { a, b } => {
                    let xa = &self.values[a.0];
                    let xb = &self.values[b.0];
                    let two = F::from_f64(2.0);
                    let mut ga = Array2::zeros(xa.dim());
                    let mut gb = Array2::zeros(xb.dim());
                    for ii in 0..xa.nrows() {
                        for jj in 0..xb.nrows() {
                            let gij = g[(ii, jj)];
                            if gij == F::zero() {
                                continue;
                            }
                            for c in 0..xa.ncols() {
                                let d = (xa[(ii, c)] - xb[(jj, c)]) * two * gij;
                                ga[(ii, c)] = ga[(ii, c)] + d;
                                gb[(jj, c)] = gb[(jj, c)] - d;
                            }
                        }
                    }
                    acc_owned(&mut grads, *a, ga);
                    acc_owned(&mut grads, *b, gb);
                }
                Op::RowGroupNorm { src, group } => {
                    let x = &self.values[src.0];
                    let y = &self.values[i];
                    let tiny = F::from_f64(1e-20);
                    let mut gx = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        for gcol in 0..y.ncols() {
                            let n = y[(r, gcol)].max(tiny);
                            let gy = g[(r, gcol)];
                            for c in 0..*group {
                                let col = gcol * group + c;
                                gx[(r, col)] = gy * x[(r, col)] / n;
                            }
                        }
                    }
                    acc_owned(&mut grads, *src, gx);
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    let x = &self.values[logits.0];
                    let gscale = g[(0, 0)];
                    let wsum: F = targets
                        .iter()
                        .zip(weights.iter())
                        .filter(|(t, _)| t.is_some())
                        .map(|(_, w)| *w)
                        .sum();
                    let mut gx = Array2::zeros(x.dim());
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(t) = tgt else { continue };
                        let row = x.row(r);
                        let row = row.as_slice().unwrap();
                        let p = softmax_row(row);
                        let w = weights[r] / wsum * gscale;
                        for (k, pk) in p.iter().enumerate() {
                            let delta = if k == *t { F::one() } else { F::zero() };
                            gx[(r, k)] = (*pk - delta) * w;
                        }
                    }
                    acc_owned(&mut grads, *logits, gx);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Array2<F>>], id: TensorId, delta: &Array2<F>) {
    match &mut grads[id.0] {
        Some(g) => *g += delta,
        slot => *slot = Some(delta.clone()),
    }
}

fn acc_owned<F: Scalar>(grads: &mut [Option<Array2<F>>], id: TensorId, delta: Array2<F>) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

fn row_rms<F: Scalar>(row: &[F]) -> F {
    let sq: F = row.iter().map(|x| *x * *x).sum();
    (sq / F::from_f64(row.len() as f64) + F::from_f64(RMS_EPS)).sqrt()
}

fn rope_angles(head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|t| ROPE_BASE.powf(-(2.0 * t as f64) / head_dim as f64))
        .collect()
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let xf = x.as_f64();
    let u = (2.0 / std::f64::consts::PI).sqrt() * (xf + 0.044715 * xf * xf * xf);
    F::from_f64(0.5 * xf * (1.0 + u.tanh()))
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let xf = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (xf + 0.044715 * xf * xf * xf);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * xf * xf);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
}

fn softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = row.iter().map(|x| (*x - mx).exp()).collect();
    let sum: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Weighted-mean cross-entropy shared by the tape op and the public loss
/// routine: `Σ w·(−log softmax(logits)[target]) / Σ w` over rows with a
/// target.
pub fn weighted_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    targets: &[Option<usize>],
    weights: &[F],
) -> F {
    let mut num = F::zero();
    let mut den = F::zero();
    for (r, tgt) in targets.iter().enumerate() {
        let Some(t) = tgt else { continue };
        let row = logits.row(r);
        let row = row.as_slice().unwrap();
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse: F = row.iter().map(|x| (*x - mx).exp()).sum::<F>().ln() + mx;
        num = num + weights[r] * (lse - row[*t]);
        den = den + weights[r];
    }
    num / den
}

/// Max relative error between analytic gradients and central finite
/// differences, over every element of every leaf in `leaves`.
pub fn finite_diff_check<F, B>(mut leaves: Vec<Array2<F>>, build: B, eps: f64) -> f64
where
    F: Scalar,
    B: Fn(&mut Tape<F>, &[TensorId]) -> TensorId,
{
    let run = |leaves: &[Array2<F>]| -> (f64, Vec<Option<Array2<F>>>) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let root = build(&mut tape, &ids);
        assert_eq!(tape.value(root).len(), 1, "gradcheck root must be scalar");
        let loss = tape.value(root)[(0, 0)].as_f64();
        let grads = tape.backward(root);
        let g = ids.iter().map(|id| grads.get(*id).cloned()).collect();
        (loss, g)
    };
    let (_, analytic) = run(&leaves);
    let mut worst: f64 = 0.0;
    for li in 0..leaves.len() {
        let dims = leaves[li].dim();
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                let orig = leaves[li][(r, c)];
                leaves[li][(r, c)] = orig + F::from_f64(eps);
                let (lp, _) = run(&leaves);
                leaves[li][(r, c)] = orig - F::from_f64(eps);
                let (lm, _) = run(&leaves);
                leaves[li][(r, c)] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic[li]
                    .as_ref()
                    .map_or(0.0, |g| g[(r, c)].as_f64());
                let denom = (an.abs() + fd.abs()).max(1e-6);
                worst = worst.max((an - fd).abs() / denom);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::random_rigid_motion;
    use crate::maskgen::causal_mask;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_disallowed() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, 5, 5));
        let mask = Rc::new(causal_mask(5));
        let p = tape.masked_softmax(x, Some(mask.clone()));
        let pv = tape.value(p);
        for q in 0..5 {
            let sum: f64 = pv.row(q).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for k in 0..5 {
                if !mask.allowed(q, k) {
                    assert_eq!(pv[(q, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn rms_norm_rows_have_unit_rms() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&mut rng, 4, 16));
        let gain = tape.leaf(Array2::ones((1, 16)));
        let y = tape.rms_norm(x, gain);
        for row in tape.value(y).rows() {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Array2::zeros((1, 8)));
        let loss = tape.cross_entropy(
            logits,
            Rc::new(vec![Some(3)]),
            Rc::new(vec![1.0]),
        );
        assert!((tape.value(loss)[(0, 0)] - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits_vanish() {
        let mut tape = Tape::<f64>::new();
        let mut arr = Array2::zeros((1, 4));
        arr[(0, 2)] = 60.0;
        let logits = tape.leaf(arr);
        let loss = tape.cross_entropy(logits, Rc::new(vec![Some(2)]), Rc::new(vec![1.0]));
        assert!(tape.value(loss)[(0, 0)] < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_padded_positions() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rows = randn(&mut rng, 4, 6);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(rows.clone());
        let l1 = tape.cross_entropy(
            a,
            Rc::new(vec![Some(1), Some(2), None, None]),
            Rc::new(vec![1.0; 4]),
        );
        let mut tape2 = Tape::<f64>::new();
        let b = tape2.leaf(rows.slice(s![0..2, ..]).to_owned());
        let l2 = tape2.cross_entropy(b, Rc::new(vec![Some(1), Some(2)]), Rc::new(vec![1.0; 2]));
        assert!((tape.value(l1)[(0, 0)] - tape2.value(l2)[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_matches_anchor_weighting_formula() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let logits = randn(&mut rng, 5, 6);
        let targets: Vec<Option<usize>> = vec![Some(0), Some(1), Some(2), Some(3), Some(4)];
        let w = vec![1.0, 0.01, 0.01, 1.0, 1.0];
        let got = weighted_cross_entropy(&logits, &targets, &w);
        // independent recomputation: (Σ_far + 0.01 Σ_near) / (count_far + 0.01 count_near)
        let per: Vec<f64> = (0..5)
            .map(|r| {
                let row: Vec<f64> = logits.row(r).to_vec();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
                lse - row[targets[r].unwrap()]
            })
            .collect();
        let num = per[0] + per[3] + per[4] + 0.01 * (per[1] + per[2]);
        let den = 3.0 + 0.01 * 2.0;
        assert!((got - num / den).abs() < 1e-12);
    }

    /// Every op's backward matches central finite differences at 64-bit.
    #[test]
    fn gradcheck_all_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let eps = 1e-5;
        let tol = 1e-7;

        // add, add_bias, scale, matmul chain
        let err = finite_diff_check(
            vec![randn(&mut rng, 3, 4), randn(&mut rng, 4, 5), randn(&mut rng, 1, 5)],
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let b = t.add_bias(m, ids[2]);
                let s = t.scale(b, 0.7);
                let g = t.gelu(s);
                sum_to_scalar(t, g)
            },
            eps,
        );
        assert!(err < tol, "linear chain gradcheck err={err}");

        // matmul_nt + masked softmax
        let err = finite_diff_check(
            vec![randn(&mut rng, 4, 6), randn(&mut rng, 4, 6)],
            |t, ids| {
                let l = t.matmul_nt(ids[0], ids[1]);
                let p = t.masked_softmax(l, Some(Rc::new(causal_mask(4))));
                sum_to_scalar(t, p)
            },
            eps,
        );
        assert!(err < tol, "softmax gradcheck err={err}");

        // rms_norm + unit_rms + rope
        let err = finite_diff_check(
            vec![randn(&mut rng, 3, 8), randn(&mut rng, 1, 8)],
            |t, ids| {
                let n = t.rms_norm(ids[0], ids[1]);
                let u = t.unit_rms(n, 4);
                let r = t.rope(u, Rc::new(vec![-2, 0, 5]), 4);
                sum_to_scalar(t, r)
            },
            eps,
        );
        assert!(err < tol, "norm/rope gradcheck err={err}");

        // embed + cross entropy
        let err = finite_diff_check(
            vec![randn(&mut rng, 7, 5)],
            |t, ids| {
                let e = t.embed(ids[0], vec![1, 3, 1, 6]);
                t.cross_entropy(
                    e,
                    Rc::new(vec![Some(0), Some(4), None, Some(2)]),
                    Rc::new(vec![1.0, 0.01, 1.0, 1.0]),
                )
            },
            eps,
        );
        assert!(err < tol, "embed/ce gradcheck err={err}");

        // slices and concats
        let err = finite_diff_check(
            vec![randn(&mut rng, 4, 6), randn(&mut rng, 2, 3)],
            |t, ids| {
                let a = t.slice(ids[0], 1, 3, 2, 5);
                let b = t.concat_cols(vec![a, ids[1]]);
                let c = t.concat_rows(vec![b, b]);
                let g = t.gelu(c);
                sum_to_scalar(t, g)
            },
            eps,
        );
        assert!(err < tol, "slice/concat gradcheck err={err}");

        // geometric ops: frames, pairwise distances, group norms, softplus.
        // This chain is roundoff-sensitive, so use a larger step.
        let mut frng = ChaCha12Rng::seed_from_u64(11);
        let frames: Rc<Vec<crate::frame::Frame<f64>>> =
            Rc::new((0..3).map(|_| random_rigid_motion(&mut frng, 2.0)).collect());
        let f2 = frames.clone();
        let err = finite_diff_check(
            vec![randn(&mut rng, 3, 6), randn(&mut rng, 3, 6), randn(&mut rng, 1, 1)],
            move |t, ids| {
                let qa = t.frame_apply(ids[0], f2.clone());
                let kb = t.frame_apply(ids[1], f2.clone());
                let d = t.pair_sq_dist(qa, kb);
                let sp = t.softplus(ids[2]);
                let sc = t.scale_by_scalar(d, sp);
                let p = t.masked_softmax(sc, None);
                let mix = t.matmul(p, kb);
                let inv = t.frame_apply_inv(mix, f2.clone());
                let norms = t.row_group_norm(inv, 3);
                let fused = t.concat_cols(vec![inv, norms]);
                sum_to_scalar(t, fused)
            },
            1e-4,
        );
        assert!(err < 1e-6, "geometric gradcheck err={err}");
    }

    /// Reduce a matrix to a scalar via a fixed "random" projection so every
    /// element influences the loss.
    fn sum_to_scalar(t: &mut Tape<f64>, x: TensorId) -> TensorId {
        let (r, c) = t.value(x).dim();
        let pr = Array2::from_shape_fn((c, 1), |(i, _)| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5);
        let pl = Array2::from_shape_fn((1, r), |(_, j)| ((j * 40503) % 89) as f64 / 89.0 - 0.5);
        let pr = t.leaf(pr);
        let pl = t.leaf(pl);
        let xr = t.matmul(x, pr);
        t.matmul(pl, xr)
    }

    #[test]
    fn rope_is_shift_invariant_in_attention_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let q0 = randn(&mut rng, 5, 8);
        let k0 = randn(&mut rng, 5, 8);
        let logits = |shift: i64| -> Array2<f64> {
            let mut tape = Tape::new();
            let q = tape.leaf(q0.clone());
            let k = tape.leaf(k0.clone());
            let idx: Rc<Vec<i64>> = Rc::new((0..5).map(|i| i as i64 + shift).collect());
            let qr = tape.rope(q, idx.clone(), 8);
            let kr = tape.rope(k, idx, 8);
            let l = tape.matmul_nt(qr, kr);
            tape.value(l).clone()
        };
        let base = logits(0);
        for shift in [-7, 3, 1000] {
            let shifted = logits(shift);
            let diff = (&base - &shifted).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "shift {shift} drift {diff}");
        }
    }

    #[test]
    fn single_key_softmax_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array2::from_elem((1, 1), 3.7));
        let p = tape.masked_softmax(x, None);
        assert_eq!(tape.value(p)[(0, 0)], 1.0);
    }

    #[test]
    fn determinism_same_inputs_same_outputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = randn(&mut rng, 6, 6);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone());
            let g = tape.leaf(Array2::ones((1, 6)));
            let n = tape.rms_norm(x, g);
            let s = tape.masked_softmax(n, None);
            tape.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}

//! Computation graphs with reverse-mode differentiation.
//!
//! A `Graph` is an append-only arena of primitive operations; node ids are
//! topologically ordered by construction. Differentiation is graph-to-graph:
//! `append_gradient` emits adjoint nodes built from the same primitive set,
//! so the result can be differentiated again (reverse-over-reverse), which is
//! how second-order quantities such as kernel-matching gradients are obtained.
//!
//! Non-differentiable switches (the ReLU active-set mask, max locations) are
//! represented by dedicated primitives whose derivative is defined as zero:
//! `StepMask`, `RowMax`, `RowMaxMask`. ReLU's derivative at exactly 0 is 0,
//! and its second derivative is 0 everywhere.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

/// Geometry of a convolution lowered to im2col.
///
/// Patch columns are ordered (channel, ky, kx) with kx fastest; output rows
/// are ordered (sample, oy, ox) with ox fastest. A kernel tensor for this
/// layout has shape [ch*kh*kw, out_channels].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        ch: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape("conv kernel/stride must be positive".into()));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::Shape(format!(
                        "valid conv kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                // Symmetric padding, extra pad on the high side for odd deficits.
                (oh, ow, pad_h / 2, pad_w / 2)
            }
        };
        Ok(ConvGeom { n, ch, h, w, kh, kw, stride, pad_top, pad_left, oh, ow })
    }

    pub fn patch_len(&self) -> usize {
        self.ch * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Geometry of max pooling lowered to per-channel im2col. Output rows are
/// ordered (sample, channel, oy, ox) with ox fastest, so a row reduction
/// reshapes directly to [n, ch, oh, ow].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub win: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(n: usize, ch: usize, h: usize, w: usize, win: usize, stride: usize) -> Result<Self> {
        if win == 0 || stride == 0 || h < win || w < win {
            return Err(Error::Shape(format!("pool window {win} incompatible with input {h}x{w}")));
        }
        Ok(PoolGeom {
            n,
            ch,
            h,
            w,
            win,
            stride,
            oh: (h - win) / stride + 1,
            ow: (w - win) / stride + 1,
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Const(Arc<Tensor>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Recip(NodeId),
    Relu(NodeId),
    /// 1.0 where input > 0, else 0.0. Derivative defined as zero.
    StepMask(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    /// Flat window [offset, offset+len) of a 1-D tensor.
    SliceFlat(NodeId, usize),
    /// Embed a 1-D tensor into a zero vector of the stated length.
    PadFlat(NodeId, usize),
    /// out[r, j] = in[r, idx[j]].
    GatherCols(NodeId, Arc<Vec<usize>>),
    /// out[r, idx[j]] += in[r, j]; output width fixed at build time.
    ScatterCols(NodeId, Arc<Vec<usize>>),
    Sum(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    BroadcastScalar(NodeId),
    /// [c] -> [r, c], rows repeated.
    BroadcastRow(NodeId, usize),
    /// [r] -> [r, c], columns repeated.
    BroadcastCol(NodeId, usize),
    /// [r, c] + [c] with the vector added to every row.
    AddRowBroadcast(NodeId, NodeId),
    /// Per-row maximum, [r, c] -> [r]. Derivative defined as zero.
    RowMax(NodeId),
    /// One-hot of the first per-row maximum, [r, c] -> [r, c]. Derivative zero.
    RowMaxMask(NodeId),
    /// [r, c] -> [r*t, c]: out[i*t + j] = in[i].
    RepeatRows(NodeId, usize),
    /// [r*t, c] -> [r, c]: out[i] = sum_j in[i*t + j].
    SegSumRows(NodeId, usize),
    Im2col(NodeId, ConvGeom),
    Col2im(NodeId, ConvGeom),
    Im2colPool(NodeId, PoolGeom),
    Col2imPool(NodeId, PoolGeom),
    /// [n*oh*ow, oc] -> [n, oc, oh, ow].
    ConvColsToNchw(NodeId, usize, usize, usize),
    /// [n, oc, oh, ow] -> [n*oh*ow, oc].
    NchwToConvCols(NodeId),
}

impl Op {
    fn inputs(&self) -> (Option<NodeId>, Option<NodeId>) {
        use Op::*;
        match *self {
            Input(_) | Const(_) => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Matmul(a, b) | AddRowBroadcast(a, b) => {
                (Some(a), Some(b))
            }
            Neg(a) | Scale(a, _) | Recip(a) | Relu(a) | StepMask(a) | Exp(a) | Log(a)
            | Transpose(a) | Reshape(a) | SliceFlat(a, _) | PadFlat(a, _) | GatherCols(a, _)
            | ScatterCols(a, _) | Sum(a) | RowSum(a) | ColSum(a) | BroadcastScalar(a)
            | BroadcastRow(a, _) | BroadcastCol(a, _) | RowMax(a) | RowMaxMask(a)
            | RepeatRows(a, _) | SegSumRows(a, _) | Im2col(a, _) | Col2im(a, _)
            | Im2colPool(a, _) | Col2imPool(a, _) | ConvColsToNchw(a, _, _, _)
            | NchwToConvCols(a) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Append-only operation arena. Node ids are topologically ordered.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_shapes: Vec<Vec<usize>>,
}

/// Values for the input slots of a graph, borrowed from the caller.
pub struct Feeds<'a> {
    slots: Vec<Option<&'a Tensor>>,
}

impl<'a> Feeds<'a> {
    pub fn new(graph: &Graph) -> Self {
        Feeds { slots: vec![None; graph.input_shapes.len()] }
    }

    pub fn set(&mut self, graph: &Graph, node: NodeId, value: &'a Tensor) -> &mut Self {
        match graph.nodes[node].op {
            Op::Input(slot) => {
                assert_eq!(
                    graph.input_shapes[slot],
                    value.shape(),
                    "feed shape mismatch for input node {node}"
                );
                self.slots[slot] = Some(value);
            }
            _ => panic!("node {node} is not an input"),
        }
        self
    }
}

enum Val<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl<'a> Val<'a> {
    fn get(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn elems(&self, id: NodeId) -> usize {
        self.nodes[id].shape.iter().product()
    }

    fn mat_dims(&self, id: NodeId, what: &str) -> (usize, usize) {
        let s = &self.nodes[id].shape;
        assert!(s.len() == 2, "{what}: node {id} is not a matrix (shape {s:?})");
        (s[0], s[1])
    }

    // ---- builders ----

    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        let slot = self.input_shapes.len();
        self.input_shapes.push(shape.clone());
        self.push(Op::Input(slot), shape)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(Arc::new(t)), shape)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> NodeId {
        assert_eq!(
            self.nodes[a].shape, self.nodes[b].shape,
            "elementwise op on mismatched shapes ({a} vs {b})"
        );
        let shape = self.nodes[a].shape.clone();
        self.push(make(a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Mul)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Neg(a), shape)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Scale(a, c), shape)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Recip(a), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Relu(a), shape)
    }

    pub fn step_mask(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::StepMask(a), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.push(Op::Log(a), shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.mat_dims(a, "matmul lhs");
        let (k2, n) = self.mat_dims(b, "matmul rhs");
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        self.push(Op::Matmul(a, b), vec![m, n])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.mat_dims(a, "transpose");
        self.push(Op::Transpose(a), vec![c, r])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            self.elems(a),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        self.push(Op::Reshape(a), shape)
    }

    pub fn slice_flat(&mut self, a: NodeId, offset: usize, len: usize) -> NodeId {
        assert!(self.nodes[a].shape.len() == 1, "slice_flat expects a flat tensor");
        assert!(offset + len <= self.elems(a), "slice_flat out of range");
        self.push(Op::SliceFlat(a, offset), vec![len])
    }

    pub fn pad_flat(&mut self, a: NodeId, offset: usize, total: usize) -> NodeId {
        assert!(self.nodes[a].shape.len() == 1, "pad_flat expects a flat tensor");
        assert!(offset + self.elems(a) <= total, "pad_flat out of range");
        self.push(Op::PadFlat(a, offset), vec![total])
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let (r, c) = self.mat_dims(a, "gather_cols");
        assert!(idx.iter().all(|&j| j < c), "gather_cols index out of range");
        let k = idx.len();
        self.push(Op::GatherCols(a, idx), vec![r, k])
    }

    pub fn scatter_cols(&mut self, a: NodeId, idx: Arc<Vec<usize>>, width: usize) -> NodeId {
        let (r, k) = self.mat_dims(a, "scatter_cols");
        assert_eq!(k, idx.len(), "scatter_cols index count");
        assert!(idx.iter().all(|&j| j < width), "scatter_cols index out of range");
        self.push(Op::ScatterCols(a, idx), vec![r, width])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.mat_dims(a, "row_sum");
        self.push(Op::RowSum(a), vec![r])
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.mat_dims(a, "col_sum");
        self.push(Op::ColSum(a), vec![c])
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(self.elems(a), 1, "broadcast_scalar expects a scalar");
        self.push(Op::BroadcastScalar(a), shape)
    }

    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> NodeId {
        assert!(self.nodes[a].shape.len() == 1, "broadcast_row expects a vector");
        let c = self.elems(a);
        self.push(Op::BroadcastRow(a, rows), vec![rows, c])
    }

    pub fn broadcast_col(&mut self, a: NodeId, cols: usize) -> NodeId {
        assert!(self.nodes[a].shape.len() == 1, "broadcast_col expects a vector");
        let r = self.elems(a);
        self.push(Op::BroadcastCol(a, cols), vec![r, cols])
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, c) = self.mat_dims(a, "add_row_broadcast lhs");
        assert_eq!(self.nodes[b].shape, vec![c], "row-broadcast vector length");
        let shape = self.nodes[a].shape.clone();
        self.push(Op::AddRowBroadcast(a, b), shape)
    }

    pub fn row_max(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.mat_dims(a, "row_max");
        self.push(Op::RowMax(a), vec![r])
    }

    pub fn row_max_mask(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a].shape.clone();
        self.mat_dims(a, "row_max_mask");
        self.push(Op::RowMaxMask(a), shape)
    }

    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        if times == 1 {
            return a;
        }
        let (r, c) = self.mat_dims(a, "repeat_rows");
        self.push(Op::RepeatRows(a, times), vec![r * times, c])
    }

    pub fn seg_sum_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        if times == 1 {
            return a;
        }
        let (r, c) = self.mat_dims(a, "seg_sum_rows");
        assert_eq!(r % times, 0, "seg_sum_rows row count not divisible");
        self.push(Op::SegSumRows(a, times), vec![r / times, c])
    }

    pub fn im2col(&mut self, a: NodeId, geom: ConvGeom) -> NodeId {
        assert_eq!(self.nodes[a].shape, vec![geom.n, geom.ch, geom.h, geom.w], "im2col input");
        self.push(Op::Im2col(a, geom), vec![geom.n * geom.out_positions(), geom.patch_len()])
    }

    pub fn col2im(&mut self, a: NodeId, geom: ConvGeom) -> NodeId {
        assert_eq!(
            self.nodes[a].shape,
            vec![geom.n * geom.out_positions(), geom.patch_len()],
            "col2im input"
        );
        self.push(Op::Col2im(a, geom), vec![geom.n, geom.ch, geom.h, geom.w])
    }

    pub fn im2col_pool(&mut self, a: NodeId, geom: PoolGeom) -> NodeId {
        assert_eq!(self.nodes[a].shape, vec![geom.n, geom.ch, geom.h, geom.w], "im2col_pool input");
        self.push(
            Op::Im2colPool(a, geom),
            vec![geom.n * geom.ch * geom.oh * geom.ow, geom.win * geom.win],
        )
    }

    pub fn col2im_pool(&mut self, a: NodeId, geom: PoolGeom) -> NodeId {
        self.push(Op::Col2imPool(a, geom), vec![geom.n, geom.ch, geom.h, geom.w])
    }

    pub fn conv_cols_to_nchw(&mut self, a: NodeId, oh: usize, ow: usize, oc: usize) -> NodeId {
        let (rows, c) = self.mat_dims(a, "conv_cols_to_nchw");
        assert_eq!(c, oc);
        assert_eq!(rows % (oh * ow), 0);
        let n = rows / (oh * ow);
        self.push(Op::ConvColsToNchw(a, oh, ow, oc), vec![n, oc, oh, ow])
    }

    pub fn nchw_to_conv_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].shape.clone();
        assert_eq!(s.len(), 4, "nchw_to_conv_cols expects 4-D input");
        let (n, oc, oh, ow) = (s[0], s[1], s[2], s[3]);
        self.push(Op::NchwToConvCols(a), vec![n * oh * ow, oc])
    }

    // ---- evaluation ----

    /// Evaluate the given target nodes. Only the subgraph reachable from the
    /// targets is computed. Deterministic: identical feeds give bit-identical
    /// results.
    pub fn eval(&self, feeds: &Feeds, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            let (a, b) = self.nodes[id].op.inputs();
            if let Some(a) = a {
                stack.push(a);
            }
            if let Some(b) = b {
                stack.push(b);
            }
        }

        let mut vals: Vec<Option<Val>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let v = self.eval_node(id, &vals, feeds)?;
            #[cfg(debug_assertions)]
            if v.get().len() <= 65_536 {
                v.get().check_finite(&format!("node {id}"))?;
            }
            vals[id] = Some(v);
        }

        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let v = vals[t].as_ref().expect("target computed").get().clone();
            v.check_finite(&format!("output node {t}"))?;
            out.push(v);
        }
        Ok(out)
    }

    fn eval_node<'a>(
        &'a self,
        id: NodeId,
        vals: &[Option<Val<'a>>],
        feeds: &Feeds<'a>,
    ) -> Result<Val<'a>> {
        use Op::*;
        let val = |n: NodeId| vals[n].as_ref().expect("input computed").get();
        let shape = self.nodes[id].shape.clone();
        let t = match &self.nodes[id].op {
            Input(slot) => {
                let fed = feeds.slots[*slot].ok_or_else(|| {
                    Error::Shape(format!("missing feed for input slot {slot} (node {id})"))
                })?;
                return Ok(Val::Borrowed(fed));
            }
            Const(t) => return Ok(Val::Owned((**t).clone())),
            Add(a, b) => zip_map(val(*a), val(*b), shape, |x, y| x + y),
            Sub(a, b) => zip_map(val(*a), val(*b), shape, |x, y| x - y),
            Mul(a, b) => zip_map(val(*a), val(*b), shape, |x, y| x * y),
            Neg(a) => map(val(*a), shape, |x| -x),
            Scale(a, c) => {
                let c = *c;
                map(val(*a), shape, move |x| x * c)
            }
            Recip(a) => map(val(*a), shape, |x| 1.0 / x),
            Relu(a) => map(val(*a), shape, |x| if x > 0.0 { x } else { 0.0 }),
            StepMask(a) => map(val(*a), shape, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Exp(a) => map(val(*a), shape, f64::exp),
            Log(a) => map(val(*a), shape, f64::ln),
            Matmul(a, b) => tensor::matmul(val(*a), val(*b)),
            Transpose(a) => tensor::transpose(val(*a)),
            Reshape(a) => val(*a).clone().reshaped(shape),
            SliceFlat(a, off) => {
                let len = shape[0];
                Tensor::from_vec(val(*a).data()[*off..off + len].to_vec())
            }
            PadFlat(a, off) => {
                let src = val(*a).data();
                let mut out = vec![0.0; shape[0]];
                out[*off..off + src.len()].copy_from_slice(src);
                Tensor::from_vec(out)
            }
            GatherCols(a, idx) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let k = idx.len();
                let mut out = vec![0.0; r * k];
                let data = src.data();
                for i in 0..r {
                    let row = &data[i * c..(i + 1) * c];
                    let orow = &mut out[i * k..(i + 1) * k];
                    for (j, &col) in idx.iter().enumerate() {
                        orow[j] = row[col];
                    }
                }
                Tensor::new(shape, out)
            }
            ScatterCols(a, idx) => {
                let src = val(*a);
                let (r, k) = (src.rows(), src.cols());
                let width = shape[1];
                let mut out = vec![0.0; r * width];
                let data = src.data();
                for i in 0..r {
                    let row = &data[i * k..(i + 1) * k];
                    let orow = &mut out[i * width..(i + 1) * width];
                    for (j, &col) in idx.iter().enumerate() {
                        orow[col] += row[j];
                    }
                }
                Tensor::new(shape, out)
            }
            Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
            RowSum(a) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut out = vec![0.0; r];
                for i in 0..r {
                    out[i] = src.data()[i * c..(i + 1) * c].iter().sum();
                }
                Tensor::from_vec(out)
            }
            ColSum(a) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut out = vec![0.0; c];
                for i in 0..r {
                    let row = &src.data()[i * c..(i + 1) * c];
                    for j in 0..c {
                        out[j] += row[j];
                    }
                }
                Tensor::from_vec(out)
            }
            BroadcastScalar(a) => {
                let v = val(*a).item();
                let n: usize = shape.iter().product();
                Tensor::new(shape, vec![v; n])
            }
            BroadcastRow(a, rows) => {
                let src = val(*a).data();
                let mut out = Vec::with_capacity(rows * src.len());
                for _ in 0..*rows {
                    out.extend_from_slice(src);
                }
                Tensor::new(shape, out)
            }
            BroadcastCol(a, cols) => {
                let src = val(*a).data();
                let mut out = Vec::with_capacity(src.len() * cols);
                for &v in src {
                    out.extend(std::iter::repeat_n(v, *cols));
                }
                Tensor::new(shape, out)
            }
            AddRowBroadcast(a, b) => {
                let (x, v) = (val(*a), val(*b));
                let (r, c) = (x.rows(), x.cols());
                let mut out = x.data().to_vec();
                let vv = v.data();
                for i in 0..r {
                    let row = &mut out[i * c..(i + 1) * c];
                    for j in 0..c {
                        row[j] += vv[j];
                    }
                }
                Tensor::new(shape, out)
            }
            RowMax(a) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut out = vec![0.0; r];
                for i in 0..r {
                    let row = &src.data()[i * c..(i + 1) * c];
                    let mut best = row[0];
                    for &v in &row[1..] {
                        if v > best {
                            best = v;
                        }
                    }
                    out[i] = best;
                }
                Tensor::from_vec(out)
            }
            RowMaxMask(a) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = &src.data()[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    out[i * c + best] = 1.0;
                }
                Tensor::new(shape, out)
            }
            RepeatRows(a, t) => {
                let src = val(*a);
                let (r, c) = (src.rows(), src.cols());
                let mut out = Vec::with_capacity(r * t * c);
                for i in 0..r {
                    let row = &src.data()[i * c..(i + 1) * c];
                    for _ in 0..*t {
                        out.extend_from_slice(row);
                    }
                }
                Tensor::new(shape, out)
            }
            SegSumRows(a, t) => {
                let src = val(*a);
                let c = src.cols();
                let r_out = shape[0];
                let mut out = vec![0.0; r_out * c];
                for i in 0..r_out {
                    let orow = &mut out[i * c..(i + 1) * c];
                    for j in 0..*t {
                        let row = &src.data()[(i * t + j) * c..(i * t + j + 1) * c];
                        for k in 0..c {
                            orow[k] += row[k];
                        }
                    }
                }
                Tensor::new(shape, out)
            }
            Im2col(a, g) => im2col(val(*a), g),
            Col2im(a, g) => col2im(val(*a), g),
            Im2colPool(a, g) => im2col_pool(val(*a), g),
            Col2imPool(a, g) => col2im_pool(val(*a), g),
            ConvColsToNchw(a, oh, ow, oc) => {
                let src = val(*a);
                let n = shape[0];
                let (oh, ow, oc) = (*oh, *ow, *oc);
                let mut out = vec![0.0; n * oc * oh * ow];
                let data = src.data();
                for i in 0..n {
                    for p in 0..oh * ow {
                        let row = &data[(i * oh * ow + p) * oc..(i * oh * ow + p + 1) * oc];
                        for o in 0..oc {
                            out[((i * oc + o) * oh * ow) + p] = row[o];
                        }
                    }
                }
                Tensor::new(shape, out)
            }
            NchwToConvCols(a) => {
                let src = val(*a);
                let s = src.shape();
                let (n, oc, oh, ow) = (s[0], s[1], s[2], s[3]);
                let mut out = vec![0.0; n * oh * ow * oc];
                let data = src.data();
                for i in 0..n {
                    for o in 0..oc {
                        let plane = &data[(i * oc + o) * oh * ow..(i * oc + o + 1) * oh * ow];
                        for p in 0..oh * ow {
                            out[(i * oh * ow + p) * oc + o] = plane[p];
                        }
                    }
                }
                Tensor::new(shape, out)
            }
        };
        Ok(Val::Owned(t))
    }

    // ---- differentiation ----

    /// Append adjoint nodes computing d root / d wrt_i and return their ids.
    /// The root must be a scalar. Entries are None when the root does not
    /// depend on that node (the gradient is identically zero).
    pub fn append_gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(self.elems(root), 1, "gradient root must be scalar");
        let seed = self.scalar_const(1.0);
        let seed = self.broadcast_scalar(seed, self.nodes[root].shape.clone());
        self.append_vjp(root, seed, wrt)
    }

    /// Vector-Jacobian product: adjoints of `wrt` given an adjoint `seed`
    /// for `root` (same shape as root).
    pub fn append_vjp(&mut self, root: NodeId, seed: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(
            self.nodes[root].shape, self.nodes[seed].shape,
            "vjp seed shape must match root shape"
        );

        // influenced[i]: node i transitively depends on some wrt node.
        let mut influenced = vec![false; self.nodes.len()];
        for &w in wrt {
            influenced[w] = true;
        }
        let limit = root + 1;
        for id in 0..limit {
            if influenced[id] {
                continue;
            }
            let (a, b) = self.nodes[id].op.inputs();
            influenced[id] = a.map(|x| influenced[x]).unwrap_or(false)
                || b.map(|x| influenced[x]).unwrap_or(false);
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; limit];
        adj[root] = Some(seed);
        for id in (0..limit).rev() {
            let Some(up) = adj[id] else { continue };
            if !influenced[id] {
                continue;
            }
            self.backprop_node(id, up, &influenced, &mut adj);
        }
        wrt.iter().map(|&w| adj[w]).collect()
    }

    fn accumulate(
        &mut self,
        adj: &mut [Option<NodeId>],
        influenced: &[bool],
        target: NodeId,
        contribution: NodeId,
    ) {
        if !influenced[target] {
            return;
        }
        adj[target] = Some(match adj[target] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }

    fn backprop_node(
        &mut self,
        id: NodeId,
        up: NodeId,
        influenced: &[bool],
        adj: &mut [Option<NodeId>],
    ) {
        use Op::*;
        match self.nodes[id].op.clone() {
            Input(_) | Const(_) => {}
            // Derivative-zero primitives: the active-set convention.
            StepMask(_) | RowMax(_) | RowMaxMask(_) => {}
            Add(a, b) => {
                self.accumulate(adj, influenced, a, up);
                self.accumulate(adj, influenced, b, up);
            }
            Sub(a, b) => {
                self.accumulate(adj, influenced, a, up);
                let n = self.neg(up);
                self.accumulate(adj, influenced, b, n);
            }
            Mul(a, b) => {
                if influenced[a] {
                    let c = self.mul(up, b);
                    self.accumulate(adj, influenced, a, c);
                }
                if influenced[b] {
                    let c = self.mul(up, a);
                    self.accumulate(adj, influenced, b, c);
                }
            }
            Neg(a) => {
                let c = self.neg(up);
                self.accumulate(adj, influenced, a, c);
            }
            Scale(a, k) => {
                let c = self.scale(up, k);
                self.accumulate(adj, influenced, a, c);
            }
            Recip(a) => {
                // d(1/x) = -1/x^2 = -(recip)^2
                let r2 = self.mul(id, id);
                let m = self.mul(up, r2);
                let c = self.neg(m);
                self.accumulate(adj, influenced, a, c);
            }
            Relu(a) => {
                let s = self.step_mask(a);
                let c = self.mul(up, s);
                self.accumulate(adj, influenced, a, c);
            }
            Exp(a) => {
                let c = self.mul(up, id);
                self.accumulate(adj, influenced, a, c);
            }
            Log(a) => {
                let r = self.recip(a);
                let c = self.mul(up, r);
                self.accumulate(adj, influenced, a, c);
            }
            Matmul(a, b) => {
                if influenced[a] {
                    let bt = self.transpose(b);
                    let c = self.matmul(up, bt);
                    self.accumulate(adj, influenced, a, c);
                }
                if influenced[b] {
                    let at = self.transpose(a);
                    let c = self.matmul(at, up);
                    self.accumulate(adj, influenced, b, c);
                }
            }
            Transpose(a) => {
                let c = self.transpose(up);
                self.accumulate(adj, influenced, a, c);
            }
            Reshape(a) => {
                let shape = self.nodes[a].shape.clone();
                let c = self.reshape(up, shape);
                self.accumulate(adj, influenced, a, c);
            }
            SliceFlat(a, off) => {
                let total = self.elems(a);
                let c = self.pad_flat(up, off, total);
                self.accumulate(adj, influenced, a, c);
            }
            PadFlat(a, off) => {
                let len = self.elems(a);
                let c = self.slice_flat(up, off, len);
                self.accumulate(adj, influenced, a, c);
            }
            GatherCols(a, idx) => {
                let width = self.nodes[a].shape[1];
                let c = self.scatter_cols(up, idx, width);
                self.accumulate(adj, influenced, a, c);
            }
            ScatterCols(a, idx) => {
                let c = self.gather_cols(up, idx);
                self.accumulate(adj, influenced, a, c);
            }
            Sum(a) => {
                let shape = self.nodes[a].shape.clone();
                let c = self.broadcast_scalar(up, shape);
                self.accumulate(adj, influenced, a, c);
            }
            RowSum(a) => {
                let cols = self.nodes[a].shape[1];
                let c = self.broadcast_col(up, cols);
                self.accumulate(adj, influenced, a, c);
            }
            ColSum(a) => {
                let rows = self.nodes[a].shape[0];
                let c = self.broadcast_row(up, rows);
                self.accumulate(adj, influenced, a, c);
            }
            BroadcastScalar(a) => {
                let c = self.sum(up);
                self.accumulate(adj, influenced, a, c);
            }
            BroadcastRow(a, _) => {
                let c = self.col_sum(up);
                self.accumulate(adj, influenced, a, c);
            }
            BroadcastCol(a, _) => {
                let c = self.row_sum(up);
                self.accumulate(adj, influenced, a, c);
            }
            AddRowBroadcast(a, b) => {
                self.accumulate(adj, influenced, a, up);
                if influenced[b] {
                    let c = self.col_sum(up);
                    self.accumulate(adj, influenced, b, c);
                }
            }
            RepeatRows(a, t) => {
                let c = self.seg_sum_rows(up, t);
                self.accumulate(adj, influenced, a, c);
            }
            SegSumRows(a, t) => {
                let c = self.repeat_rows(up, t);
                self.accumulate(adj, influenced, a, c);
            }
            Im2col(a, g) => {
                let c = self.col2im(up, g);
                self.accumulate(adj, influenced, a, c);
            }
            Col2im(a, g) => {
                let c = self.im2col(up, g);
                self.accumulate(adj, influenced, a, c);
            }
            Im2colPool(a, g) => {
                let c = self.col2im_pool(up, g);
                self.accumulate(adj, influenced, a, c);
            }
            Col2imPool(a, g) => {
                let c = self.im2col_pool(up, g);
                self.accumulate(adj, influenced, a, c);
            }
            ConvColsToNchw(a, _, _, _) => {
                let c = self.nchw_to_conv_cols(up);
                self.accumulate(adj, influenced, a, c);
            }
            NchwToConvCols(a) => {
                let s = self.nodes[id].shape.clone();
                // up has conv-cols shape; undo to NCHW of the original node.
                let orig = self.nodes[a].shape.clone();
                let (oh, ow, oc) = (orig[2], orig[3], orig[1]);
                debug_assert_eq!(s[1], oc);
                let c = self.conv_cols_to_nchw(up, oh, ow, oc);
                self.accumulate(adj, influenced, a, c);
            }
        }
    }
}

fn map(src: &Tensor, shape: Vec<usize>, f: impl Fn(f64) -> f64) -> Tensor {
    let out: Vec<f64> = src.data().iter().map(|&x| f(x)).collect();
    Tensor::new(shape, out)
}

fn zip_map(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let ad = a.data();
    let bd = b.data();
    let out: Vec<f64> = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(shape, out)
}

fn im2col(input: &Tensor, g: &ConvGeom) -> Tensor {
    let plen = g.patch_len();
    let rows = g.n * g.out_positions();
    let mut out = vec![0.0; rows * plen];
    let data = input.data();
    let hw = g.h * g.w;
    for i in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row_base = ((i * g.oh + oy) * g.ow + ox) * plen;
                for c in 0..g.ch {
                    let plane = &data[(i * g.ch + c) * hw..(i * g.ch + c + 1) * hw];
                    for ky in 0..g.kh {
                        let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        for kx in 0..g.kw {
                            let x = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            let col = (c * g.kh + ky) * g.kw + kx;
                            if y >= 0 && (y as usize) < g.h && x >= 0 && (x as usize) < g.w {
                                out[row_base + col] = plane[y as usize * g.w + x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, plen], out)
}

fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.n * g.ch * g.h * g.w];
    let data = cols.data();
    let hw = g.h * g.w;
    for i in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = &data[((i * g.oh + oy) * g.ow + ox) * plen..][..plen];
                for c in 0..g.ch {
                    for ky in 0..g.kh {
                        let y = (oy * g.stride + ky) as isize - g.pad_top as isize;
                        if y < 0 || y as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let x = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if x < 0 || x as usize >= g.w {
                                continue;
                            }
                            let col = (c * g.kh + ky) * g.kw + kx;
                            out[(i * g.ch + c) * hw + y as usize * g.w + x as usize] += row[col];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.ch, g.h, g.w], out)
}

fn im2col_pool(input: &Tensor, g: &PoolGeom) -> Tensor {
    let win = g.win * g.win;
    let rows = g.n * g.ch * g.oh * g.ow;
    let mut out = vec![0.0; rows * win];
    let data = input.data();
    let hw = g.h * g.w;
    let mut r = 0;
    for i in 0..g.n {
        for c in 0..g.ch {
            let plane = &data[(i * g.ch + c) * hw..(i * g.ch + c + 1) * hw];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let base = r * win;
                    for ky in 0..g.win {
                        for kx in 0..g.win {
                            out[base + ky * g.win + kx] =
                                plane[(oy * g.stride + ky) * g.w + ox * g.stride + kx];
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    Tensor::new(vec![rows, win], out)
}

fn col2im_pool(cols: &Tensor, g: &PoolGeom) -> Tensor {
    let win = g.win * g.win;
    let mut out = vec![0.0; g.n * g.ch * g.h * g.w];
    let data = cols.data();
    let hw = g.h * g.w;
    let mut r = 0;
    for i in 0..g.n {
        for c in 0..g.ch {
            let base_plane = (i * g.ch + c) * hw;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let row = &data[r * win..(r + 1) * win];
                    for ky in 0..g.win {
                        for kx in 0..g.win {
                            out[base_plane + (oy * g.stride + ky) * g.w + ox * g.stride + kx] +=
                                row[ky * g.win + kx];
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.ch, g.h, g.w], out)
}

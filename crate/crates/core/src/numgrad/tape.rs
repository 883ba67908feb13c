//! Reverse-mode tape over whole tensors with a closed set of operations.
//!
//! Graphs are built eagerly: every tape method computes its forward value on
//! the spot and records the adjoint recipe. Shape violations and malformed
//! graphs panic (programming errors); data-dependent failures such as
//! non-finite gradients surface as typed errors from [`Tape::backward`].

use rayon::prelude::*;

use super::params::ParamSet;
use super::NumGradError;

/// Minimum element count before an op bothers with thread-level parallelism.
const PAR_THRESHOLD: usize = 16384;
/// Fixed chunk length for parallel scatter reductions; partial buffers are
/// folded in chunk order so results do not depend on the worker count.
const SCATTER_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Bilinear footprint of one rasterized pixel into a texel grid.
#[derive(Debug, Clone, Copy)]
pub struct FetchFootprint {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

enum Op {
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Recip(NodeId),
    Abs(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    AddConst(NodeId),
    MulConst(NodeId, Vec<f64>),
    Exp(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    LinearConst { x: NodeId, mat: Vec<f64> },
    Concat(Vec<NodeId>),
    SliceCol { x: NodeId, col: usize },
    Reshape(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumLast(NodeId),
    CumsumExclLast(NodeId),
    TriplaneSample { planes: NodeId, points: Vec<[f64; 3]> },
    Tv2d(NodeId),
    AvgPool2(NodeId),
    Normalize(NodeId),
    SparseFetch { atlas: NodeId, pix: Vec<Option<FetchFootprint>> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Recip(a)
            | Op::Abs(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumLast(a)
            | Op::CumsumExclLast(a)
            | Op::Tv2d(a)
            | Op::AvgPool2(a)
            | Op::Normalize(a) => vec![*a],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::LinearConst { x, .. } | Op::SliceCol { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::TriplaneSample { planes, .. } => vec![*planes],
            Op::SparseFetch { atlas, .. } => vec![*atlas],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Recip(..) => "recip",
            Op::Abs(..) => "abs",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Linear { .. } => "linear",
            Op::LinearConst { .. } => "linear_const",
            Op::Concat(..) => "concat",
            Op::SliceCol { .. } => "slice_col",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumLast(..) => "sum_last",
            Op::CumsumExclLast(..) => "cumsum_excl_last",
            Op::TriplaneSample { .. } => "triplane_sample",
            Op::Tv2d(..) => "tv2d",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Normalize(..) => "normalize",
            Op::SparseFetch { .. } => "sparse_fetch",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.nodes[id.0].value.len(), 1, "node {} is not scalar", id.0);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch between node {} {:?} and node {} {:?}",
            a.0, self.nodes[a.0].shape, b.0, self.nodes[b.0].shape
        );
    }

    /// Leaf bound to a named buffer in `set`. Gradients flow back into the
    /// buffer on [`Tape::backward`] only while the buffer is trainable.
    pub fn leaf(&mut self, set: &ParamSet, name: &str) -> NodeId {
        let buf = set.get(name);
        self.push(
            buf.shape.clone(),
            buf.values.clone(),
            buf.trainable,
            Op::Leaf { param: Some(name.to_string()) },
        )
    }

    /// Detached constant; never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "constant shape/value mismatch");
        self.push(shape, value, false, Op::Leaf { param: None })
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(vec![1], vec![v])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "add");
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "sub");
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.check_same_shape(a, b, "mul");
        let v: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| 1.0 / x).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::Recip(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x.abs()).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::Abs(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x + s).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::MulScalar(a, s))
    }

    /// Elementwise add of a constant tensor (same length as `a`).
    pub fn add_const(&mut self, a: NodeId, c: Vec<f64>) -> NodeId {
        assert_eq!(self.value(a).len(), c.len(), "add_const: length mismatch on node {}", a.0);
        let v: Vec<f64> = self.value(a).iter().zip(&c).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::AddConst(a))
    }

    /// Elementwise multiply by a constant tensor (same length as `a`).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<f64>) -> NodeId {
        assert_eq!(self.value(a).len(), c.len(), "mul_const: length mismatch on node {}", a.0);
        let v: Vec<f64> = self.value(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::MulConst(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::Exp(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v: Vec<f64> = self.value(a).iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
        self.push(self.shape(a).to_vec(), v, self.needs(a), Op::LeakyRelu(a, slope))
    }

    /// Dense layer: `x` is `[n, i]`, `w` is `[o, i]`, `b` is `[o]`;
    /// output is `[n, o]` with `y = x wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        assert_eq!(xs.len(), 2, "linear: input node {} must be rank 2, got {:?}", x.0, xs);
        assert_eq!(ws.len(), 2, "linear: weight node {} must be rank 2, got {:?}", w.0, ws);
        assert_eq!(bs.len(), 1, "linear: bias node {} must be rank 1, got {:?}", b.0, bs);
        let (n, i) = (xs[0], xs[1]);
        let (o, wi) = (ws[0], ws[1]);
        assert_eq!(i, wi, "linear: feature dim mismatch ({i} vs {wi}) between nodes {} and {}", x.0, w.0);
        assert_eq!(o, bs[0], "linear: bias dim mismatch between nodes {} and {}", w.0, b.0);
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let row = |r: usize| -> Vec<f64> {
            let xr = &xv[r * i..(r + 1) * i];
            (0..o)
                .map(|oo| {
                    let wr = &wv[oo * i..(oo + 1) * i];
                    bv[oo] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };
        let v: Vec<f64> = if n * o * i > PAR_THRESHOLD {
            (0..n).into_par_iter().map(row).flatten_iter().collect()
        } else {
            (0..n).flat_map(row).collect()
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(vec![n, o], v, needs, Op::Linear { x, w, b })
    }

    /// Fixed-matrix projection: `x` is `[m]`, `mat` is row-major `[rows, m]`.
    pub fn linear_const(&mut self, x: NodeId, mat: Vec<f64>, rows: usize) -> NodeId {
        let m = self.value(x).len();
        assert_eq!(mat.len(), rows * m, "linear_const: matrix is not {rows}x{m}");
        let xv = self.value(x);
        let v: Vec<f64> = (0..rows)
            .map(|r| mat[r * m..(r + 1) * m].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(vec![rows], v, self.needs(x), Op::LinearConst { x, mat })
    }

    /// Flattens and concatenates the inputs into one rank-1 node.
    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "concat of zero nodes");
        let mut v = Vec::new();
        let mut needs = false;
        for &id in inputs {
            v.extend_from_slice(self.value(id));
            needs |= self.needs(id);
        }
        let n = v.len();
        self.push(vec![n], v, needs, Op::Concat(inputs.to_vec()))
    }

    /// Extracts column `col` of a `[n, m]` node as `[n]`.
    pub fn slice_col(&mut self, x: NodeId, col: usize) -> NodeId {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "slice_col: node {} must be rank 2, got {:?}", x.0, s);
        let (n, m) = (s[0], s[1]);
        assert!(col < m, "slice_col: column {col} out of range for {:?}", s);
        let xv = self.value(x);
        let v: Vec<f64> = (0..n).map(|r| xv[r * m + col]).collect();
        self.push(vec![n], v, self.needs(x), Op::SliceCol { x, col })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape: node {} has {} values, target shape {:?}",
            x.0,
            self.value(x).len(),
            shape
        );
        let v = self.value(x).to_vec();
        self.push(shape, v, self.needs(x), Op::Reshape(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().sum();
        self.push(vec![1], vec![v], self.needs(x), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        assert!(n > 0, "mean_all of empty node {}", x.0);
        let v = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![v], self.needs(x), Op::MeanAll(x))
    }

    /// Reduces a `[n, s]` node over its last axis to `[n]`.
    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2, "sum_last: node {} must be rank 2, got {:?}", x.0, sh);
        let (n, s) = (sh[0], sh[1]);
        let xv = self.value(x);
        let v: Vec<f64> = (0..n).map(|r| xv[r * s..(r + 1) * s].iter().sum()).collect();
        self.push(vec![n], v, self.needs(x), Op::SumLast(x))
    }

    /// Exclusive prefix sum along the last axis of a `[n, s]` node:
    /// `y[r, 0] = 0`, `y[r, j] = y[r, j-1] + x[r, j-1]`.
    pub fn cumsum_excl_last(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 2, "cumsum_excl_last: node {} must be rank 2, got {:?}", x.0, sh);
        let (n, s) = (sh[0], sh[1]);
        let xv = self.value(x);
        let mut v = vec![0.0; n * s];
        for r in 0..n {
            let mut acc = 0.0;
            for j in 0..s {
                v[r * s + j] = acc;
                acc += xv[r * s + j];
            }
        }
        self.push(vec![n, s], v, self.needs(x), Op::CumsumExclLast(x))
    }

    /// Samples a `[3, c, r, r]` triplane stack at world points in `[-1, 1]^3`.
    /// Output is `[npts, c]`: the three axis-aligned plane features summed,
    /// each fetched bilinearly with align-corners mapping. Points outside the
    /// cube yield a zero feature row.
    pub fn triplane_sample(&mut self, planes: NodeId, points: Vec<[f64; 3]>) -> NodeId {
        let sh = self.shape(planes).to_vec();
        assert_eq!(sh.len(), 4, "triplane_sample: node {} must be rank 4, got {:?}", planes.0, sh);
        assert_eq!(sh[0], 3, "triplane_sample: leading dim must be 3 planes, got {:?}", sh);
        assert_eq!(sh[2], sh[3], "triplane_sample: plane grids must be square, got {:?}", sh);
        let (c, r) = (sh[1], sh[2]);
        let pv = self.value(planes);
        let n = points.len();
        let sample_rows = |range: std::ops::Range<usize>| -> Vec<f64> {
            let mut out = vec![0.0; range.len() * c];
            for (local, pi) in range.enumerate() {
                let p = points[pi];
                if !inside_cube(p) {
                    continue;
                }
                for (plane, (a, b)) in plane_coords(p).into_iter().enumerate() {
                    let lin = BilinearWeights::at(a, b, r);
                    for ch in 0..c {
                        let base = (plane * c + ch) * r * r;
                        out[local * c + ch] += lin.apply(&pv[base..base + r * r]);
                    }
                }
            }
            out
        };
        let v: Vec<f64> = if n * c > PAR_THRESHOLD {
            let chunks: Vec<std::ops::Range<usize>> = chunk_ranges(n, SCATTER_CHUNK);
            chunks.into_par_iter().map(sample_rows).flatten_iter().collect()
        } else {
            sample_rows(0..n)
        };
        let needs = self.needs(planes);
        self.push(vec![n, c], v, needs, Op::TriplaneSample { planes, points })
    }

    /// Mean of squared forward differences along both spatial axes of a
    /// `[c, h, w]` node, normalized by the element count `c*h*w`.
    pub fn tv2d(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3, "tv2d: node {} must be rank 3 [c, h, w], got {:?}", x.0, sh);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let xv = self.value(x);
        let mut acc = 0.0;
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[base + y * w + xx];
                    if xx + 1 < w {
                        let d = xv[base + y * w + xx + 1] - v;
                        acc += d * d;
                    }
                    if y + 1 < h {
                        let d = xv[base + (y + 1) * w + xx] - v;
                        acc += d * d;
                    }
                }
            }
        }
        let v = acc / (c * h * w) as f64;
        self.push(vec![1], vec![v], self.needs(x), Op::Tv2d(x))
    }

    /// 2x2 average pooling of a `[c, h, w]` node; `h` and `w` must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x);
        assert_eq!(sh.len(), 3, "avg_pool2: node {} must be rank 3 [c, h, w], got {:?}", x.0, sh);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial dims {:?} on node {}", sh, x.0);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut v = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ch * h * w + 2 * y * w + 2 * xx;
                    v[ch * oh * ow + y * ow + xx] =
                        0.25 * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
                }
            }
        }
        self.push(vec![c, oh, ow], v, self.needs(x), Op::AvgPool2(x))
    }

    /// L2 normalization of a rank-1 node.
    pub fn normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n > 0.0, "normalize: zero-norm node {}", x.0);
        let v: Vec<f64> = xv.iter().map(|v| v / n).collect();
        self.push(self.shape(x).to_vec(), v, self.needs(x), Op::Normalize(x))
    }

    /// Gathers per-pixel bilinear texel fetches from a `[c, t, t]` atlas into
    /// a channel-interleaved `[npix * c]` image; `None` pixels stay zero.
    pub fn sparse_fetch(&mut self, atlas: NodeId, pix: Vec<Option<FetchFootprint>>) -> NodeId {
        let sh = self.shape(atlas);
        assert_eq!(sh.len(), 3, "sparse_fetch: atlas node {} must be rank 3, got {:?}", atlas.0, sh);
        let (c, t) = (sh[0], sh[1] * sh[2]);
        let av = self.value(atlas);
        let mut v = vec![0.0; pix.len() * c];
        for (p, f) in pix.iter().enumerate() {
            if let Some(f) = f {
                for ch in 0..c {
                    let plane = &av[ch * t..(ch + 1) * t];
                    v[p * c + ch] = (0..4).map(|k| f.w[k] * plane[f.idx[k]]).sum();
                }
            }
        }
        let needs = self.needs(atlas);
        self.push(vec![pix.len() * c], v, needs, Op::SparseFetch { atlas, pix })
    }

    /// Reverse sweep from a scalar node. Gradients of trainable leaf buffers
    /// are accumulated into `set`; call at most once per graph per owner of
    /// `set` to avoid double accumulation.
    pub fn backward(&self, out: NodeId, set: &mut ParamSet) -> Result<(), NumGradError> {
        assert_eq!(
            self.nodes[out.0].value.len(),
            1,
            "backward from non-scalar node {} with shape {:?}",
            out.0,
            self.nodes[out.0].shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_adjoint(i, &g, &mut grads);
            // Non-finite values surface in an input slot right after the
            // producing adjoint runs, which pins the blame exactly.
            for inp in node.op.inputs() {
                if let Some(gv) = &grads[inp.0] {
                    if let Some(index) = gv.iter().position(|v| !v.is_finite()) {
                        return Err(NumGradError::NonFiniteGrad {
                            op: node.op.kind(),
                            node: i,
                            index,
                        });
                    }
                }
            }
            // Leaves bound to buffers absent from `set` are left alone, so a
            // graph may reference several parameter sets while backward
            // accumulates into just the one handed in.
            if let Op::Leaf { param: Some(name) } = &node.op {
                if set.contains(name) {
                    let buf = set.get_mut(name);
                    if buf.trainable {
                        for (dst, src) in buf.grad.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, add: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn apply_adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accum(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accum(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                self.accum(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Recip(a) => {
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * y[k] * y[k];
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k].signum() * if av[k] == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * s;
                    }
                });
            }
            Op::AddConst(a) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::MulConst(a, c) => {
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * c[k];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(av[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let slope = *slope;
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * if av[k] >= 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, in_dim) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let xv = self.value(*x);
                let wv = self.value(*w);
                self.accum(grads, *x, |d| {
                    let body = |r: usize, dr: &mut [f64]| {
                        let gr = &g[r * o..(r + 1) * o];
                        for (oo, gv) in gr.iter().enumerate() {
                            let wr = &wv[oo * in_dim..(oo + 1) * in_dim];
                            for k in 0..in_dim {
                                dr[k] += gv * wr[k];
                            }
                        }
                    };
                    if n * o * in_dim > PAR_THRESHOLD {
                        d.par_chunks_mut(in_dim).enumerate().for_each(|(r, dr)| body(r, dr));
                    } else {
                        for (r, dr) in d.chunks_mut(in_dim).enumerate() {
                            body(r, dr);
                        }
                    }
                });
                self.accum(grads, *w, |d| {
                    let body = |oo: usize, row: &mut [f64]| {
                        for r in 0..n {
                            let gv = g[r * o + oo];
                            let xr = &xv[r * in_dim..(r + 1) * in_dim];
                            for k in 0..in_dim {
                                row[k] += gv * xr[k];
                            }
                        }
                    };
                    if n * o * in_dim > PAR_THRESHOLD {
                        d.par_chunks_mut(in_dim).enumerate().for_each(|(oo, row)| body(oo, row));
                    } else {
                        for (oo, row) in d.chunks_mut(in_dim).enumerate() {
                            body(oo, row);
                        }
                    }
                });
                self.accum(grads, *b, |d| {
                    for r in 0..n {
                        for (oo, dv) in d.iter_mut().enumerate() {
                            *dv += g[r * o + oo];
                        }
                    }
                });
            }
            Op::LinearConst { x, mat } => {
                let m = self.value(*x).len();
                let rows = node.value.len();
                self.accum(grads, *x, |d| {
                    for r in 0..rows {
                        let row = &mat[r * m..(r + 1) * m];
                        for k in 0..m {
                            d[k] += g[r] * row[k];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let gp = &g[off..off + len];
                    self.accum(grads, p, |d| d.iter_mut().zip(gp).for_each(|(d, g)| *d += g));
                    off += len;
                }
            }
            Op::SliceCol { x, col } => {
                let m = self.shape(*x)[1];
                let col = *col;
                self.accum(grads, *x, |d| {
                    for (r, gv) in g.iter().enumerate() {
                        d[r * m + col] += gv;
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::SumAll(a) => {
                let gv = g[0];
                self.accum(grads, *a, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g[0] / n;
                self.accum(grads, *a, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::SumLast(a) => {
                let s = self.shape(*a)[1];
                self.accum(grads, *a, |d| {
                    for (r, gv) in g.iter().enumerate() {
                        for dv in &mut d[r * s..(r + 1) * s] {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::CumsumExclLast(a) => {
                let sh = self.shape(*a);
                let (n, s) = (sh[0], sh[1]);
                self.accum(grads, *a, |d| {
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in (0..s).rev() {
                            d[r * s + j] += acc;
                            acc += g[r * s + j];
                        }
                    }
                });
            }
            Op::TriplaneSample { planes, points } => {
                let sh = self.shape(*planes);
                let (c, r) = (sh[1], sh[2]);
                self.accum(grads, *planes, |d| {
                    scatter_triplane_grad(d, g, points, c, r);
                });
            }
            Op::Tv2d(a) => {
                let sh = self.shape(*a);
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let xv = self.value(*a);
                let scale = 2.0 * g[0] / (c * h * w) as f64;
                self.accum(grads, *a, |d| {
                    for ch in 0..c {
                        let base = ch * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let v = xv[base + y * w + xx];
                                if xx + 1 < w {
                                    let diff = xv[base + y * w + xx + 1] - v;
                                    d[base + y * w + xx + 1] += scale * diff;
                                    d[base + y * w + xx] -= scale * diff;
                                }
                                if y + 1 < h {
                                    let diff = xv[base + (y + 1) * w + xx] - v;
                                    d[base + (y + 1) * w + xx] += scale * diff;
                                    d[base + y * w + xx] -= scale * diff;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let sh = self.shape(*a);
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (oh, ow) = (h / 2, w / 2);
                self.accum(grads, *a, |d| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g[ch * oh * ow + y * ow + xx];
                                let b = ch * h * w + 2 * y * w + 2 * xx;
                                d[b] += gv;
                                d[b + 1] += gv;
                                d[b + w] += gv;
                                d[b + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::Normalize(a) => {
                let xv = self.value(*a);
                let y = &node.value;
                let n = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                self.accum(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += (g[k] - y[k] * dot) / n;
                    }
                });
            }
            Op::SparseFetch { atlas, pix } => {
                let sh = self.shape(*atlas);
                let (c, t) = (sh[0], sh[1] * sh[2]);
                self.accum(grads, *atlas, |d| {
                    for (p, f) in pix.iter().enumerate() {
                        if let Some(f) = f {
                            for ch in 0..c {
                                let gv = g[p * c + ch];
                                for k in 0..4 {
                                    d[ch * t + f.idx[k]] += f.w[k] * gv;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn inside_cube(p: [f64; 3]) -> bool {
    p.iter().all(|v| (-1.0..=1.0).contains(v))
}

/// The three axis-aligned plane coordinates of a point: XY, XZ, YZ.
#[inline]
fn plane_coords(p: [f64; 3]) -> [(f64, f64); 3] {
    [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])]
}

/// Align-corners bilinear stencil on an `r x r` grid over `[-1, 1]^2`;
/// the first coordinate selects the column, the second the row.
struct BilinearWeights {
    corner: [usize; 4],
    w: [f64; 4],
}

impl BilinearWeights {
    fn at(a: f64, b: f64, r: usize) -> Self {
        assert!(r >= 2, "bilinear grid needs at least 2 nodes per axis, got {r}");
        let last = (r - 1) as f64;
        let ga = ((a + 1.0) * 0.5 * last).clamp(0.0, last);
        let gb = ((b + 1.0) * 0.5 * last).clamp(0.0, last);
        let x0 = (ga.floor() as usize).min(r - 2);
        let y0 = (gb.floor() as usize).min(r - 2);
        let (x1, y1) = (x0 + 1, y0 + 1);
        let fa = ga - x0 as f64;
        let fb = gb - y0 as f64;
        Self {
            corner: [y0 * r + x0, y0 * r + x1, y1 * r + x0, y1 * r + x1],
            w: [
                (1.0 - fb) * (1.0 - fa),
                (1.0 - fb) * fa,
                fb * (1.0 - fa),
                fb * fa,
            ],
        }
    }

    #[inline]
    fn apply(&self, plane: &[f64]) -> f64 {
        (0..4).map(|k| self.w[k] * plane[self.corner[k]]).sum()
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            plane[self.corner[k]] += self.w[k] * g;
        }
    }
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(chunk)).map(|i| i * chunk..((i + 1) * chunk).min(n)).collect()
}

/// Scatter-accumulates triplane sampling gradients. Large point sets are
/// split into fixed chunks whose partial buffers are folded in chunk order,
/// so the float result is independent of the worker count.
fn scatter_triplane_grad(d: &mut [f64], g: &[f64], points: &[[f64; 3]], c: usize, r: usize) {
    let n = points.len();
    let scatter_range = |d: &mut [f64], range: std::ops::Range<usize>| {
        for pi in range {
            let p = points[pi];
            if !inside_cube(p) {
                continue;
            }
            for (plane, (a, b)) in plane_coords(p).into_iter().enumerate() {
                let lin = BilinearWeights::at(a, b, r);
                for ch in 0..c {
                    let base = (plane * c + ch) * r * r;
                    lin.scatter(&mut d[base..base + r * r], g[pi * c + ch]);
                }
            }
        }
    };
    if n > 2 * SCATTER_CHUNK {
        let partials: Vec<Vec<f64>> = chunk_ranges(n, SCATTER_CHUNK)
            .into_par_iter()
            .map(|range| {
                let mut part = vec![0.0; d.len()];
                scatter_range(&mut part, range);
                part
            })
            .collect();
        for part in partials {
            for (dst, src) in d.iter_mut().zip(&part) {
                *dst += src;
            }
        }
    } else {
        scatter_range(d, 0..n);
    }
}

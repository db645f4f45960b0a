//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation eagerly. Values are computed on
//! construction; [`Graph::backward`] walks the tape in reverse. Nodes that
//! cannot reach a parameter or a gradient-tracked input are never visited on
//! the backward pass, so inference graphs cost no more than a forward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{Grads, ParamStore};
use crate::tensor::{dot, matmul_at_acc, matmul_bt_acc, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectBlocks(Var, Vec<usize>, usize),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    RowNorm(Var),
    LogSoftmaxRows(Var),
    RotatePairs(Var, Vec<(f64, f64)>),
    Attention(Box<AttentionRecord>),
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Key rows per query in the order they were summed.
    order: Vec<Vec<usize>>,
    /// Softmax weights laid out as `[query][head][slot in order]`.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Sparse attention pattern: `allowed[i]` lists the key rows query `i` may attend to.
pub type AttentionMask = Rc<Vec<Vec<usize>>>;

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<usize, Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records gradients with respect to `params`.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::default(),
            track: true,
        }
    }

    /// A forward-only graph: parameters enter as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::default(),
            track: false,
        }
    }

    /// A graph without parameters, used for losses over plain inputs.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::default(),
            track: true,
        }
    }

    pub fn tracks_gradients(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn to_mat(&self, v: Var) -> Mat {
        self.value(v).clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&self, id: crate::params::ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id.0) {
            return *v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param(id.0), true);
        self.param_vars.borrow_mut().insert(id.0, v);
        v
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(
                x.shape(),
                y.shape(),
                "elementwise op on {:?} and {:?}",
                x.shape(),
                y.shape()
            );
            Mat::from_vec(
                x.rows,
                x.cols,
                x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            )
        };
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(&self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!((1, x.cols), r.shape(), "add_row shape");
            let mut out = x.clone();
            for i in 0..x.rows {
                for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                    *o += b;
                }
            }
            out
        };
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by a `[1 × c]` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = {
            let (x, r) = (self.value(a), self.value(row));
            assert_eq!((1, x.cols), r.shape(), "mul_row shape");
            let mut out = x.clone();
            for i in 0..x.rows {
                for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                    *o *= b;
                }
            }
            out
        };
        let ng = self.ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm(&self, a: Var) -> Var {
        let (out, inv_std) = {
            let x = self.value(a);
            let mut out = x.clone();
            let mut inv_std = Vec::with_capacity(x.rows);
            for i in 0..x.rows {
                let row = out.row_mut(i);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let is = 1.0 / (var + LN_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let rows = vals[0].rows;
            let cols: usize = vals.iter().map(|v| v.cols).sum();
            let mut out = Mat::zeros(rows, cols);
            for i in 0..rows {
                let mut off = 0;
                for v in &vals {
                    assert_eq!(v.rows, rows, "concat_cols row mismatch");
                    out.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
                    off += v.cols;
                }
            }
            out
        };
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<Ref<Mat>> = parts.iter().map(|p| self.value(*p)).collect();
            let cols = vals[0].cols;
            let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
            let mut rows = 0;
            for v in &vals {
                assert_eq!(v.cols, cols, "concat_rows col mismatch");
                data.extend_from_slice(&v.data);
                rows += v.rows;
            }
            Mat::from_vec(rows, cols, data)
        };
        let ng = self.ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let x = self.value(a);
            assert!(start + len <= x.rows, "slice_rows out of range");
            Mat::from_vec(
                len,
                x.cols,
                x.data[start * x.cols..(start + len) * x.cols].to_vec(),
            )
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let x = self.value(a);
            assert!(start + len <= x.cols, "slice_cols out of range");
            let mut out = Mat::zeros(x.rows, len);
            for i in 0..x.rows {
                out.row_mut(i)
                    .copy_from_slice(&x.row(i)[start..start + len]);
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let out = {
            let x = self.value(a);
            let mut data = Vec::with_capacity(idx.len() * x.cols);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Mat::from_vec(idx.len(), x.cols, data)
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Row `i` of the result is columns `[k·b, (k+1)·b)` of row `i` of `a`, with `k = blocks[i]`.
    pub fn select_blocks(&self, a: Var, blocks: &[usize], block: usize) -> Var {
        let out = {
            let x = self.value(a);
            assert_eq!(blocks.len(), x.rows, "one block index per row");
            let mut out = Mat::zeros(x.rows, block);
            for (i, &k) in blocks.iter().enumerate() {
                assert!((k + 1) * block <= x.cols, "block out of range");
                out.row_mut(i)
                    .copy_from_slice(&x.row(i)[k * block..(k + 1) * block]);
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::SelectBlocks(a, blocks.to_vec(), block), ng)
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let x = self.value(a);
            Mat::from_vec(rows, cols, x.data.clone())
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let x = self.value(a);
            x.sum() / x.len() as f64
        };
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::MeanAll(a), ng)
    }

    /// Per-row sums, `[r × 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            Mat::from_vec(
                x.rows,
                1,
                (0..x.rows).map(|i| x.row(i).iter().sum()).collect(),
            )
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Column means, `[1 × c]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let mut out = Mat::zeros(1, x.cols);
            for i in 0..x.rows {
                for (o, v) in out.data.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            let n = x.rows as f64;
            out.data.iter_mut().for_each(|v| *v /= n);
            out
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Euclidean norm of each row, `[r × 1]`. The gradient at a zero row is zero.
    pub fn row_norm(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            Mat::from_vec(
                x.rows,
                1,
                (0..x.rows)
                    .map(|i| dot(x.row(i), x.row(i)).sqrt())
                    .collect(),
            )
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::RowNorm(a), ng)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let mut out = x.clone();
            for i in 0..x.rows {
                let row = out.row_mut(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Rotates consecutive column pairs `(x, y)` of row `i` by the angle with
    /// `(cos, sin) = rot[i]`.
    pub fn rotate_pairs(&self, a: Var, rot: &[(f64, f64)]) -> Var {
        let out = {
            let x = self.value(a);
            assert_eq!(rot.len(), x.rows);
            assert_eq!(x.cols % 2, 0);
            let mut out = x.clone();
            for (i, &(c, s)) in rot.iter().enumerate() {
                for p in out.row_mut(i).chunks_exact_mut(2) {
                    let (px, py) = (p[0], p[1]);
                    p[0] = c * px - s * py;
                    p[1] = s * px + c * py;
                }
            }
            out
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::RotatePairs(a, rot.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention with a sparse key pattern.
    ///
    /// Query rows with an empty key list produce zeros. Keys outside
    /// `allowed[i]` are never read for query `i`. Keys are summed in an order
    /// fixed by their contents, so the output is bitwise invariant to how the
    /// key rows (and the entries of `allowed[i]`) are permuted.
    pub fn attention(&self, q: Var, k: Var, v: Var, allowed: AttentionMask, heads: usize) -> Var {
        let (out, probs, order) = {
            let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
            assert_eq!(qm.rows, allowed.len(), "one key list per query");
            assert_eq!(qm.cols, km.cols);
            assert_eq!(km.rows, vm.rows);
            let d = qm.cols;
            let dv = vm.cols;
            assert_eq!(d % heads, 0);
            assert_eq!(dv % heads, 0);
            let (dh, dvh) = (d / heads, dv / heads);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = Mat::zeros(qm.rows, dv);
            let mut probs = Vec::with_capacity(qm.rows);
            let mut order = Vec::with_capacity(qm.rows);
            for (i, keys) in allowed.iter().enumerate() {
                let mut p_all = Vec::with_capacity(heads * keys.len());
                if keys.is_empty() {
                    probs.push(p_all);
                    order.push(Vec::new());
                    continue;
                }
                let mut keys = keys.clone();
                keys.sort_by(|&a, &b| {
                    cmp_rows(km.row(a), km.row(b)).then_with(|| cmp_rows(vm.row(a), vm.row(b)))
                });
                let qi = qm.row(i);
                for h in 0..heads {
                    let qh = &qi[h * dh..(h + 1) * dh];
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|&j| dot(qh, &km.row(j)[h * dh..(h + 1) * dh]) * scale)
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let orow = &mut out.row_mut(i)[h * dvh..(h + 1) * dvh];
                    for (&j, e) in keys.iter().zip(&exps) {
                        let p = e / z;
                        p_all.push(p);
                        for (o, vv) in orow.iter_mut().zip(&vm.row(j)[h * dvh..(h + 1) * dvh]) {
                            *o += p * vv;
                        }
                    }
                }
                probs.push(p_all);
                order.push(keys);
            }
            (out, probs, order)
        };
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                heads,
                order,
                probs,
            })),
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            backprop(&nodes, idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut param_grads = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                if let Some(g) = &grads[i] {
                    param_grads.insert(p, g.clone());
                }
            }
        }
        Gradients { grads, param_grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_grads: HashMap<usize, Mat>,
}

impl Gradients {
    /// Gradient with respect to a graph node; zeros-shaped `None` when unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients laid out like `store`; unreached parameters get zeros.
    pub fn into_param_grads(self, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        for (p, g) in self.param_grads {
            out.values[p] = g;
        }
        out
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], target: Var, delta: Mat) {
    if !nodes[target.0].needs_grad {
        return;
    }
    match &mut grads[target.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    grads: &mut [Option<Mat>],
    nodes: &[Node],
    target: Var,
    f: impl FnOnce(&mut Mat),
) {
    if !nodes[target.0].needs_grad {
        return;
    }
    let shape = nodes[target.0].value.shape();
    let slot = grads[target.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
    f(slot);
}

fn elementwise(g: &Mat, x: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat::from_vec(
        g.rows,
        g.cols,
        g.data
            .iter()
            .zip(&x.data)
            .map(|(&gv, &xv)| f(gv, xv))
            .collect(),
    )
}

fn backprop(nodes: &[Node], idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
    let out = &nodes[idx].value;
    let val = |v: &Var| &nodes[v.0].value;
    match &nodes[idx].op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (am, bm) = (val(a), val(b));
            accumulate_with(grads, nodes, *a, |ga| {
                matmul_bt_acc(&g.data, &bm.data, &mut ga.data, am.rows, bm.cols, am.cols)
            });
            accumulate_with(grads, nodes, *b, |gb| {
                matmul_at_acc(&am.data, &g.data, &mut gb.data, am.rows, am.cols, bm.cols)
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, elementwise(g, val(b), |gv, bv| gv * bv));
            accumulate(grads, nodes, *b, elementwise(g, val(a), |gv, av| gv * av));
        }
        Op::Div(a, b) => {
            let bm = val(b);
            accumulate(grads, nodes, *a, elementwise(g, bm, |gv, bv| gv / bv));
            let t = elementwise(g, out, |gv, ov| gv * ov);
            accumulate(grads, nodes, *b, elementwise(&t, bm, |tv, bv| -tv / bv));
        }
        Op::AddRow(a, row) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate_with(grads, nodes, *row, |gr| {
                for i in 0..g.rows {
                    for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            });
        }
        Op::MulRow(a, row) => {
            let (am, rm) = (val(a), val(row));
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..g.rows {
                    for ((o, gv), rv) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(&rm.data) {
                        *o += gv * rv;
                    }
                }
            });
            accumulate_with(grads, nodes, *row, |gr| {
                for i in 0..g.rows {
                    for ((o, gv), av) in gr.data.iter_mut().zip(g.row(i)).zip(am.row(i)) {
                        *o += gv * av;
                    }
                }
            });
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Gelu(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(g, val(a), |gv, x| {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d = 0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                gv * d
            }),
        ),
        Op::Tanh(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(g, out, |gv, y| gv * (1.0 - y * y)),
        ),
        Op::Exp(a) => accumulate(grads, nodes, *a, elementwise(g, out, |gv, y| gv * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, elementwise(g, val(a), |gv, x| gv / x)),
        Op::Abs(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(g, val(a), |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        ),
        Op::Square(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(g, val(a), |gv, x| 2.0 * gv * x),
        ),
        Op::Sqrt(a) => accumulate(grads, nodes, *a, elementwise(g, out, |gv, y| gv * 0.5 / y)),
        Op::Softplus(a) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(g, val(a), |gv, x| gv * sigmoid(x)),
        ),
        Op::Clamp(a, lo, hi) => accumulate(
            grads,
            nodes,
            *a,
            elementwise(
                g,
                val(a),
                |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 },
            ),
        ),
        Op::LayerNorm { x, inv_std } => {
            accumulate_with(grads, nodes, *x, |gx| {
                let n = g.cols as f64;
                for i in 0..g.rows {
                    let (gr, yr) = (g.row(i), out.row(i));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = dot(gr, yr) / n;
                    for ((o, gv), yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o += inv_std[i] * (gv - mg - yv * mgy);
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let cols = val(p).cols;
                accumulate_with(grads, nodes, *p, |gp| {
                    for i in 0..g.rows {
                        for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + cols]) {
                            *o += v;
                        }
                    }
                });
                off += cols;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(p).len();
                accumulate_with(grads, nodes, *p, |gp| {
                    for (o, v) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                        *o += v;
                    }
                });
                off += n;
            }
        }
        Op::SliceRows(a, start) => {
            let cols = g.cols;
            accumulate_with(grads, nodes, *a, |ga| {
                for (o, v) in ga.data[start * cols..(start + g.rows) * cols]
                    .iter_mut()
                    .zip(&g.data)
                {
                    *o += v;
                }
            });
        }
        Op::SliceCols(a, start) => {
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..g.rows {
                    for (o, v) in ga.row_mut(i)[*start..start + g.cols]
                        .iter_mut()
                        .zip(g.row(i))
                    {
                        *o += v;
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            accumulate_with(grads, nodes, *a, |ga| {
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::SelectBlocks(a, blocks, block) => {
            accumulate_with(grads, nodes, *a, |ga| {
                for (i, &k) in blocks.iter().enumerate() {
                    for (o, v) in ga.row_mut(i)[k * block..(k + 1) * block]
                        .iter_mut()
                        .zip(g.row(i))
                    {
                        *o += v;
                    }
                }
            });
        }
        Op::Reshape(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, nodes, *a, Mat::from_vec(r, c, g.data.clone()));
        }
        Op::SumAll(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, nodes, *a, Mat::filled(r, c, g.item()));
        }
        Op::MeanAll(a) => {
            let (r, c) = val(a).shape();
            accumulate(
                grads,
                nodes,
                *a,
                Mat::filled(r, c, g.item() / (r * c) as f64),
            );
        }
        Op::SumCols(a) => {
            let (r, c) = val(a).shape();
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..r {
                    let gv = g.data[i];
                    ga.row_mut(i).iter_mut().take(c).for_each(|o| *o += gv);
                }
            });
        }
        Op::MeanRows(a) => {
            let (r, _) = val(a).shape();
            let n = r as f64;
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..r {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(&g.data) {
                        *o += v / n;
                    }
                }
            });
        }
        Op::RowNorm(a) => {
            let am = val(a);
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..am.rows {
                    let n = out.data[i];
                    if n == 0.0 {
                        continue;
                    }
                    let s = g.data[i] / n;
                    for (o, x) in ga.row_mut(i).iter_mut().zip(am.row(i)) {
                        *o += s * x;
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            accumulate_with(grads, nodes, *a, |ga| {
                for i in 0..g.rows {
                    let sg: f64 = g.row(i).iter().sum();
                    for ((o, gv), y) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(out.row(i)) {
                        *o += gv - y.exp() * sg;
                    }
                }
            });
        }
        Op::RotatePairs(a, rot) => {
            accumulate_with(grads, nodes, *a, |ga| {
                for (i, &(c, s)) in rot.iter().enumerate() {
                    for (o, gp) in ga
                        .row_mut(i)
                        .chunks_exact_mut(2)
                        .zip(g.row(i).chunks_exact(2))
                    {
                        o[0] += c * gp[0] + s * gp[1];
                        o[1] += -s * gp[0] + c * gp[1];
                    }
                }
            });
        }
        Op::Attention(rec) => attention_backward(nodes, rec, g, grads),
    }
}

fn attention_backward(nodes: &[Node], rec: &AttentionRecord, g: &Mat, grads: &mut [Option<Mat>]) {
    let (qm, km, vm) = (
        &nodes[rec.q.0].value,
        &nodes[rec.k.0].value,
        &nodes[rec.v.0].value,
    );
    let heads = rec.heads;
    let (dh, dvh) = (qm.cols / heads, vm.cols / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Mat::zeros(qm.rows, qm.cols);
    let mut gk = Mat::zeros(km.rows, km.cols);
    let mut gv = Mat::zeros(vm.rows, vm.cols);
    for (i, keys) in rec.order.iter().enumerate() {
        if keys.is_empty() {
            continue;
        }
        let probs = &rec.probs[i];
        let grow = g.row(i);
        for h in 0..heads {
            let p = &probs[h * keys.len()..(h + 1) * keys.len()];
            let gh = &grow[h * dvh..(h + 1) * dvh];
            let dp: Vec<f64> = keys
                .iter()
                .map(|&j| dot(gh, &vm.row(j)[h * dvh..(h + 1) * dvh]))
                .collect();
            let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qh: Vec<f64> = qm.row(i)[h * dh..(h + 1) * dh].to_vec();
            for (slot, &j) in keys.iter().enumerate() {
                let pj = p[slot];
                for (o, x) in gv.row_mut(j)[h * dvh..(h + 1) * dvh].iter_mut().zip(gh) {
                    *o += pj * x;
                }
                let ds = pj * (dp[slot] - pdp) * scale;
                if ds == 0.0 {
                    continue;
                }
                for (o, x) in gq.row_mut(i)[h * dh..(h + 1) * dh]
                    .iter_mut()
                    .zip(&km.row(j)[h * dh..(h + 1) * dh])
                {
                    *o += ds * x;
                }
                for (o, x) in gk.row_mut(j)[h * dh..(h + 1) * dh].iter_mut().zip(&qh) {
                    *o += ds * x;
                }
            }
        }
    }
    accumulate(grads, nodes, rec.q, gq);
    accumulate(grads, nodes, rec.k, gk);
    accumulate(grads, nodes, rec.v, gv);
}

/// Largest relative discrepancy between reverse-mode gradients of `build`
/// and central finite differences, over every entry of every input. The
/// denominator is `max(|numeric|, |analytic|, 1e-3)`.
pub fn gradient_check(inputs: &[Mat], build: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::detached();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss);
    let eval = |k: usize, xk: &Mat| {
        let g2 = Graph::detached();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, m)| g2.constant(if j == k { xk.clone() } else { m.clone() }))
            .collect();
        let l = build(&g2, &vs);
        g2.scalar(l)
    };
    let h = 1e-6;
    let mut worst = 0.0_f64;
    for (k, x) in inputs.iter().enumerate() {
        let ana = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Mat::zeros(x.rows, x.cols));
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (eval(k, &xp) - eval(k, &xm)) / (2.0 * h);
            let a = ana.data[i];
            let err = (a - num).abs() / num.abs().max(a.abs()).max(1e-3);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    worst
}

//! Dynamic tape for reverse-mode differentiation.
//!
//! Operations append nodes to a [`Graph`]; each node stores its value and a
//! backward closure producing parent gradients from the upstream gradient.
//! Only values created through [`Graph::leaf`] receive gradients from
//! [`Graph::backward`]; everything else is plumbing. Repeated backward calls
//! on the same graph re-derive identical values (the tape is never consumed).

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Result, VpaError};
use crate::tensor::{
    broadcast_shape, broadcast_zip, broadcast_zip3, matmul2, reduce_to, transpose2, Tensor,
};

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

/// Append-only computation tape. Cloning is shallow; a `Graph` and all of
/// its [`Var`]s share one tape. Single-owner: not Send/Sync by construction.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node on the tape.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}


impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, vec![], None, false)
    }

    /// Registered gradient target.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, vec![], None, true)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>, leaf: bool) -> Var {
        let mut g = self.inner.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node { value, parents, back });
        if leaf {
            g.leaves.push(id);
        }
        Var { graph: self.clone(), id }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar loss. Returns the gradient for every
    /// registered leaf; leaves unreachable from the loss get zeros.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        let inner = self.inner.borrow();
        let loss_node = inner
            .nodes
            .get(loss.id)
            .ok_or_else(|| VpaError::Contract("loss var not on this graph".into()))?;
        if loss_node.value.numel() != 1 {
            return Err(VpaError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape
            )));
        }
        if inner.leaves.is_empty() {
            return Err(VpaError::Contract("no registered leaves on graph".into()));
        }
        let leaf_set: HashSet<usize> = inner.leaves.iter().copied().collect();
        let mut acc: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        acc[loss.id] = Some(Tensor::ones_like(&loss_node.value));
        let mut out: HashMap<usize, Tensor> = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = acc[id].take() else { continue };
            let node = &inner.nodes[id];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut acc[p] {
                        Some(a) => a.add_in_place(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            if leaf_set.contains(&id) {
                out.insert(id, g);
            }
        }
        for &l in &inner.leaves {
            out.entry(l).or_insert_with(|| Tensor::zeros_like(&inner.nodes[l].value));
        }
        Ok(Grads { map: out })
    }
}

/// Gradients keyed by leaf.
pub struct Grads {
    map: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape.clone()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn same_graph(&self, o: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.graph.inner, &o.graph.inner) {
            return Err(VpaError::Contract("vars belong to different graphs".into()));
        }
        Ok(())
    }

    fn binary(&self, other: &Var, op: BinOp) -> Result<Var> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(&a.shape, &b.shape)?;
        let out = match op {
            BinOp::Add => broadcast_zip(&shape, &a, &b, |x, y| x + y),
            BinOp::Sub => broadcast_zip(&shape, &a, &b, |x, y| x - y),
            BinOp::Mul => broadcast_zip(&shape, &a, &b, |x, y| x * y),
            BinOp::Div => broadcast_zip(&shape, &a, &b, |x, y| x / y),
        };
        let (ash, bsh) = (a.shape.clone(), b.shape.clone());
        let back: BackFn = Box::new(move |go| match op {
            BinOp::Add => vec![reduce_to(go, &ash), reduce_to(go, &bsh)],
            BinOp::Sub => vec![reduce_to(go, &ash), reduce_to(&go.map(|v| -v), &bsh)],
            BinOp::Mul => vec![
                reduce_to(&broadcast_zip(&go.shape, go, &b, |g, y| g * y), &ash),
                reduce_to(&broadcast_zip(&go.shape, go, &a, |g, x| g * x), &bsh),
            ],
            BinOp::Div => vec![
                reduce_to(&broadcast_zip(&go.shape, go, &b, |g, y| g / y), &ash),
                reduce_to(
                    &broadcast_zip3(&go.shape, go, &a, &b, |g, x, y| -g * x / (y * y)),
                    &bsh,
                ),
            ],
        });
        Ok(self.graph.push(out, vec![self.id, other.id], Some(back), false))
    }

    pub fn add(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinOp::Add)
    }

    pub fn sub(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinOp::Sub)
    }

    pub fn mul(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinOp::Mul)
    }

    pub fn div(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinOp::Div)
    }

    fn unary(&self, f: impl Fn(f64) -> f64 + 'static, df: impl Fn(f64) -> f64 + 'static) -> Var {
        let x = self.value();
        let out = x.map(&f);
        let back: BackFn = Box::new(move |go| {
            let mut g = Tensor::zeros_like(&x);
            for i in 0..g.data.len() {
                g.data[i] = go.data[i] * df(x.data[i]);
            }
            vec![g]
        });
        self.graph.push(out, vec![self.id], Some(back), false)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x * c, move |_| c)
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, f64::exp)
    }

    /// log(max(x, 1e-12)); the floor keeps entropy terms finite at p = 0.
    pub fn ln_floored(&self) -> Var {
        const FLOOR: f64 = 1e-12;
        self.unary(
            |x| x.max(FLOOR).ln(),
            |x| if x > FLOOR { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sqrt_op(&self) -> Var {
        self.unary(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x| 2.0 * x)
    }

    /// GELU, tanh approximation; used consistently in training and adaptation.
    pub fn gelu(&self) -> Var {
        self.unary(gelu_val, gelu_deriv)
    }

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let out = Tensor::scalar(x.data.iter().sum());
        let xsh = x.shape.clone();
        let back: BackFn = Box::new(move |go| vec![Tensor::full(&xsh, go.item())]);
        self.graph.push(out, vec![self.id], Some(back), false)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over the last axis, keeping it as size 1 (for broadcasting back).
    pub fn sum_last_keep(&self) -> Var {
        let x = self.value();
        let d = *x.shape.last().expect("sum_last_keep on 0-d tensor");
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rows = x.numel() / d;
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            data.push(x.data[r * d..(r + 1) * d].iter().sum());
        }
        let out = Tensor { shape, data };
        let xsh = x.shape.clone();
        let back: BackFn = Box::new(move |go| {
            let mut g = Tensor::zeros(&xsh);
            for r in 0..rows {
                for c in 0..d {
                    g.data[r * d + c] = go.data[r];
                }
            }
            vec![g]
        });
        self.graph.push(out, vec![self.id], Some(back), false)
    }

    /// Row maxima over the last axis as a constant (detached). Subtracting
    /// this inside softmax is exact: softmax is shift-invariant per row.
    pub fn max_last_detached(&self) -> Var {
        let x = self.value();
        let d = *x.shape.last().expect("max_last_detached on 0-d tensor");
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let rows = x.numel() / d;
        let data = (0..rows)
            .map(|r| x.data[r * d..(r + 1) * d].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        self.graph.constant(Tensor { shape, data })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let x = self.value();
        let out = x.reshaped(shape)?;
        let xsh = x.shape.clone();
        let back: BackFn = Box::new(move |go| vec![go.reshaped(xsh.clone()).expect("reshape grad")]);
        Ok(self.graph.push(out, vec![self.id], Some(back), false))
    }

    /// 2-D matrix product. The right operand must be 2-D; the left operand
    /// may carry extra leading dimensions (folded row-wise).
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        if b.ndim() != 2 || a.ndim() < 2 || a.cols() != b.rows() {
            return Err(VpaError::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let q = b.rows();
        let r = b.cols();
        let p = a.numel() / q;
        let data = matmul2(&a.data, p, q, &b.data, r);
        let mut out_shape = a.shape.clone();
        *out_shape.last_mut().unwrap() = r;
        let out = Tensor { shape: out_shape, data };
        let ash = a.shape.clone();
        let back: BackFn = Box::new(move |go| {
            let bt = transpose2(&b.data, q, r);
            let ga = matmul2(&go.data, p, r, &bt, q);
            let at = transpose2(&a.data, p, q);
            let gb = matmul2(&at, q, p, &go.data, r);
            vec![
                Tensor { shape: ash.clone(), data: ga },
                Tensor { shape: vec![q, r], data: gb },
            ]
        });
        Ok(self.graph.push(out, vec![self.id, other.id], Some(back), false))
    }

    pub fn transpose(&self) -> Result<Var> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(VpaError::Shape(format!("transpose expects 2-d, got {:?}", x.shape)));
        }
        let (p, q) = (x.rows(), x.cols());
        let out = Tensor { shape: vec![q, p], data: transpose2(&x.data, p, q) };
        let back: BackFn = Box::new(move |go| {
            vec![Tensor { shape: vec![p, q], data: transpose2(&go.data, q, p) }]
        });
        Ok(self.graph.push(out, vec![self.id], Some(back), false))
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Result<Var> {
        let x = self.value();
        if x.ndim() != 2 || r.end > x.rows() {
            return Err(VpaError::Shape(format!(
                "slice_rows {:?} out of bounds for {:?}",
                r, x.shape
            )));
        }
        let c = x.cols();
        let out = Tensor {
            shape: vec![r.len(), c],
            data: x.data[r.start * c..r.end * c].to_vec(),
        };
        let rows = x.rows();
        let start = r.start;
        let back: BackFn = Box::new(move |go| {
            let mut g = Tensor::zeros(&[rows, c]);
            g.data[start * c..start * c + go.data.len()].copy_from_slice(&go.data);
            vec![g]
        });
        Ok(self.graph.push(out, vec![self.id], Some(back), false))
    }

    pub fn slice_cols(&self, r: Range<usize>) -> Result<Var> {
        let x = self.value();
        if x.ndim() != 2 || r.end > x.cols() {
            return Err(VpaError::Shape(format!(
                "slice_cols {:?} out of bounds for {:?}",
                r, x.shape
            )));
        }
        let (rows, cols) = (x.rows(), x.cols());
        let w = r.len();
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&x.data[i * cols + r.start..i * cols + r.end]);
        }
        let out = Tensor { shape: vec![rows, w], data };
        let start = r.start;
        let back: BackFn = Box::new(move |go| {
            let mut g = Tensor::zeros(&[rows, cols]);
            for i in 0..rows {
                for j in 0..w {
                    g.data[i * cols + start + j] = go.data[i * w + j];
                }
            }
            vec![g]
        });
        Ok(self.graph.push(out, vec![self.id], Some(back), false))
    }

    /// Gather rows by index (duplicates allowed); gradient scatter-adds.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Var> {
        let x = self.value();
        if x.ndim() != 2 || idx.iter().any(|&i| i >= x.rows()) {
            return Err(VpaError::Shape(format!(
                "select_rows {:?} out of bounds for {:?}",
                idx, x.shape
            )));
        }
        let (rows, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
        }
        let out = Tensor { shape: vec![idx.len(), c], data };
        let idx = idx.to_vec();
        let back: BackFn = Box::new(move |go| {
            let mut g = Tensor::zeros(&[rows, c]);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    g.data[i * c + j] += go.data[k * c + j];
                }
            }
            vec![g]
        });
        Ok(self.graph.push(out, vec![self.id], Some(back), false))
    }

    /// Temperature softmax over the last axis, with max-subtraction.
    pub fn softmax_temp(&self, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(VpaError::Param(format!("softmax temperature must be > 0, got {tau}")));
        }
        let zs = self.mul_scalar(1.0 / tau);
        let m = zs.max_last_detached();
        let e = zs.sub(&m)?.exp();
        let s = e.sum_last_keep();
        e.div(&s)
    }
}

/// Vertical concatenation of 2-D vars with equal column counts.
pub fn concat_rows(vars: &[Var]) -> Result<Var> {
    let first = vars.first().ok_or_else(|| VpaError::Contract("concat_rows of nothing".into()))?;
    let graph = first.graph.clone();
    let vals: Vec<Tensor> = vars.iter().map(|v| v.value()).collect();
    let c = vals[0].cols();
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(vals.len());
    for v in &vals {
        if v.ndim() != 2 || v.cols() != c {
            return Err(VpaError::Shape(format!(
                "concat_rows: {:?} does not match column count {}",
                v.shape, c
            )));
        }
        row_counts.push(v.rows());
        data.extend_from_slice(&v.data);
    }
    let total: usize = row_counts.iter().sum();
    let out = Tensor { shape: vec![total, c], data };
    let parents: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let back: BackFn = Box::new(move |go| {
        let mut grads = Vec::with_capacity(row_counts.len());
        let mut off = 0usize;
        for &rc in &row_counts {
            grads.push(Tensor {
                shape: vec![rc, c],
                data: go.data[off * c..(off + rc) * c].to_vec(),
            });
            off += rc;
        }
        grads
    });
    Ok(graph.push(out, parents, Some(back), false))
}

/// Attention weights with a gated key block. Keys outside `range` are
/// softmax-normalized among themselves (weights A), keys inside `range`
/// likewise (weights B), and the row is [A, g·B]: the gated block
/// contributes an extra value reading scaled by exactly g, independent of
/// the raw score scales. At g = 0 the ungated block reproduces the plain
/// softmax bit for bit and the gated keys are inert; g may be negative,
/// subtracting the gated block's value average.
pub fn gated_softmax_rows(scores: &Var, gate: &Var, range: Range<usize>) -> Result<Var> {
    let gv = gate.value();
    if gv.numel() != 1 {
        return Err(VpaError::Contract(format!("gate must be scalar, got {:?}", gv.shape)));
    }
    let sv = scores.value();
    if sv.ndim() != 2 {
        return Err(VpaError::Shape(format!("scores must be 2-d, got {:?}", sv.shape)));
    }
    let (n, len) = (sv.rows(), sv.cols());
    if range.start >= range.end || range.end > len || range.end - range.start >= len {
        return Err(VpaError::Shape(format!(
            "gate range {range:?} must be a non-empty proper subset of 0..{len}"
        )));
    }
    let g = gv.item();
    let (rs, re) = (range.start, range.end);
    let in_range = move |j: usize| j >= rs && j < re;

    let mut out = Tensor::zeros(&[n, len]);
    let mut a = Tensor::zeros(&[n, len]);
    let mut b = Tensor::zeros(&[n, len]);
    for i in 0..n {
        let row = &sv.data[i * len..(i + 1) * len];
        let mut m_r = f64::NEG_INFINITY;
        let mut m_p = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if in_range(j) {
                m_p = m_p.max(s);
            } else {
                m_r = m_r.max(s);
            }
        }
        let mut z_r = 0.0;
        let mut z_p = 0.0;
        for (j, &s) in row.iter().enumerate() {
            let e = if in_range(j) { (s - m_p).exp() } else { (s - m_r).exp() };
            if in_range(j) {
                z_p += e;
            } else {
                z_r += e;
            }
            out.data[i * len + j] = e;
        }
        for j in 0..len {
            let e = out.data[i * len + j];
            if in_range(j) {
                let w = e / z_p;
                b.data[i * len + j] = w;
                out.data[i * len + j] = g * w;
            } else {
                let w = e / z_r;
                a.data[i * len + j] = w;
                out.data[i * len + j] = w;
            }
        }
    }

    let back: BackFn = Box::new(move |go| {
        let mut ds = Tensor::zeros(&[n, len]);
        let mut dg = 0.0;
        for i in 0..n {
            let o = i * len;
            let mut dot_a = 0.0;
            let mut dot_b = 0.0;
            let mut mass_b = 0.0;
            for j in 0..len {
                if in_range(j) {
                    dot_b += go.data[o + j] * g * b.data[o + j];
                    mass_b += go.data[o + j] * b.data[o + j];
                } else {
                    dot_a += go.data[o + j] * a.data[o + j];
                }
            }
            for j in 0..len {
                if in_range(j) {
                    ds.data[o + j] = b.data[o + j] * (go.data[o + j] * g - dot_b);
                } else {
                    ds.data[o + j] = a.data[o + j] * (go.data[o + j] - dot_a);
                }
            }
            dg += mass_b;
        }
        vec![ds, Tensor::scalar(dg)]
    });
    Ok(scores.graph.push(out, vec![scores.id, gate.id], Some(back), false))
}

/// Per-slice normalization over the last axis, then scale and shift.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(VpaError::Param(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let d = *x.shape().last().ok_or_else(|| VpaError::Shape("layer_norm on 0-d".into()))? as f64;
    let mu = x.sum_last_keep().mul_scalar(1.0 / d);
    let xc = x.sub(&mu)?;
    let var = xc.square().sum_last_keep().mul_scalar(1.0 / d);
    let xn = xc.div(&var.add_scalar(eps).sqrt_op())?;
    xn.mul(gamma)?.add(beta)
}

pub fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::finite_diff_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let g = Graph::new();
        let id = g.constant(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t2(2, 1, vec![3.0, 4.0]));
        assert_eq!(id.matmul(&v).unwrap().value().data, vec![3.0, 4.0]);

        let a = g.constant(t2(1, 2, vec![1.0, 2.0]));
        let b = g.constant(t2(2, 1, vec![3.0, 4.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data, vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let g = Graph::new();
        let out = g.constant(a.clone()).matmul(&g.constant(b.clone())).unwrap().value();
        // independent triple-loop reference
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.at2(i, k) * b.at2(k, j);
                }
                assert!((out.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let g = Graph::new();
        let a = g.constant(t2(2, 3, vec![0.0; 6]));
        let b = g.constant(t2(2, 2, vec![0.0; 4]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_temp_examples() {
        let g = Graph::new();
        let z = g.constant(t2(1, 2, vec![0.0, 0.0]));
        let p = z.softmax_temp(1.0).unwrap().value();
        assert!((p.data[0] - 0.5).abs() < 1e-12 && (p.data[1] - 0.5).abs() < 1e-12);

        let z = g.constant(t2(1, 2, vec![2.0, 0.0]));
        let p = z.softmax_temp(1.0).unwrap().value();
        // exp(2)/(exp(2)+1), high-precision scalar evaluation
        let e2 = 2.0f64.exp();
        assert!((p.data[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p.data[0] - 0.8808).abs() < 5e-5);
        assert!((p.data[1] - 0.1192).abs() < 5e-5);

        assert!(z.softmax_temp(0.0).is_err());
        assert!(z.softmax_temp(-1.0).is_err());
    }

    #[test]
    fn softmax_is_probability_vector_at_extreme_logits() {
        let g = Graph::new();
        let z = g.constant(t2(1, 3, vec![1e4, -1e4, 0.0]));
        let p = z.softmax_temp(1.0).unwrap().value();
        assert!(p.data.iter().all(|&v| v >= 0.0));
        assert!((p.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_argmax_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let tau = rng.gen_range(0.05..5.0);
            let g = Graph::new();
            let p = g.constant(t2(1, 6, z.clone())).softmax_temp(tau).unwrap().value();
            let am_z = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let am_p = p.data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(am_z, am_p);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::new();
        // constant slice: zero numerator
        let x = g.constant(t2(1, 3, vec![5.0, 5.0, 5.0]));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let out = layer_norm(&x, &gamma, &beta, 1e-6).unwrap().value();
        assert!(out.max_abs() < 1e-6);

        // x=[1,-1], gamma=2, beta=1 -> ~[3,-1]
        let x = g.constant(t2(1, 2, vec![1.0, -1.0]));
        let gamma = g.constant(Tensor::full(&[2], 2.0));
        let beta = g.constant(Tensor::full(&[2], 1.0));
        let out = layer_norm(&x, &gamma, &beta, 1e-6).unwrap().value();
        assert!((out.data[0] - 3.0).abs() < 1e-5);
        assert!((out.data[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_output_mean_equals_beta_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = Graph::new();
            let x = g.constant(Tensor::randn(&[4, 8], 2.0, &mut rng));
            // mean(out) = mean(beta) requires a uniform scale: mean of the
            // normalized slice is exactly zero
            let gamma = g.constant(Tensor::full(&[8], rng.gen_range(0.1..3.0)));
            let beta_t = Tensor::randn(&[8], 1.0, &mut rng);
            let beta_mean = beta_t.data.iter().sum::<f64>() / 8.0;
            let beta = g.constant(beta_t);
            let out = layer_norm(&x, &gamma, &beta, 1e-6).unwrap().value();
            for r in 0..4 {
                let m = out.data[r * 8..(r + 1) * 8].iter().sum::<f64>() / 8.0;
                assert!((m - beta_mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_val(0.0), 0.0);
        // asymptote: gelu(x) ~ x for large x
        for x in [6.0, 8.0, 10.0] {
            assert!((gelu_val(x) - x).abs() < 1e-3);
        }
        // tanh approximation at 1.0 is within 1e-3 of the exact-erf value
        assert!((gelu_val(1.0) - 0.8412).abs() < 1e-3);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let loss = p.sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&p).unwrap().data, vec![1.0; 6]);
    }

    #[test]
    fn backward_quadratic() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = p.mul(&p).unwrap().sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&p).unwrap().data, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = p.mul_scalar(2.0);
        assert!(matches!(g.backward(&loss), Err(VpaError::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let q = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = p.sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&q).unwrap().data, vec![0.0; 3]);
    }

    #[test]
    fn repeated_backward_rederives_identical_values() {
        let g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let loss = p.square().sum_all();
        let g1 = g.backward(&loss).unwrap().wrt(&p).unwrap().clone();
        let g2 = g.backward(&loss).unwrap().wrt(&p).unwrap().clone();
        assert_eq!(g1.data, g2.data);
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..20u64 {
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::randn(&[3, 4], 1.0, &mut local);
            let w = Tensor::randn(&[4, 4], 0.7, &mut rng);
            let gamma = Tensor::randn(&[4], 0.5, &mut rng).map(|v| v + 1.0);
            let beta = Tensor::randn(&[4], 0.3, &mut rng);
            let f = |x: &Tensor| -> f64 {
                let g = Graph::new();
                let xv = g.constant(x.clone());
                let h = xv.matmul(&g.constant(w.clone())).unwrap().gelu();
                let n = layer_norm(
                    &h,
                    &g.constant(gamma.clone()),
                    &g.constant(beta.clone()),
                    1e-6,
                )
                .unwrap();
                let p = n.softmax_temp(0.7).unwrap();
                let h_rows = p.mul(&p.ln_floored()).unwrap().sum_last_keep().mul_scalar(-1.0);
                h_rows.sum_all().value().item()
            };
            let fd = finite_diff_gradient(&f, &x0, 1e-5).unwrap();

            let g = Graph::new();
            let xv = g.leaf(x0.clone());
            let h = xv.matmul(&g.constant(w.clone())).unwrap().gelu();
            let n =
                layer_norm(&h, &g.constant(gamma.clone()), &g.constant(beta.clone()), 1e-6).unwrap();
            let p = n.softmax_temp(0.7).unwrap();
            let h_rows = p.mul(&p.ln_floored()).unwrap().sum_last_keep().mul_scalar(-1.0);
            let loss = h_rows.sum_all();
            let analytic = g.backward(&loss).unwrap().wrt(&xv).unwrap().clone();

            let num: f64 =
                analytic.data.iter().zip(&fd.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let den: f64 = fd.data.iter().map(|b| b * b).sum::<f64>().max(1e-30);
            assert!(
                (num / den).sqrt() < 1e-4,
                "seed {seed}: rel err {}",
                (num / den).sqrt()
            );
        }
    }

    #[test]
    fn gated_softmax_zero_gate_matches_plain_softmax_without_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = Tensor::randn(&[4, 6], 1.5, &mut rng);
        let g = Graph::new();
        let s = g.constant(scores.clone());
        let gate = g.constant(Tensor::scalar(0.0));
        let a = gated_softmax_rows(&s, &gate, 2..4).unwrap().value();
        // reference: drop gated columns, plain softmax over the rest
        for r in 0..4 {
            let keep = [0usize, 1, 4, 5];
            let mx = keep.iter().map(|&c| scores.at2(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = keep.iter().map(|&c| (scores.at2(r, c) - mx).exp()).sum();
            for &c in &keep {
                let expect = (scores.at2(r, c) - mx).exp() / z;
                assert!((a.at2(r, c) - expect).abs() < 1e-12);
            }
            assert!(a.at2(r, 2).abs() < 1e-15 && a.at2(r, 3).abs() < 1e-15);
        }
    }

    #[test]
    fn gated_softmax_block_mass_is_gate_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // prompt scores far above the rest must still get exactly g/(1+g)
        let mut scores = Tensor::randn(&[3, 7], 1.0, &mut rng);
        for r in 0..3 {
            for c in 4..7 {
                scores.data[r * 7 + c] += 40.0;
            }
        }
        let g = Graph::new();
        let s = g.constant(scores);
        for gv in [0.0, 0.003, 0.5, 4.0, -0.25] {
            let gate = g.constant(Tensor::scalar(gv));
            let a = gated_softmax_rows(&s, &gate, 4..7).unwrap().value();
            for r in 0..3 {
                let mass: f64 = (4..7).map(|c| a.at2(r, c)).sum();
                let real: f64 = (0..4).map(|c| a.at2(r, c)).sum();
                assert!((mass - gv).abs() < 1e-12, "gate {gv}: mass {mass}");
                assert!((real - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_softmax_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores = Tensor::randn(&[3, 5], 1.2, &mut rng);
        let weights = Tensor::randn(&[3, 5], 1.0, &mut rng);
        for gv in [0.0, 0.35, 2.0] {
            let loss_of = |s: &Tensor, gt: f64| -> f64 {
                let g = Graph::new();
                let sv = g.constant(s.clone());
                let gate = g.constant(Tensor::scalar(gt));
                let a = gated_softmax_rows(&sv, &gate, 3..5).unwrap();
                a.mul(&g.constant(weights.clone())).unwrap().sum_all().value().item()
            };
            let g = Graph::new();
            let sv = g.leaf(scores.clone());
            let gate = g.leaf(Tensor::scalar(gv));
            let a = gated_softmax_rows(&sv, &gate, 3..5).unwrap();
            let loss = a.mul(&g.constant(weights.clone())).unwrap().sum_all();
            let grads = g.backward(&loss).unwrap();

            let fd_s = finite_diff_gradient(&|s: &Tensor| loss_of(s, gv), &scores, 1e-6).unwrap();
            let an_s = grads.wrt(&sv).unwrap();
            for (x, y) in an_s.data.iter().zip(&fd_s.data) {
                assert!((x - y).abs() < 1e-7, "score grad {x} vs fd {y} at gate {gv}");
            }
            let fd_g = (loss_of(&scores, gv + 1e-6) - loss_of(&scores, gv - 1e-6)) / 2e-6;
            let an_g = grads.wrt(&gate).unwrap().item();
            assert!((an_g - fd_g).abs() < 1e-6, "gate grad {an_g} vs fd {fd_g} at gate {gv}");
        }
    }
}

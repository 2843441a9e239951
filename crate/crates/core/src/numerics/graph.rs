//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied during a forward pass; node
//! values are computed eagerly. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that (transitively) depends on a
//! parameter or a gradient-tracked input. Graphs are single-use: build one per
//! forward/backward step.

use std::collections::HashMap;
use std::rc::Rc;

use super::attention::{self, AttnMask};
use super::conv::{self, ConvGeom, Front, TemporalWindow};
use super::gemm;
use super::norm;
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Supplies temporal context to causal convolutions. The default (no
/// context) pads `kt - 1` zero frames before frame 0. Context-parallel shards
/// install an implementation that exchanges halos with neighbouring ranks.
pub trait TemporalContext<F: Scalar> {
    fn conv_window(&mut self, input: &Tensor<F>, kt: usize, stride_t: usize)
        -> Result<TemporalWindow<F>>;

    /// Global index of the first local frame at the current temporal level.
    fn frame_start(&self) -> usize;

    fn set_frame_start(&mut self, start: usize);
}

/// Test-only fault switches for the verification report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Split temporal padding symmetrically instead of placing it before
    /// frame 0, which lets outputs see future frames.
    NonCausalPadding,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, win: TemporalWindow<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<F>, inv_std: Vec<F> },
    LayerNorm { x: Var, inv_std: Vec<F> },
    Silu(Var),
    Gelu(Var),
    LeakyRelu(Var, F),
    Exp(Var),
    Square(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask>, probs: Vec<F> },
    Rope { x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>>, heads: usize },
    Gather { x: Var, idx: Rc<Vec<u32>> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    WeightedSum { x: Var, w: Rc<Vec<F>> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Sentinel gather index producing a zero.
pub const GATHER_ZERO: u32 = u32::MAX;

pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
    temporal: Option<Box<dyn TemporalContext<F>>>,
    fault: Fault,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
    (y, dy)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_of: HashMap::new(),
            temporal: None,
            fault: Fault::None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = fault;
        self
    }

    pub fn set_temporal_context(&mut self, ctx: Box<dyn TemporalContext<F>>) {
        self.temporal = Some(ctx);
    }

    pub fn take_temporal_context(&mut self) -> Option<Box<dyn TemporalContext<F>>> {
        self.temporal.take()
    }

    pub fn has_temporal_context(&self) -> bool {
        self.temporal.is_some()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    fn check_bias(&self, x: Var, b: Var) -> Result<usize> {
        let d = self.value(x).last_dim();
        if self.value(b).len() != d {
            return Err(Error::shape(format!(
                "bias of {} elements for last dim {d}",
                self.value(b).len()
            )));
        }
        Ok(d)
    }

    /// `x + b` with `b` broadcast over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.check_bias(x, b)?;
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for r in v.data_mut().chunks_exact_mut(d) {
            for (o, &bv) in r.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let t = self.tracked(&[x, b]);
        Ok(self.push(v, Op::AddBias(x, b), t))
    }

    /// `x * s` with `s` broadcast over every row of the last axis.
    pub fn mul_bias(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.check_bias(x, s)?;
        let sd = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for r in v.data_mut().chunks_exact_mut(d) {
            for (o, &sv) in r.iter_mut().zip(&sd) {
                *o *= sv;
            }
        }
        let t = self.tracked(&[x, s]);
        Ok(self.push(v, Op::MulBias(x, s), t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let v = self.value(x).map(|a| a * c);
        let t = self.tracked(&[x]);
        self.push(v, Op::Scale(x, c), t)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let v = self.value(x).map(|a| a + c);
        let t = self.tracked(&[x]);
        self.push(v, Op::AddScalar(x), t)
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            t,
        ))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let din = *xs.last().unwrap();
        let rows = self.value(x).rows();
        let x2 = self.reshape(x, &[rows, din])?;
        let y = self.matmul(x2, w)?;
        let y = match b {
            Some(b) => self.add_bias(y, b)?,
            None => y,
        };
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = self.shape(w)[1];
        self.reshape(y, &out_shape)
    }

    /// Causal 3D convolution: `x` is `(T,H,W,Cin)`, `w` is `(kt,kh,kw,Cin,Cout)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeom::from_kernel(self.shape(w), stride)?;
        let win = if let Some(ctx) = self.temporal.as_mut() {
            ctx.conv_window(&self.nodes[x.0].value, geom.kt, stride.0)?
        } else {
            let t_in = self.shape(x)[0];
            match self.fault {
                Fault::None => {
                    if (t_in - 1) % stride.0 != 0 {
                        return Err(Error::invalid(format!(
                            "temporal stride {} does not divide padded extent of {t_in} frames",
                            stride.0
                        )));
                    }
                    TemporalWindow::causal(geom.kt)
                }
                Fault::NonCausalPadding => {
                    let back = (geom.kt - 1) / 2;
                    TemporalWindow {
                        front: Front::Zeros(geom.kt - 1 - back),
                        back,
                        phase: 0,
                    }
                }
            }
        };
        let y = conv::conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &geom,
            &win,
        )?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let t = self.tracked(&deps);
        Ok(self.push(y, Op::Conv3d { x, w, b, geom, win }, t))
    }

    /// Per-frame group norm with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let out = norm::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups)?;
        let t = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            out.y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            t,
        ))
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (y, inv_std) = norm::layer_norm_forward(self.value(x))?;
        let t = self.tracked(&[x]);
        Ok(self.push(y, Op::LayerNorm { x, inv_std }, t))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let t = self.tracked(&[x]);
        self.push(v, Op::Silu(x), t)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| gelu_parts(a).0);
        let t = self.tracked(&[x]);
        self.push(v, Op::Gelu(x), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let v = self
            .value(x)
            .map(|a| if a > F::zero() { a } else { a * s });
        let t = self.tracked(&[x]);
        self.push(v, Op::LeakyRelu(x, s), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        let t = self.tracked(&[x]);
        self.push(v, Op::Exp(x), t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        let t = self.tracked(&[x]);
        self.push(v, Op::Square(x), t)
    }

    /// Multi-head attention over `(L, heads*dh)` operands.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
    ) -> Result<Var> {
        let (o, probs) =
            attention::attention_forward(self.value(q), self.value(k), self.value(v), heads, &mask)?;
        let t = self.tracked(&[q, k, v]);
        Ok(self.push(
            o,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            t,
        ))
    }

    /// Rotary embedding: `x` is `(L, heads*dh)`; `cos`/`sin` are `(L, dh/2)`
    /// tables shared across heads. Pair `j` of each head is channels
    /// `(2j, 2j+1)`.
    pub fn rope(&mut self, x: Var, cos: Rc<Vec<F>>, sin: Rc<Vec<F>>, heads: usize) -> Result<Var> {
        let (l, d) = (self.shape(x)[0], self.value(x).last_dim());
        if self.value(x).rank() != 2 || d % heads != 0 {
            return Err(Error::shape("rope input must be (L, heads*dh)"));
        }
        let half = d / heads / 2;
        if cos.len() != l * half || sin.len() != l * half {
            return Err(Error::shape("rope tables must be (L, dh/2)"));
        }
        let y = rope_apply(self.value(x), &cos, &sin, heads, false);
        let t = self.tracked(&[x]);
        Ok(self.push(y, Op::Rope { x, cos, sin, heads }, t))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Error::shape("gather index count does not match output shape"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i == GATHER_ZERO {
                out.push(F::zero());
            } else {
                let v = *src
                    .get(i as usize)
                    .ok_or_else(|| Error::shape(format!("gather index {i} out of range")))?;
                out.push(v);
            }
        }
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { x, idx }, t))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat {s:?} with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = self.tracked(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            t,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(&[x]);
        Ok(self.push(v, Op::Reshape(x), t))
    }

    /// Rows `[start, end)` of axis 0.
    pub fn slice_outer(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::shape(format!("slice [{start},{end}) of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let idx: Vec<u32> = ((start * inner) as u32..(end * inner) as u32).collect();
        let mut out = shape;
        out[0] = end - start;
        self.gather(x, Rc::new(idx), &out)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if start >= end || end > d {
            return Err(Error::shape(format!("column slice [{start},{end}) of {shape:?}")));
        }
        let rows = self.value(x).rows();
        let mut idx = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            idx.extend((r * d + start) as u32..(r * d + end) as u32);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = end - start;
        self.gather(x, Rc::new(idx), &out)
    }

    /// Selects rows of a 2-D tensor (embedding lookup / broadcasting).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("select_rows expects a 2-D tensor"));
        }
        let d = s[1];
        let mut idx = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= s[0] {
                return Err(Error::shape(format!("row {r} out of {}", s[0])));
            }
            idx.extend((r * d) as u32..(r * d + d) as u32);
        }
        self.gather(x, Rc::new(idx), &[rows.len(), d])
    }

    /// Nearest-neighbour upsampling of `(T,H,W,C)`. Temporal upsampling keeps
    /// global frame 0 single and doubles every later frame, so `n` frames
    /// starting at frame 0 become `1 + 2(n-1)`.
    pub fn upsample(&mut self, x: Var, temporal: bool, spatial: bool) -> Result<Var> {
        let [t, h, w, c] = *self.shape(x) else {
            return Err(Error::shape("upsample input must be (T,H,W,C)"));
        };
        let start = self.temporal.as_ref().map_or(0, |c| c.frame_start());
        let src_frames: Vec<usize> = if temporal {
            let mut v = Vec::new();
            for f in 0..t {
                if start + f == 0 {
                    v.push(f);
                } else {
                    v.push(f);
                    v.push(f);
                }
            }
            v
        } else {
            (0..t).collect()
        };
        let s = if spatial { 2 } else { 1 };
        let (ho, wo) = (h * s, w * s);
        let mut idx = Vec::with_capacity(src_frames.len() * ho * wo * c);
        for &f in &src_frames {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ((f * h + y / s) * w + xx / s) * c;
                    idx.extend(base as u32..(base + c) as u32);
                }
            }
        }
        if temporal {
            if let Some(ctx) = self.temporal.as_mut() {
                ctx.set_frame_start(if start == 0 { 0 } else { 2 * start - 1 });
            }
        }
        self.gather(x, Rc::new(idx), &[src_frames.len(), ho, wo, c])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let t = self.tracked(&[x]);
        self.push(v, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Rc<Vec<F>>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum weight length mismatch"));
        }
        let mut s = 0.0f64;
        for (&a, &b) in self.value(x).data().iter().zip(w.iter()) {
            s += (a * b).f64();
        }
        let s = F::of(s);
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, t))
    }

    /// Mean squared difference of two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            param_of: self.param_of.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(vb, |x, y| x * y)?);
                self.acc(grads, *b, g.zip_map(va, |x, y| x * y)?);
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let d = g.last_dim();
                let mut db = vec![F::zero(); d];
                for r in g.data().chunks_exact(d) {
                    for (o, &v) in db.iter_mut().zip(r) {
                        *o += v;
                    }
                }
                let shape = self.shape(*b).to_vec();
                self.acc(grads, *b, Tensor::from_parts(shape, db));
            }
            Op::MulBias(x, s) => {
                let d = g.last_dim();
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                let mut dx = g.clone();
                let mut ds = vec![F::zero(); d];
                for (r, (gr, xr)) in dx
                    .data_mut()
                    .chunks_exact_mut(d)
                    .zip(g.data().chunks_exact(d).zip(xv.chunks_exact(d)))
                {
                    for c in 0..d {
                        r[c] = gr[c] * sv[c];
                        ds[c] += gr[c] * xr[c];
                    }
                }
                self.acc(grads, *x, dx);
                let shape = self.shape(*s).to_vec();
                self.acc(grads, *s, Tensor::from_parts(shape, ds));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].tracked {
                    let da = gemm::matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].tracked {
                    let db = gemm::matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Conv3d { x, w, b, geom, win } => {
                let need_x = self.nodes[x.0].tracked;
                let cg = conv::conv3d_backward(self.value(*x), self.value(*w), geom, win, g, need_x)?;
                if let Some(dx) = cg.input {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, cg.kernel);
                if let Some(b) = b {
                    self.acc(grads, *b, cg.bias);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = norm::group_norm_backward(
                    self.shape(*x),
                    self.value(*gamma),
                    *groups,
                    xhat,
                    inv_std,
                    g,
                );
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::LayerNorm { x, inv_std } => {
                let dx = norm::layer_norm_backward(&node.value, inv_std, g);
                self.acc(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, a| {
                    let s = sigmoid(a);
                    gv * (s + a * s * (F::one() - s))
                })?;
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, a| gv * gelu_parts(a).1)?;
                self.acc(grads, *x, dx);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let dx = g.zip_map(self.value(*x), |gv, a| if a > F::zero() { gv } else { gv * s })?;
                self.acc(grads, *x, dx);
            }
            Op::Exp(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y)?;
                self.acc(grads, *x, dx);
            }
            Op::Square(x) => {
                let two = F::of(2.0);
                let dx = g.zip_map(self.value(*x), |gv, a| gv * two * a)?;
                self.acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let ag = attention::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    mask,
                    probs,
                    g,
                );
                self.acc(grads, *q, ag.q);
                self.acc(grads, *k, ag.k);
                self.acc(grads, *v, ag.v);
            }
            Op::Rope { x, cos, sin, heads } => {
                let dx = rope_apply(g, cos, sin, *heads, true);
                self.acc(grads, *x, dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (&i, &gv) in idx.iter().zip(g.data()) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += gv;
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let w = ps[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + off..o * total + off + w]);
                    }
                    off += w;
                    self.acc(grads, p, Tensor::from_parts(ps, d));
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
            Op::WeightedSum { x, w } => {
                let gv = g.data()[0];
                let shape = self.shape(*x).to_vec();
                let d = w.iter().map(|&wi| wi * gv).collect();
                self.acc(grads, *x, Tensor::from_parts(shape, d));
            }
        }
        Ok(())
    }
}

fn rope_apply<F: Scalar>(x: &Tensor<F>, cos: &[F], sin: &[F], heads: usize, inverse: bool) -> Tensor<F> {
    let (l, d) = (x.shape()[0], x.last_dim());
    let dh = d / heads;
    let half = dh / 2;
    let mut out = x.clone();
    let od = out.data_mut();
    let xd = x.data();
    for i in 0..l {
        for h in 0..heads {
            for j in 0..half {
                let (c, s) = (cos[i * half + j], sin[i * half + j]);
                let s = if inverse { -s } else { s };
                let base = i * d + h * dh + 2 * j;
                let (a, b) = (xd[base], xd[base + 1]);
                od[base] = a * c - b * s;
                od[base + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_of: HashMap<usize, ParamId>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter reached by the graph.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<F>)> {
        let mut out: Vec<(ParamId, &Tensor<F>)> = self
            .param_of
            .iter()
            .filter_map(|(&node, &id)| self.grads[node].as_ref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Gradients laid out like `store` (zeros for unreached parameters).
    pub fn to_store(&self, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        let mut out: Vec<Tensor<F>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for (id, g) in self.params() {
            out[id.index()] = g.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[2]));
        let x = g.input(Tensor::ones(&[2]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(c).is_none());
        assert!(gr.get(x).is_some());
    }

    #[test]
    fn strided_conv_requires_aligned_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[4, 2, 2, 1]));
        let w = g.constant(Tensor::zeros(&[3, 1, 1, 1, 1]));
        assert!(g.conv3d(x, w, None, (2, 1, 1)).is_err());
        let x = g.constant(Tensor::zeros(&[5, 2, 2, 1]));
        assert_eq!(g.conv3d(x, w, None, (2, 1, 1)).map(|v| g.shape(v)[0]).unwrap(), 3);
    }

    #[test]
    fn temporal_upsample_keeps_first_frame_single() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[3, 1, 1, 1], vec![0.0, 1.0, 2.0]).unwrap());
        let y = g.upsample(x, true, true).unwrap();
        assert_eq!(g.shape(y), &[5, 2, 2, 1]);
        let frames: Vec<f32> = g.value(y).data().chunks(4).map(|c| c[0]).collect();
        assert_eq!(frames, vec![0.0, 1.0, 1.0, 2.0, 2.0]);
    }
}

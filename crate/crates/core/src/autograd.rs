//! Two interchangeable executors for network code.
//!
//! Network forward passes are written once against [`Backend`]. [`Eval`]
//! runs them directly and drops intermediates as soon as they go out of
//! scope; [`Graph`] records every operation on a tape so that gradients
//! can be taken. Both call the same kernels in `ops`, so an inference pass
//! and a recorded pass over the same inputs agree bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::rc::Rc;

use crate::entropy::models::{
    gaussian_likelihood, BottleneckGrads, BottleneckParams, LIKELIHOOD_BOUND,
};
use crate::error::Result;
use crate::kernel_synthesis::{self, KernelField, KernelPair};
use crate::ops;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Parameter names of a factorized prior under `prefix`, in op order.
pub fn bottleneck_names(prefix: &str) -> [String; 11] {
    [
        format!("{prefix}.matrix0"),
        format!("{prefix}.matrix1"),
        format!("{prefix}.matrix2"),
        format!("{prefix}.matrix3"),
        format!("{prefix}.bias0"),
        format!("{prefix}.bias1"),
        format!("{prefix}.bias2"),
        format!("{prefix}.bias3"),
        format!("{prefix}.factor0"),
        format!("{prefix}.factor1"),
        format!("{prefix}.factor2"),
    ]
}

fn bottleneck_view<'t>(t: [&'t Tensor; 11]) -> BottleneckParams<'t> {
    BottleneckParams {
        matrices: [t[0], t[1], t[2], t[3]],
        biases: [t[4], t[5], t[6], t[7]],
        factors: [t[8], t[9], t[10]],
    }
}

pub trait Backend {
    type V: Clone;

    fn param(&mut self, name: &str) -> Result<Self::V>;
    /// A value that takes no gradient.
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Self::V;
    fn upsample2x(&mut self, x: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn softmax_channels(&mut self, x: &Self::V) -> Self::V;
    fn concat(&mut self, xs: &[&Self::V]) -> Self::V;
    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, s: f32) -> Self::V;
    /// `x * m` with `m` of shape `[1,H,W]` broadcast over channels.
    fn mul_plane(&mut self, x: &Self::V, m: &Self::V) -> Self::V;
    /// `max(x, bound)`; gradients pass where `x >= bound` or where they
    /// would push `x` upwards.
    fn lower_bound(&mut self, x: &Self::V, bound: f32) -> Self::V;
    /// Kernel synthesis; `kernels` alternates vertical and horizontal
    /// arrays, one pair per reference.
    fn synthesize(&mut self, refs: &[&Self::V], kernels: &[&Self::V]) -> Self::V;
    fn gaussian_likelihood(&mut self, y: &Self::V, mean: &Self::V, scale: &Self::V) -> Self::V;
    fn factorized_likelihood(&mut self, z: &Self::V, prefix: &str) -> Result<Self::V>;
    /// `-sum(log2 p)` as a one-element tensor.
    fn neg_log2_sum(&mut self, p: &Self::V) -> Self::V;
    /// Mean squared difference as a one-element tensor.
    fn mse(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn detach(&mut self, x: &Self::V) -> Self::V;
}

/// A tensor that is either a borrowed parameter or an owned intermediate.
#[derive(Debug, Clone)]
pub enum Val<'a> {
    Borrowed(&'a Tensor),
    Owned(Rc<Tensor>),
}

impl Deref for Val<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Val::Borrowed(t) => t,
            Val::Owned(t) => t,
        }
    }
}

fn own<'a>(t: Tensor) -> Val<'a> {
    Val::Owned(Rc::new(t))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn mul_plane_fwd(x: &Tensor, m: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    assert_eq!(m.shape(), &[1, h, w]);
    let hw = h * w;
    let mut out = x.clone();
    for ch in 0..c {
        for (o, &mv) in out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(m.data()) {
            *o *= mv;
        }
    }
    out
}

fn field_from(kernels: &[&Tensor]) -> KernelField<f32> {
    let pairs = kernels
        .chunks(2)
        .map(|p| KernelPair {
            vertical: p[0].clone(),
            horizontal: p[1].clone(),
        })
        .collect();
    KernelField::new(pairs).expect("kernel shapes checked by caller")
}

fn synth_fwd(refs: &[&Tensor], kernels: &[&Tensor]) -> Tensor {
    assert_eq!(kernels.len(), 2 * refs.len());
    let mut out = Tensor::zeros(refs[0].shape());
    for (r, k) in refs.iter().zip(kernels.chunks(2)) {
        kernel_synthesis::accumulate_term(r, k[0], k[1], &mut out).expect("synthesis shapes");
    }
    out
}

fn gaussian_fwd(y: &Tensor, m: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(y.shape(), m.shape());
    assert_eq!(y.shape(), s.shape());
    let data = y
        .data()
        .iter()
        .zip(m.data())
        .zip(s.data())
        .map(|((&y, &m), &s)| gaussian_likelihood(y, m, s).0.max(LIKELIHOOD_BOUND))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

fn factorized_fwd(z: &Tensor, p: &BottleneckParams) -> Tensor {
    let (c, h, w) = z.chw();
    assert_eq!(c, p.channels(), "bottleneck channel count");
    let hw = h * w;
    let mut out = Tensor::zeros(z.shape());
    for ch in 0..c {
        for i in 0..hw {
            let v = z.data()[ch * hw + i];
            out.data_mut()[ch * hw + i] = p.likelihood(ch, v).max(LIKELIHOOD_BOUND);
        }
    }
    out
}

fn neg_log2_sum_fwd(p: &Tensor) -> Tensor {
    let s: f64 = p.data().iter().map(|&v| -(v as f64).log2()).sum();
    Tensor::from_vec(&[1], vec![s as f32]).expect("scalar")
}

fn mse_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Tensor::from_vec(&[1], vec![(s / a.len() as f64) as f32]).expect("scalar")
}

/// Direct executor without a tape.
pub struct Eval<'a> {
    store: &'a ParameterStore,
}

impl<'a> Eval<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Eval { store }
    }
}

impl<'a> Backend for Eval<'a> {
    type V = Val<'a>;

    fn param(&mut self, name: &str) -> Result<Val<'a>> {
        Ok(Val::Borrowed(self.store.get(name)?))
    }

    fn constant(&mut self, t: Tensor) -> Val<'a> {
        own(t)
    }

    fn value<'s>(&'s self, v: &'s Val<'a>) -> &'s Tensor {
        v
    }

    fn conv2d(&mut self, x: &Val<'a>, w: &Val<'a>, b: &Val<'a>, stride: usize, pad: usize) -> Val<'a> {
        own(ops::conv2d(x, w, b, stride, pad))
    }

    fn upsample2x(&mut self, x: &Val<'a>) -> Val<'a> {
        own(ops::upsample2x(x))
    }

    fn leaky_relu(&mut self, x: &Val<'a>) -> Val<'a> {
        own(x.map(ops::leaky_relu))
    }

    fn sigmoid(&mut self, x: &Val<'a>) -> Val<'a> {
        own(x.map(ops::sigmoid))
    }

    fn softmax_channels(&mut self, x: &Val<'a>) -> Val<'a> {
        own(ops::softmax_channels(x))
    }

    fn concat(&mut self, xs: &[&Val<'a>]) -> Val<'a> {
        let ts: Vec<&Tensor> = xs.iter().map(|v| &***v).collect();
        own(ops::concat_channels(&ts))
    }

    fn slice_channels(&mut self, x: &Val<'a>, start: usize, len: usize) -> Val<'a> {
        own(x.channels(start, len))
    }

    fn add(&mut self, a: &Val<'a>, b: &Val<'a>) -> Val<'a> {
        own(zip_map(a, b, |x, y| x + y))
    }

    fn sub(&mut self, a: &Val<'a>, b: &Val<'a>) -> Val<'a> {
        own(zip_map(a, b, |x, y| x - y))
    }

    fn scale(&mut self, a: &Val<'a>, s: f32) -> Val<'a> {
        own(a.map(|v| v * s))
    }

    fn mul_plane(&mut self, x: &Val<'a>, m: &Val<'a>) -> Val<'a> {
        own(mul_plane_fwd(x, m))
    }

    fn lower_bound(&mut self, x: &Val<'a>, bound: f32) -> Val<'a> {
        own(x.map(|v| v.max(bound)))
    }

    fn synthesize(&mut self, refs: &[&Val<'a>], kernels: &[&Val<'a>]) -> Val<'a> {
        let r: Vec<&Tensor> = refs.iter().map(|v| &***v).collect();
        let k: Vec<&Tensor> = kernels.iter().map(|v| &***v).collect();
        own(synth_fwd(&r, &k))
    }

    fn gaussian_likelihood(&mut self, y: &Val<'a>, mean: &Val<'a>, scale: &Val<'a>) -> Val<'a> {
        own(gaussian_fwd(y, mean, scale))
    }

    fn factorized_likelihood(&mut self, z: &Val<'a>, prefix: &str) -> Result<Val<'a>> {
        let names = bottleneck_names(prefix);
        let mut t: Vec<&Tensor> = Vec::with_capacity(11);
        for n in &names {
            t.push(self.store.get(n)?);
        }
        let arr: [&Tensor; 11] = t.try_into().expect("eleven tensors");
        Ok(own(factorized_fwd(z, &bottleneck_view(arr))))
    }

    fn neg_log2_sum(&mut self, p: &Val<'a>) -> Val<'a> {
        own(neg_log2_sum_fwd(p))
    }

    fn mse(&mut self, a: &Val<'a>, b: &Val<'a>) -> Val<'a> {
        own(mse_fwd(a, b))
    }

    fn detach(&mut self, x: &Val<'a>) -> Val<'a> {
        x.clone()
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample(Var),
    Leaky(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    MulPlane(Var, Var),
    LowerBound(Var, f32),
    Synth { refs: Vec<Var>, kernels: Vec<Var> },
    Gauss { y: Var, m: Var, s: Var },
    Factorized { z: Var, params: Vec<Var> },
    NegLog2Sum(Var),
    Mse(Var, Var),
}

struct Node<'a> {
    value: Val<'a>,
    op: Op,
    needs_grad: bool,
}

/// Recording executor. Parameters for which `trainable` returns false are
/// treated as constants.
pub struct Graph<'a> {
    store: &'a ParameterStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
    param_names: HashMap<usize, String>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParameterStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Graph {
            store,
            trainable: Box::new(trainable),
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: own(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.t(v).data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of the scalar `loss` for every trainable parameter touched.
    pub fn backward(&self, loss: Var) -> BTreeMap<String, Tensor> {
        assert_eq!(self.t(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&[1], 1.0));
        let mut out = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => {
                        for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = self.param_names.get(&i) {
                        out.insert(name.clone(), g);
                    }
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let want_dx = self.nodes[x.0].needs_grad;
                    let cg = ops::conv2d_backward(self.t(*x), self.t(*w), &g, *stride, *pad, want_dx);
                    if let Some(dx) = cg.dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, cg.dw, &mut grads);
                    acc(*b, cg.db, &mut grads);
                }
                Op::Upsample(x) => acc(*x, ops::upsample2x_backward(&g), &mut grads),
                Op::Leaky(x) => {
                    let d = zip_map(self.t(*x), &g, |v, g| if v > 0.0 { g } else { ops::LEAKY_SLOPE * g });
                    acc(*x, d, &mut grads);
                }
                Op::Sigmoid(x) => {
                    let d = zip_map(&node.value, &g, |y, g| g * y * (1.0 - y));
                    acc(*x, d, &mut grads);
                }
                Op::Softmax(x) => acc(*x, ops::softmax_channels_backward(&node.value, &g), &mut grads),
                Op::Concat(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let c = self.t(*x).chw().0;
                        acc(*x, g.channels(start, c), &mut grads);
                        start += c;
                    }
                }
                Op::Slice { x, start } => {
                    let (c, h, w) = self.t(*x).chw();
                    let mut d = Tensor::zeros(&[c, h, w]);
                    let off = start * h * w;
                    d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                    acc(*x, d, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s), &mut grads),
                Op::MulPlane(x, m) => {
                    let (c, h, w) = self.t(*x).chw();
                    let hw = h * w;
                    acc(*x, mul_plane_fwd(&g, self.t(*m)), &mut grads);
                    let xd = self.t(*x).data();
                    let mut dm = Tensor::zeros(&[1, h, w]);
                    for ch in 0..c {
                        for p in 0..hw {
                            dm.data_mut()[p] += g.data()[ch * hw + p] * xd[ch * hw + p];
                        }
                    }
                    acc(*m, dm, &mut grads);
                }
                Op::LowerBound(x, bound) => {
                    let d = zip_map(self.t(*x), &g, |v, g| if v >= *bound || g < 0.0 { g } else { 0.0 });
                    acc(*x, d, &mut grads);
                }
                Op::Synth { refs, kernels } => {
                    for (r, k) in refs.iter().zip(kernels.chunks(2)) {
                        let want_ref = self.nodes[r.0].needs_grad;
                        let tg = kernel_synthesis::separable_term_backward(
                            self.t(*r),
                            self.t(k[0]),
                            self.t(k[1]),
                            &g,
                            want_ref,
                        )
                        .expect("synthesis shapes");
                        acc(k[0], tg.d_vertical, &mut grads);
                        acc(k[1], tg.d_horizontal, &mut grads);
                        if let Some(dr) = tg.d_frame {
                            acc(*r, dr, &mut grads);
                        }
                    }
                }
                Op::Gauss { y, m, s } => {
                    let n = g.len();
                    let (mut dy, mut dm, mut ds) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
                    let (yd, md, sd) = (self.t(*y).data(), self.t(*m).data(), self.t(*s).data());
                    for i in 0..n {
                        let (p, py, pm, ps) = gaussian_likelihood(yd[i], md[i], sd[i]);
                        let gi = g.data()[i];
                        if p >= LIKELIHOOD_BOUND || gi < 0.0 {
                            dy[i] = gi * py;
                            dm[i] = gi * pm;
                            ds[i] = gi * ps;
                        }
                    }
                    let shape = g.shape().to_vec();
                    acc(*y, Tensor::from_vec(&shape, dy).unwrap(), &mut grads);
                    acc(*m, Tensor::from_vec(&shape, dm).unwrap(), &mut grads);
                    acc(*s, Tensor::from_vec(&shape, ds).unwrap(), &mut grads);
                }
                Op::Factorized { z, params } => {
                    let arr: [&Tensor; 11] = std::array::from_fn(|k| self.t(params[k]));
                    let view = bottleneck_view(arr);
                    let mut pg = BottleneckGrads::zeros_like(&view);
                    let zt = self.t(*z);
                    let (c, h, w) = zt.chw();
                    let hw = h * w;
                    let mut dz = Tensor::zeros(zt.shape());
                    for ch in 0..c {
                        for i in 0..hw {
                            let k = ch * hw + i;
                            let gi = g.data()[k];
                            let raw = view.likelihood(ch, zt.data()[k]);
                            if raw >= LIKELIHOOD_BOUND || gi < 0.0 {
                                let (_, d) = view.likelihood_backward(ch, zt.data()[k], gi, &mut pg);
                                dz.data_mut()[k] = d;
                            }
                        }
                    }
                    acc(*z, dz, &mut grads);
                    let flat: Vec<Tensor> = pg
                        .matrices
                        .into_iter()
                        .chain(pg.biases)
                        .chain(pg.factors)
                        .collect();
                    for (p, t) in params.iter().zip(flat) {
                        acc(*p, t, &mut grads);
                    }
                }
                Op::NegLog2Sum(p) => {
                    let s = g.data()[0];
                    let inv_ln2 = std::f32::consts::LOG2_E;
                    acc(*p, self.t(*p).map(|v| -s * inv_ln2 / v), &mut grads);
                }
                Op::Mse(a, b) => {
                    let s = g.data()[0] * 2.0 / self.t(*a).len() as f32;
                    let d = zip_map(self.t(*a), self.t(*b), |x, y| s * (x - y));
                    acc(*b, d.map(|v| -v), &mut grads);
                    acc(*a, d, &mut grads);
                }
            }
        }
        out
    }
}

impl<'a> Backend for Graph<'a> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?;
        let needs_grad = (self.trainable)(name);
        self.nodes.push(Node {
            value: Val::Borrowed(t),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        self.param_names.insert(v.0, name.to_string());
        Ok(v)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: own(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor {
        self.t(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
        let out = ops::conv2d(self.t(*x), self.t(*w), self.t(*b), stride, pad);
        self.push(out, Op::Conv { x: *x, w: *w, b: *b, stride, pad }, &[*x, *w, *b])
    }

    fn upsample2x(&mut self, x: &Var) -> Var {
        let out = ops::upsample2x(self.t(*x));
        self.push(out, Op::Upsample(*x), &[*x])
    }

    fn leaky_relu(&mut self, x: &Var) -> Var {
        let out = self.t(*x).map(ops::leaky_relu);
        self.push(out, Op::Leaky(*x), &[*x])
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let out = self.t(*x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(*x), &[*x])
    }

    fn softmax_channels(&mut self, x: &Var) -> Var {
        let out = ops::softmax_channels(self.t(*x));
        self.push(out, Op::Softmax(*x), &[*x])
    }

    fn concat(&mut self, xs: &[&Var]) -> Var {
        let ts: Vec<&Tensor> = xs.iter().map(|v| self.t(**v)).collect();
        let out = ops::concat_channels(&ts);
        let vs: Vec<Var> = xs.iter().map(|v| **v).collect();
        self.push(out, Op::Concat(vs.clone()), &vs)
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Var {
        let out = self.t(*x).channels(start, len);
        self.push(out, Op::Slice { x: *x, start }, &[*x])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let out = zip_map(self.t(*a), self.t(*b), |x, y| x + y);
        self.push(out, Op::Add(*a, *b), &[*a, *b])
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let out = zip_map(self.t(*a), self.t(*b), |x, y| x - y);
        self.push(out, Op::Sub(*a, *b), &[*a, *b])
    }

    fn scale(&mut self, a: &Var, s: f32) -> Var {
        let out = self.t(*a).map(|v| v * s);
        self.push(out, Op::Scale(*a, s), &[*a])
    }

    fn mul_plane(&mut self, x: &Var, m: &Var) -> Var {
        let out = mul_plane_fwd(self.t(*x), self.t(*m));
        self.push(out, Op::MulPlane(*x, *m), &[*x, *m])
    }

    fn lower_bound(&mut self, x: &Var, bound: f32) -> Var {
        let out = self.t(*x).map(|v| v.max(bound));
        self.push(out, Op::LowerBound(*x, bound), &[*x])
    }

    fn synthesize(&mut self, refs: &[&Var], kernels: &[&Var]) -> Var {
        let r: Vec<&Tensor> = refs.iter().map(|v| self.t(**v)).collect();
        let k: Vec<&Tensor> = kernels.iter().map(|v| self.t(**v)).collect();
        let out = synth_fwd(&r, &k);
        let refs: Vec<Var> = refs.iter().map(|v| **v).collect();
        let kernels: Vec<Var> = kernels.iter().map(|v| **v).collect();
        let parents: Vec<Var> = refs.iter().chain(&kernels).copied().collect();
        self.push(out, Op::Synth { refs, kernels }, &parents)
    }

    fn gaussian_likelihood(&mut self, y: &Var, mean: &Var, scale: &Var) -> Var {
        let out = gaussian_fwd(self.t(*y), self.t(*mean), self.t(*scale));
        self.push(out, Op::Gauss { y: *y, m: *mean, s: *scale }, &[*y, *mean, *scale])
    }

    fn factorized_likelihood(&mut self, z: &Var, prefix: &str) -> Result<Var> {
        let names = bottleneck_names(prefix);
        let mut params = Vec::with_capacity(11);
        for n in &names {
            params.push(self.param(n)?);
        }
        let arr: [&Tensor; 11] = std::array::from_fn(|k| self.t(params[k]));
        let out = factorized_fwd(self.t(*z), &bottleneck_view(arr));
        let mut parents = params.clone();
        parents.push(*z);
        Ok(self.push(out, Op::Factorized { z: *z, params }, &parents))
    }

    fn neg_log2_sum(&mut self, p: &Var) -> Var {
        let out = neg_log2_sum_fwd(self.t(*p));
        self.push(out, Op::NegLog2Sum(*p), &[*p])
    }

    fn mse(&mut self, a: &Var, b: &Var) -> Var {
        let out = mse_fwd(self.t(*a), self.t(*b));
        self.push(out, Op::Mse(*a, *b), &[*a, *b])
    }

    fn detach(&mut self, x: &Var) -> Var {
        let t = self.t(*x).clone();
        self.constant(t)
    }
}

/// Materialise alternating kernel arrays as a [`KernelField`].
pub fn kernel_field(kernels: &[&Tensor]) -> KernelField<f32> {
    field_from(kernels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::CheckpointMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_net<B: Backend>(b: &mut B, x: &B::V) -> B::V {
        let w0 = b.param("w0").unwrap();
        let b0 = b.param("b0").unwrap();
        let w1 = b.param("w1").unwrap();
        let b1 = b.param("b1").unwrap();
        let h = b.conv2d(x, &w0, &b0, 2, 1);
        let h = b.leaky_relu(&h);
        let h = b.upsample2x(&h);
        let y = b.conv2d(&h, &w1, &b1, 1, 1);
        let s = b.sigmoid(&y);
        let t = b.constant(Tensor::full(&[2, 8, 8], 0.5));
        b.mse(&s, &t)
    }

    fn store() -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParameterStore::new(CheckpointMeta::default());
        s.insert("w0", rand_t(&mut rng, &[4, 3, 3, 3]));
        s.insert("b0", rand_t(&mut rng, &[4]));
        s.insert("w1", rand_t(&mut rng, &[2, 4, 3, 3]));
        s.insert("b1", rand_t(&mut rng, &[2]));
        s
    }

    #[test]
    fn eval_and_graph_agree_bitwise() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[3, 8, 8]);
        let mut e = Eval::new(&s);
        let xv = e.constant(x.clone());
        let le = tiny_net(&mut e, &xv);
        let mut g = Graph::new(&s, |_| true);
        let xg = g.constant(x);
        let lg = tiny_net(&mut g, &xg);
        assert_eq!(e.value(&le).data()[0].to_bits(), g.scalar(lg).to_bits());
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let s = store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[3, 8, 8]);
        let loss_of = |s: &ParameterStore| -> f64 {
            let mut e = Eval::new(s);
            let xv = e.constant(x.clone());
            let l = tiny_net(&mut e, &xv);
            e.value(&l).data()[0] as f64
        };
        let mut g = Graph::new(&s, |n| n != "b1");
        let xg = g.constant(x.clone());
        let l = tiny_net(&mut g, &xg);
        let grads = g.backward(l);
        assert!(!grads.contains_key("b1"), "frozen parameters get no gradient");
        for (name, idx) in [("w0", 5usize), ("b0", 2), ("w1", 17)] {
            let mut sp = s.clone();
            sp.get_mut(name).unwrap().data_mut()[idx] += 1e-2;
            let mut sm = s.clone();
            sm.get_mut(name).unwrap().data_mut()[idx] -= 1e-2;
            let fd = (loss_of(&sp) - loss_of(&sm)) / 2e-2;
            let an = grads[name].data()[idx] as f64;
            assert!((fd - an).abs() < 1e-3 + 1e-2 * fd.abs(), "{name}: {an} vs {fd}");
        }
    }

    #[test]
    fn lower_bound_gradient_rule() {
        let mut st = ParameterStore::new(CheckpointMeta::default());
        st.insert("x", Tensor::from_vec(&[1, 1, 3], vec![0.05, 0.2, 0.01]).unwrap());
        let mut g2 = Graph::new(&st, |_| true);
        let x = g2.param("x").unwrap();
        let y = g2.lower_bound(&x, 0.11);
        assert_eq!(g2.value(&y).data(), &[0.11, 0.2, 0.11]);
        // Blocked below the bound when the upstream gradient pushes further down.
        let t = g2.constant(Tensor::zeros(&[1, 1, 3]));
        let l = g2.mse(&y, &t);
        let grads = g2.backward(l);
        let gx = grads["x"].data();
        assert_eq!(gx[0], 0.0);
        assert!(gx[1] > 0.0);
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Ctx<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&Ctx) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
    track: bool,
}

/// Gradients of a scalar with respect to parameters and tracked inputs.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

impl<'p> Graph<'p> {
    /// A graph reading parameters from `params`; with `track` false no
    /// backward closures are recorded.
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            track,
        }
    }

    /// A graph without parameters, used for plain tensor computations.
    pub fn detached(track: bool) -> Graph<'static> {
        Graph {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            track,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.track,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Ctx) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push_leaf(store.get(id).clone(), true, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(bw) => {
                    let ctx = Ctx {
                        grad: &g,
                        inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                        output: &node.value,
                        needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                    };
                    for (&p, pg) in node.parents.iter().zip(bw(&ctx)) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None if node.requires_grad => match node.param {
                    Some(id) => {
                        out.params.insert(id, g);
                    }
                    None => {
                        out.inputs.insert(Var(i), g);
                    }
                },
                None => {}
            }
        }
        out
    }

    // ---- elementwise ------------------------------------------------------

    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], |c| {
            let prod = |t: &Tensor| {
                Tensor::from_parts(
                    t.shape().to_vec(),
                    c.grad.data().iter().zip(t.data()).map(|(g, v)| g * v).collect(),
                )
            };
            vec![
                c.needs[0].then(|| prod(c.inputs[1])),
                c.needs[1].then(|| prod(c.inputs[0])),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, &[a], move |c| vec![Some(c.grad.map(|g| g * s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, &[a], |c| vec![Some(c.grad.clone())])
    }

    /// `a + b` where `b` has the rank of `a` and size 1 on broadcast axes.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let bs = tensor::broadcast_strides(x.shape(), y.shape()).expect("add_bcast");
        let mut data = x.data().to_vec();
        tensor::for_each_strided(x.shape(), &bs, |o, s| data[o] += y.data()[s]);
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], move |c| {
            let db = c.needs[1].then(|| {
                let mut db = Tensor::zeros(c.inputs[1].shape());
                let d = db.data_mut();
                tensor::for_each_strided(c.grad.shape(), &bs, |o, s| d[s] += c.grad.data()[o]);
                db
            });
            vec![Some(c.grad.clone()), db]
        })
    }

    /// `a * b` with `b` broadcast as in [`Graph::add_bcast`].
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let bs = tensor::broadcast_strides(x.shape(), y.shape()).expect("mul_bcast");
        let mut data = x.data().to_vec();
        tensor::for_each_strided(x.shape(), &bs, |o, s| data[o] *= y.data()[s]);
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a, b], move |c| {
            let (x, y, g) = (c.inputs[0], c.inputs[1], c.grad);
            let da = c.needs[0].then(|| {
                let mut da = g.clone();
                let d = da.data_mut();
                tensor::for_each_strided(g.shape(), &bs, |o, s| d[o] *= y.data()[s]);
                da
            });
            let db = c.needs[1].then(|| {
                let mut db = Tensor::zeros(y.shape());
                let d = db.data_mut();
                tensor::for_each_strided(g.shape(), &bs, |o, s| d[s] += g.data()[o] * x.data()[o]);
                db
            });
            vec![da, db]
        })
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push(out, &[a], move |c| {
            let data = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.output.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), data))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            |x, _| {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            },
        )
    }

    // ---- linear algebra ---------------------------------------------------

    /// `x · w + b` over the last axis of `x`; `w` is `[k, n]`, `b` is `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, n) = match wv.shape() {
            [k, n] => (*k, *n),
            s => panic!("linear weight must be 2-D, got {s:?}"),
        };
        assert_eq!(*xv.shape().last().expect("linear input rank"), k, "linear: inner dim");
        let rows = xv.len() / k;
        let mut out = vec![0.0; rows * n];
        let beta = match b {
            Some(b) => {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), n, "linear bias");
                for r in out.chunks_exact_mut(n) {
                    r.copy_from_slice(bv);
                }
                1.0
            }
            None => 0.0,
        };
        tensor::gemm(rows, k, n, xv.data(), false, wv.data(), false, &mut out, beta);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::from_parts(shape, out);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, &parents, move |c| {
            let (xv, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
            let dx = c.needs[0].then(|| {
                let mut dx = vec![0.0; rows * k];
                tensor::gemm(rows, n, k, g.data(), false, wv.data(), true, &mut dx, 0.0);
                Tensor::from_parts(xv.shape().to_vec(), dx)
            });
            let dw = c.needs[1].then(|| {
                let mut dw = vec![0.0; k * n];
                tensor::gemm(k, rows, n, xv.data(), true, g.data(), false, &mut dw, 0.0);
                Tensor::from_parts(vec![k, n], dw)
            });
            let mut grads = vec![dx, dw];
            if c.inputs.len() == 3 {
                grads.push(c.needs[2].then(|| {
                    let mut db = vec![0.0; n];
                    for r in g.data().chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    Tensor::from_parts(vec![n], db)
                }));
            }
            grads
        })
    }

    /// Batched `op(a) · op(b)` over 3-D operands `[batch, rows, cols]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (&[batch, a0, a1], &[bb, b0, b1]) = (av.shape(), bv.shape()) else {
            panic!("bmm expects 3-D operands");
        };
        assert_eq!(batch, bb, "bmm batch");
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, kb, "bmm inner dim");
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            tensor::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..],
                ta,
                &bv.data()[i * k * n..],
                tb,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let out = Tensor::from_parts(vec![batch, m, n], out);
        self.push(out, &[a, b], move |c| {
            let (av, bv, g) = (c.inputs[0], c.inputs[1], c.grad);
            let da = c.needs[0].then(|| {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let (gi, bi, di) = (&g.data()[i * m * n..], &bv.data()[i * k * n..], &mut da[i * m * k..]);
                    if ta {
                        tensor::gemm(k, n, m, bi, tb, gi, true, di, 0.0);
                    } else {
                        tensor::gemm(m, n, k, gi, false, bi, !tb, di, 0.0);
                    }
                }
                Tensor::from_parts(av.shape().to_vec(), da)
            });
            let db = c.needs[1].then(|| {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let (gi, ai, di) = (&g.data()[i * m * n..], &av.data()[i * m * k..], &mut db[i * k * n..]);
                    if tb {
                        tensor::gemm(n, m, k, gi, true, ai, ta, di, 0.0);
                    } else {
                        tensor::gemm(k, m, n, ai, !ta, gi, false, di, 0.0);
                    }
                }
                Tensor::from_parts(bv.shape().to_vec(), db)
            });
            vec![da, db]
        })
    }

    /// Row softmax over the last axis, stabilized by the row maximum.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().expect("softmax rank");
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, &[a], move |c| {
            let mut dx = c.grad.data().to_vec();
            for (d, y) in dx.chunks_exact_mut(n).zip(c.output.data().chunks_exact(n)) {
                let dot: f64 = d.iter().zip(y).map(|(g, p)| g * p).sum();
                for (di, &yi) in d.iter_mut().zip(y) {
                    *di = yi * (*di - dot);
                }
            }
            vec![Some(Tensor::from_parts(c.grad.shape().to_vec(), dx))]
        })
    }

    /// `softmax(scale·s + bias)` over the last axis of `s: [b·heads, t, t]`,
    /// with `bias: [1, heads, t, t]` shared across `b`.
    pub fn attention_softmax(&mut self, s: Var, bias: Option<Var>, scale: f64, heads: usize) -> Var {
        let x = self.value(s);
        let &[bh, t, t2] = x.shape() else {
            panic!("attention scores must be 3-D");
        };
        assert!(t == t2 && bh % heads == 0, "attention scores shape");
        let plane = t * t;
        let bv = bias.map(|b| {
            let v = self.value(b);
            assert_eq!(v.shape(), [1, heads, t, t], "attention bias shape");
            v.data()
        });
        let mut data = x.data().to_vec();
        for (i, p) in data.chunks_exact_mut(plane).enumerate() {
            match bv {
                Some(b) => {
                    let h = i % heads;
                    for (v, &bb) in p.iter_mut().zip(&b[h * plane..(h + 1) * plane]) {
                        *v = *v * scale + bb;
                    }
                }
                None => p.iter_mut().for_each(|v| *v *= scale),
            }
            for row in p.chunks_exact_mut(t) {
                softmax_row(row);
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let parents: Vec<Var> = [Some(s), bias].into_iter().flatten().collect();
        self.push(out, &parents, move |c| {
            let mut dz = c.grad.data().to_vec();
            for (d, y) in dz.chunks_exact_mut(t).zip(c.output.data().chunks_exact(t)) {
                let dot: f64 = d.iter().zip(y).map(|(g, p)| g * p).sum();
                for (di, &yi) in d.iter_mut().zip(y) {
                    *di = yi * (*di - dot);
                }
            }
            let dbias = (c.inputs.len() == 2 && c.needs[1]).then(|| {
                let mut db = vec![0.0; heads * plane];
                for (i, p) in dz.chunks_exact(plane).enumerate() {
                    let h = i % heads;
                    for (d, v) in db[h * plane..(h + 1) * plane].iter_mut().zip(p) {
                        *d += v;
                    }
                }
                Tensor::from_parts(vec![1, heads, t, t], db)
            });
            let ds = c.needs[0].then(|| {
                Tensor::from_parts(vec![bh, t, t], dz.iter().map(|v| v * scale).collect())
            });
            let mut grads = vec![ds];
            if c.inputs.len() == 2 {
                grads.push(dbias);
            }
            grads
        })
    }

    /// Layer norm over the last axis with learnable `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("layer_norm rank");
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        assert!(gv.len() == n && bv.len() == n, "layer_norm affine size");
        let mut data = vec![0.0; xv.len()];
        for (row, out) in xv.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let (mean, inv) = moments(row, eps);
            for i in 0..n {
                out[i] = (row[i] - mean) * inv * gv[i] + bv[i];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, &[x, gain, bias], move |c| {
            let (xv, gv, g) = (c.inputs[0], c.inputs[1].data(), c.grad);
            let mut dx = vec![0.0; xv.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for ((row, grow), drow) in xv
                .data()
                .chunks_exact(n)
                .zip(g.data().chunks_exact(n))
                .zip(dx.chunks_exact_mut(n))
            {
                let (mean, inv) = moments(row, eps);
                for i in 0..n {
                    xhat[i] = (row[i] - mean) * inv;
                    dxhat[i] = grow[i] * gv[i];
                    dgain[i] += grow[i] * xhat[i];
                    dbias[i] += grow[i];
                }
                let m1 = dxhat.iter().sum::<f64>() / n as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for i in 0..n {
                    drow[i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
            vec![
                Some(Tensor::from_parts(xv.shape().to_vec(), dx)),
                Some(Tensor::from_parts(vec![n], dgain)),
                Some(Tensor::from_parts(vec![n], dbias)),
            ]
        })
    }

    // ---- convolution ------------------------------------------------------

    /// NHWC convolution; `w` is `[k, k, cin, cout]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (k, cin, cout) = match wv.shape() {
            [k, k2, ci, co] if k == k2 => (*k, *ci, *co),
            s => panic!("conv weight must be [k, k, cin, cout], got {s:?}"),
        };
        let dims = xv.dims4().expect("conv2d input");
        assert_eq!(dims[3], cin, "conv2d input channels");
        let geom = ConvGeom::new(dims, k, stride, pad).expect("conv2d geometry");
        let bias = b.map(|b| self.value(b).data());
        let data = tensor::conv2d_forward(xv.data(), wv.data(), bias, &geom, cout);
        let out = Tensor::from_parts(vec![geom.n, geom.oh, geom.ow, cout], data);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, &parents, move |c| {
            let (dx, dw, db) = tensor::conv2d_backward(
                c.inputs[0].data(),
                c.inputs[1].data(),
                c.grad.data(),
                &geom,
                cout,
                c.needs[0],
                c.needs[1],
            );
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(c.inputs[0].shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(c.inputs[1].shape().to_vec(), d)),
            ];
            if c.inputs.len() == 3 {
                grads.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            grads
        })
    }

    /// 2×2 stride-2 transposed convolution; `w` is `[cin, 2, 2, cout]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = match wv.shape() {
            [ci, 2, 2, co] => (*ci, *co),
            s => panic!("transposed conv weight must be [cin, 2, 2, cout], got {s:?}"),
        };
        let dims = xv.dims4().expect("conv_transpose2x2 input");
        assert_eq!(dims[3], cin, "conv_transpose2x2 input channels");
        let bias = b.map(|b| self.value(b).data());
        let data = tensor::conv_t2_forward(xv.data(), wv.data(), bias, dims, cout);
        let out = Tensor::from_parts(vec![dims[0], 2 * dims[1], 2 * dims[2], cout], data);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, &parents, move |c| {
            let (dx, dw, db) = tensor::conv_t2_backward(
                c.inputs[0].data(),
                c.inputs[1].data(),
                c.grad.data(),
                dims,
                cout,
                c.needs[0],
            );
            let mut grads = vec![
                dx.map(|d| Tensor::from_parts(c.inputs[0].shape().to_vec(), d)),
                Some(Tensor::from_parts(c.inputs[1].shape().to_vec(), dw)),
            ];
            if c.inputs.len() == 3 {
                grads.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            grads
        })
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("max_pool2 input");
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * oh * ow * c];
        let mut arg = vec![0usize; data.len()];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if xv.data()[i] > best {
                                best = xv.data()[i];
                                bi = i;
                            }
                        }
                        let o = ((b * oh + y) * ow + xx) * c + ch;
                        data[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, oh, ow, c], data);
        self.push(out, &[x], move |c| {
            let mut dx = Tensor::zeros(c.inputs[0].shape());
            let d = dx.data_mut();
            for (o, &i) in arg.iter().enumerate() {
                d[i] += c.grad.data()[o];
            }
            vec![Some(dx)]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("upsample2 input");
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((b * h + y / 2) * w + xx / 2) * c;
                    let dst = ((b * oh + y) * ow + xx) * c;
                    data[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, oh, ow, c], data);
        self.push(out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            let d = dx.data_mut();
            let g = ctx.grad.data();
            for b in 0..n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let dst = ((b * h + y / 2) * w + xx / 2) * c;
                        let src = ((b * oh + y) * ow + xx) * c;
                        for i in 0..c {
                            d[dst + i] += g[src + i];
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(out, &[x], |c| {
            vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).expect("reshape grad"))]
        })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = tensor::permute(self.value(x), perm);
        let inv = tensor::inverse_perm(perm);
        self.push(out, &[x], move |c| vec![Some(tensor::permute(c.grad, &inv))])
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        let widths: Vec<usize> = xs.iter().map(|&v| *self.shape(v).last().expect("concat rank")).collect();
        let lead = &self.shape(xs[0])[..self.shape(xs[0]).len() - 1];
        for &v in xs {
            assert_eq!(&self.shape(v)[..self.shape(v).len() - 1], lead, "concat_last leading dims");
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &wd) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::from_parts(shape, data);
        self.push(out, xs, move |c| {
            let g = c.grad.data();
            let mut off = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &wd)| {
                    let o = off;
                    off += wd;
                    c.needs[i].then(|| {
                        let mut d = vec![0.0; rows * wd];
                        for r in 0..rows {
                            d[r * wd..(r + 1) * wd].copy_from_slice(&g[r * total + o..r * total + o + wd]);
                        }
                        Tensor::from_parts(c.inputs[i].shape().to_vec(), d)
                    })
                })
                .collect()
        })
    }

    // ---- reductions -------------------------------------------------------

    /// Spatial mean of an NHWC map, `[n, 1, 1, c]`.
    pub fn mean_hw(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("mean_hw input");
        let hw = (h * w) as f64;
        let mut data = vec![0.0; n * c];
        for b in 0..n {
            for p in xv.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                for (d, v) in data[b * c..(b + 1) * c].iter_mut().zip(p) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= hw);
        let out = Tensor::from_parts(vec![n, 1, 1, c], data);
        self.push(out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; n * h * w * c];
            for b in 0..n {
                for p in dx[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                    for (d, gv) in p.iter_mut().zip(&g[b * c..(b + 1) * c]) {
                        *d = gv / hw;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, h, w, c], dx))]
        })
    }

    /// Spatial max of an NHWC map, `[n, 1, 1, c]`.
    pub fn max_hw(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("max_hw input");
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for b in 0..n {
            for p in 0..h * w {
                for ch in 0..c {
                    let i = (b * h * w + p) * c + ch;
                    if xv.data()[i] > data[b * c + ch] {
                        data[b * c + ch] = xv.data()[i];
                        arg[b * c + ch] = i;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, 1, 1, c], data);
        self.push(out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (o, &i) in arg.iter().enumerate() {
                dx.data_mut()[i] += ctx.grad.data()[o];
            }
            vec![Some(dx)]
        })
    }

    /// Channel mean, `[n, h, w, 1]`.
    pub fn mean_c(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("mean_c input");
        let data = xv.data().chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
        let out = Tensor::from_parts(vec![n, h, w, 1], data);
        self.push(out, &[x], move |ctx| {
            let mut dx = Vec::with_capacity(n * h * w * c);
            for &g in ctx.grad.data() {
                dx.extend(std::iter::repeat_n(g / c as f64, c));
            }
            vec![Some(Tensor::from_parts(vec![n, h, w, c], dx))]
        })
    }

    /// Channel max, `[n, h, w, 1]`.
    pub fn max_c(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, h, w, c] = xv.dims4().expect("max_c input");
        let mut arg = Vec::with_capacity(n * h * w);
        let data = xv
            .data()
            .chunks_exact(c)
            .enumerate()
            .map(|(p, px)| {
                let (mut bi, mut best) = (0, f64::NEG_INFINITY);
                for (i, &v) in px.iter().enumerate() {
                    if v > best {
                        best = v;
                        bi = i;
                    }
                }
                arg.push(p * c + bi);
                best
            })
            .collect();
        let out = Tensor::from_parts(vec![n, h, w, 1], data);
        self.push(out, &[x], move |ctx| {
            let mut dx = Tensor::zeros(ctx.inputs[0].shape());
            for (o, &i) in arg.iter().enumerate() {
                dx.data_mut()[i] += ctx.grad.data()[o];
            }
            vec![Some(dx)]
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], |c| {
            vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `mean |a - b|` as a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "l1_mean");
        let (x, y) = (self.value(a), self.value(b));
        let n = x.len().max(1) as f64;
        let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(s), &[a, b], move |c| {
            let g = c.grad.item() / n;
            let sign: Vec<f64> = c.inputs[0]
                .data()
                .iter()
                .zip(c.inputs[1].data())
                .map(|(p, q)| g * sign_of(p - q))
                .collect();
            let shape = c.inputs[0].shape().to_vec();
            vec![
                c.needs[0].then(|| Tensor::from_parts(shape.clone(), sign.clone())),
                c.needs[1].then(|| Tensor::from_parts(shape.clone(), sign.iter().map(|v| -v).collect())),
            ]
        })
    }

    /// `out[0, h, i, j] = table[index[i·t + j], h]` for a `[rows, heads]`
    /// table, giving `[1, heads, t, t]`.
    pub fn gather_bias(&mut self, table: Var, index: std::sync::Arc<Vec<usize>>, t: usize) -> Var {
        let tv = self.value(table);
        let (_, heads) = match tv.shape() {
            [r, h] => (*r, *h),
            s => panic!("bias table must be 2-D, got {s:?}"),
        };
        assert_eq!(index.len(), t * t, "bias index size");
        let mut data = vec![0.0; heads * t * t];
        for h in 0..heads {
            for (p, &r) in index.iter().enumerate() {
                data[h * t * t + p] = tv.data()[r * heads + h];
            }
        }
        let out = Tensor::from_parts(vec![1, heads, t, t], data);
        self.push(out, &[table], move |c| {
            let mut dt = Tensor::zeros(c.inputs[0].shape());
            let d = dt.data_mut();
            for h in 0..heads {
                for (p, &r) in index.iter().enumerate() {
                    d[r * heads + h] += c.grad.data()[h * t * t + p];
                }
            }
            vec![Some(dt)]
        })
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let v = charformer_core::rng::derive_indexed(seed, "t", i as u64);
                (v % 2000) as f64 / 1000.0 - 1.0
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        check_inputs(&[t(&[2, 3, 4, 5], 1), t(&[2, 1, 1, 5], 2)], |g, v| {
            let m = g.mul_bcast(v[0], v[1]);
            let a = g.add_bcast(m, v[1]);
            let s = g.sigmoid(a);
            let l = g.leaky_relu(s, 0.2);
            let q = g.mul(l, v[0]);
            g.sum_all(q)
        });
        check_inputs(&[t(&[2, 3, 4, 1], 3), t(&[2, 3, 4, 6], 4)], |g, v| {
            let m = g.mul_bcast(v[1], v[0]);
            let e = g.gelu(m);
            let d = g.sub(e, v[1]);
            let r = g.relu(d);
            let sq = g.mul(r, d);
            g.mean_all(sq)
        });
    }

    #[test]
    fn linear_and_bmm_grads() {
        check_inputs(&[t(&[2, 3, 4], 5), t(&[4, 6], 6), t(&[6], 7)], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.gelu(y);
            g.sum_all(y)
        });
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { t(&[2, 4, 3], 8) } else { t(&[2, 3, 4], 8) };
            let b = if tb { t(&[2, 5, 4], 9) } else { t(&[2, 4, 5], 9) };
            check_inputs(&[a, b], move |g, v| {
                let y = g.bmm(v[0], v[1], ta, tb);
                let y = g.sigmoid(y);
                g.sum_all(y)
            });
        }
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        check_inputs(&[t(&[3, 7], 10), t(&[3, 7], 11)], |g, v| {
            let s = g.softmax_last(v[0]);
            let p = g.mul(s, v[1]);
            g.sum_all(p)
        });
        check_inputs(&[t(&[4, 3, 3], 40), t(&[1, 2, 3, 3], 41), t(&[4, 3, 3], 42)], |g, v| {
            let s = g.attention_softmax(v[0], Some(v[1]), 0.7, 2);
            let p = g.mul(s, v[2]);
            g.sum_all(p)
        });
        check_inputs(&[t(&[2, 3, 6], 12), t(&[6], 13), t(&[6], 14), t(&[2, 3, 6], 15)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let p = g.mul(y, v[3]);
            g.sum_all(p)
        });
    }

    #[test]
    fn conv_grads() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            check_inputs(&[t(&[2, 5, 6, 3], 16), t(&[k, k, 3, 4], 17), t(&[4], 18)], move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), s, p);
                let y = g.sigmoid(y);
                g.sum_all(y)
            });
        }
        check_inputs(&[t(&[2, 3, 2, 3], 19), t(&[3, 2, 2, 4], 20), t(&[4], 21)], |g, v| {
            let y = g.conv_transpose2x2(v[0], v[1], Some(v[2]));
            let y = g.sigmoid(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn pooling_layout_and_reduction_grads() {
        check_inputs(&[t(&[2, 4, 6, 3], 22), t(&[2, 4, 6, 2], 23)], |g, v| {
            let c = g.concat_last(&[v[0], v[1]]);
            let mp = g.max_pool2(c);
            let up = g.upsample2(mp);
            let q = g.mul(up, c);
            let r = g.reshape(q, &[2, 4, 3, 2, 5]);
            let pr = g.permute(r, &[0, 2, 1, 4, 3]);
            let s = g.sigmoid(pr);
            g.sum_all(s)
        });
        check_inputs(&[t(&[2, 3, 4, 5], 24)], |g, v| {
            let a = g.mean_hw(v[0]);
            let b = g.max_hw(v[0]);
            let c = g.mean_c(v[0]);
            let d = g.max_c(v[0]);
            let ab = g.mul(a, b);
            let x = g.mul_bcast(v[0], ab);
            let x = g.mul_bcast(x, c);
            let x = g.add_bcast(x, d);
            let x = g.sigmoid(x);
            g.sum_all(x)
        });
    }

    #[test]
    fn l1_and_gather_grads() {
        check_inputs(&[t(&[3, 4], 25), t(&[3, 4], 26)], |g, v| g.l1_mean(v[0], v[1]));
        let index = std::sync::Arc::new(vec![0, 1, 2, 1, 0, 3, 2, 2, 1]);
        check_inputs(&[t(&[4, 2], 27), t(&[5, 2, 3, 3], 28)], move |g, v| {
            let b = g.gather_bias(v[0], index.clone(), 3);
            let r = g.reshape(v[1], &[5, 2, 3, 3]);
            let s = g.add_bcast(r, b);
            let s = g.softmax_last(s);
            let s = g.mul(s, v[1]);
            g.sum_all(s)
        });
    }

    #[test]
    fn untracked_graph_records_no_backward() {
        let mut g = Graph::detached(false);
        let a = g.input(Tensor::full(&[2], 1.0));
        let s = g.sum_all(a);
        assert_eq!(g.scalar(s), 2.0);
        assert!(g.backward(s).input(a).is_none());
    }

    #[test]
    fn softmax_rows_sum_to_one_for_extreme_logits() {
        let mut g = Graph::detached(false);
        let x = g.constant(Tensor::new(&[2, 3], vec![1e300, -1e300, 0.0, 700.0, 710.0, -5.0]).unwrap());
        let s = g.softmax_last(x);
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to a [`Var`]. Nodes are appended
//! in evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, ConvGeom, Real, ResizeTaps, Tensor};

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackFn<T>),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Backpropagates from a scalar (single element) variable.
    pub fn backward(&self, loss: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pg = back(&g, &needs);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, pgrad) in node.parents.iter().zip(pg) {
                let Some(pgrad) = pgrad else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pgrad),
                    None => grads[p] = Some(pgrad),
                }
            }
            // keep leaf gradients, drop intermediates as we go
            if node.backward.is_some() && !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(self) -> Self {
        self.tape.constant((*self.value()).clone())
    }

    pub fn add(self, other: Self) -> Self {
        let v = self.value().zip(&other.value(), |a, b| a + b);
        self.tape.push(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn mul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let v = a.zip(&b, |x, y| x * y);
        self.tape.push(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip(&b, |x, y| x * y)),
                need[1].then(|| g.zip(&a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Self {
        let c = T::of(c);
        let v = self.value().map(|x| x * c);
        self.tape.push(v, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn relu(self) -> Self {
        let x = self.value();
        let v = x.map(|a| if a > T::zero() { a } else { T::zero() });
        self.tape.push(v, &[self], move |g, _| {
            vec![Some(g.zip(&x, |gv, a| if a > T::zero() { gv } else { T::zero() }))]
        })
    }

    pub fn sigmoid(self) -> Self {
        let y = Rc::new(self.value().map(sigmoid));
        let y2 = y.clone();
        self.tape.push((*y).clone(), &[self], move |g, _| {
            vec![Some(g.zip(&y2, |gv, s| gv * s * (T::one() - s)))]
        })
    }

    /// `x (B,C,H,W) ⊙ gate (B,1,H,W)` broadcast over channels.
    pub fn mul_gate(self, gate: Self) -> Self {
        let (x, a) = (self.value(), gate.value());
        let (b, c, h, w) = x.dims4();
        assert_eq!(a.shape(), &[b, 1, h, w], "gate shape");
        let hw = h * w;
        let mut v = (*x).clone();
        for bi in 0..b {
            let ap = &a.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for (o, &av) in v.data_mut()[off..off + hw].iter_mut().zip(ap) {
                    *o = *o * av;
                }
            }
        }
        self.tape.push(v, &[self, gate], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for bi in 0..b {
                    let ap = &a.data()[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for (o, &av) in gx.data_mut()[off..off + hw].iter_mut().zip(ap) {
                            *o = *o * av;
                        }
                    }
                }
                gx
            });
            let ga = need[1].then(|| {
                let mut ga = Tensor::zeros(&[b, 1, h, w]);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            let d = &mut ga.data_mut()[bi * hw + p];
                            *d = *d + g.data()[off + p] * x.data()[off + p];
                        }
                    }
                }
                ga
            });
            vec![gx, ga]
        })
    }

    pub fn conv2d(self, weight: Self, bias: Option<Self>, geom: ConvGeom) -> Self {
        let (x, w) = (self.value(), weight.value());
        let bv = bias.map(|b| b.value());
        let out = tensor::conv2d_forward(&x, &w, bv.as_deref(), geom);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.push(out, &parents, move |g, need| {
            let need_bias = need.get(2).copied().unwrap_or(false);
            let (gx, gw, gb) = tensor::conv2d_backward(&x, &w, g, geom, need[0], need[1], need_bias);
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(gb);
            }
            v
        })
    }

    /// Group normalization followed by a per-channel affine transform.
    pub fn group_norm(self, gamma: Self, beta: Self, groups: usize, eps: f64) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let (gm, bt) = (gamma.value(), beta.value());
        let cg = c / groups;
        let n = cg * h * w;
        let hw = h * w;
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * hw;
                let xs = &x.data()[off..off + n];
                let mean = xs.iter().copied().sum::<T>() / T::of(n as f64);
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::of(n as f64);
                let is = T::one() / (var + T::of(eps)).sqrt();
                inv_std[bi * groups + gi] = is;
                for (d, &v) in xhat.data_mut()[off..off + n].iter_mut().zip(xs) {
                    *d = (v - mean) * is;
                }
            }
        }
        let mut y = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (s, t) = (gm.data()[ci], bt.data()[ci]);
                for v in &mut y.data_mut()[off..off + hw] {
                    *v = *v * s + t;
                }
            }
        }
        self.tape.push(y, &[self, gamma, beta], move |g, need| {
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    let gs = &g.data()[off..off + hw];
                    let xs = &xhat.data()[off..off + hw];
                    let dg: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    let db: T = gs.iter().copied().sum();
                    ggamma.data_mut()[ci] = ggamma.data()[ci] + dg;
                    gbeta.data_mut()[ci] = gbeta.data()[ci] + db;
                }
            }
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let nn = T::of(n as f64);
                for bi in 0..b {
                    for gi in 0..groups {
                        let is = inv_std[bi * groups + gi];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for cc in 0..cg {
                            let ci = gi * cg + cc;
                            let off = (bi * c + ci) * hw;
                            let s = gm.data()[ci];
                            for p in 0..hw {
                                let d = g.data()[off + p] * s;
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat.data()[off + p];
                            }
                        }
                        for cc in 0..cg {
                            let ci = gi * cg + cc;
                            let off = (bi * c + ci) * hw;
                            let s = gm.data()[ci];
                            for p in 0..hw {
                                let d = g.data()[off + p] * s;
                                gx.data_mut()[off + p] =
                                    is / nn * (nn * d - sum_d - xhat.data()[off + p] * sum_dx);
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, need[1].then_some(ggamma), need[2].then_some(gbeta)]
        })
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and (biased) variance.
    pub fn batch_norm_train(self, gamma: Self, beta: Self, eps: f64) -> (Self, Vec<T>, Vec<T>) {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let n = T::of((b * hw) as f64);
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + x.plane(bi, ci).iter().copied().sum::<T>();
            }
            let m = s / n;
            let mut v = T::zero();
            for bi in 0..b {
                v = v + x.plane(bi, ci).iter().map(|&a| (a - m) * (a - m)).sum::<T>();
            }
            means[ci] = m;
            vars[ci] = v / n;
        }
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let (gm, bt) = (gamma.value(), beta.value());
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for p in 0..hw {
                    let xh = (x.data()[off + p] - means[ci]) * inv_std[ci];
                    xhat.data_mut()[off + p] = xh;
                    y.data_mut()[off + p] = xh * gm.data()[ci] + bt.data()[ci];
                }
            }
        }
        let out = self.tape.push(y, &[self, gamma, beta], move |g, need| {
            let mut ggamma = Tensor::zeros(&[c]);
            let mut gbeta = Tensor::zeros(&[c]);
            let mut gx = need[0].then(|| Tensor::zeros(&[b, c, h, w]));
            for ci in 0..c {
                let (mut sd, mut sdx) = (T::zero(), T::zero());
                for bi in 0..b {
                    let off = (bi * c + ci) * hw;
                    for p in 0..hw {
                        sd = sd + g.data()[off + p];
                        sdx = sdx + g.data()[off + p] * xhat.data()[off + p];
                    }
                }
                ggamma.data_mut()[ci] = sdx;
                gbeta.data_mut()[ci] = sd;
                if let Some(gx) = gx.as_mut() {
                    let s = gm.data()[ci];
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            let d = g.data()[off + p];
                            gx.data_mut()[off + p] = s * inv_std[ci] / n
                                * (n * d - sd - xhat.data()[off + p] * sdx);
                        }
                    }
                }
            }
            vec![gx, need[1].then_some(ggamma), need[2].then_some(gbeta)]
        });
        (out, means, vars)
    }

    /// Per-channel `x * scale + shift` with constant scale/shift, used by
    /// batch norm in evaluation mode (scale and shift fold in gamma/beta).
    pub fn channel_affine(self, scale: Self, shift: Self) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let (s, t) = (scale.value(), shift.value());
        let mut y = (*x).clone();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for v in &mut y.data_mut()[off..off + hw] {
                    *v = *v * s.data()[ci] + t.data()[ci];
                }
            }
        }
        self.tape.push(y, &[self, scale, shift], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for v in &mut gx.data_mut()[off..off + hw] {
                            *v = *v * s.data()[ci];
                        }
                    }
                }
                gx
            });
            let mut gs = Tensor::zeros(&[c]);
            let mut gt = Tensor::zeros(&[c]);
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for p in 0..hw {
                        gs.data_mut()[ci] = gs.data()[ci] + g.data()[off + p] * x.data()[off + p];
                        gt.data_mut()[ci] = gt.data()[ci] + g.data()[off + p];
                    }
                }
            }
            vec![gx, need[1].then_some(gs), need[2].then_some(gt)]
        })
    }

    pub fn concat_channels(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (b, _, h, w) = values[0].dims4();
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vb, vc, vh, vw) = v.dims4();
                assert_eq!((vb, vh, vw), (b, h, w), "concat spatial mismatch");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, total, h, w]);
        for bi in 0..b {
            let mut c0 = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let src = &v.data()[bi * c * hw..(bi + 1) * c * hw];
                out.data_mut()[(bi * total + c0) * hw..(bi * total + c0 + c) * hw]
                    .copy_from_slice(src);
                c0 += c;
            }
        }
        tape.push(out, parts, move |g, need| {
            let mut res = Vec::with_capacity(chans.len());
            let mut c0 = 0;
            for (i, &c) in chans.iter().enumerate() {
                res.push(need[i].then(|| {
                    let mut gp = Tensor::zeros(&[b, c, h, w]);
                    for bi in 0..b {
                        gp.data_mut()[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(
                            &g.data()[(bi * total + c0) * hw..(bi * total + c0 + c) * hw],
                        );
                    }
                    gp
                }));
                c0 += c;
            }
            res
        })
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert!(start + len <= c);
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, len, h, w]);
        for bi in 0..b {
            out.data_mut()[bi * len * hw..(bi + 1) * len * hw]
                .copy_from_slice(&x.data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        self.tape.push(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                gx.data_mut()[(bi * c + start) * hw..(bi * c + start + len) * hw]
                    .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(gx)]
        })
    }

    /// `(B, C, H, W) -> (B, C, 1, 1)` spatial mean.
    pub fn global_avg_pool(self) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let data: Vec<T> = (0..b * c)
            .map(|p| x.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        self.tape.push(Tensor::new(&[b, c, 1, 1], data), &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[b, c, h, w]);
            for p in 0..b * c {
                let gv = g.data()[p] * inv;
                gx.data_mut()[p * hw..(p + 1) * hw].fill(gv);
            }
            vec![Some(gx)]
        })
    }

    /// `(B, C, 1, 1) -> (B, C, H, W)` by replication.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Self {
        let x = self.value();
        let (b, c, one_h, one_w) = x.dims4();
        assert_eq!((one_h, one_w), (1, 1));
        let hw = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for p in 0..b * c {
            out.data_mut()[p * hw..(p + 1) * hw].fill(x.data()[p]);
        }
        self.tape.push(out, &[self], move |g, _| {
            let data = (0..b * c)
                .map(|p| g.data()[p * hw..(p + 1) * hw].iter().copied().sum())
                .collect();
            vec![Some(Tensor::new(&[b, c, 1, 1], data))]
        })
    }

    /// Bilinear resize with align-corners disabled. Same-size resizes return
    /// the input variable unchanged.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Self {
        let x = self.value();
        let (_, _, h, w) = x.dims4();
        if (h, w) == (oh, ow) {
            return self;
        }
        let ry = ResizeTaps::new(h, oh);
        let rx = ResizeTaps::new(w, ow);
        let out = tensor::resize_forward(&x, &ry, &rx);
        let in_shape = x.shape().to_vec();
        self.tape.push(out, &[self], move |g, _| {
            vec![Some(tensor::resize_backward(g, &in_shape, &ry, &rx))]
        })
    }

    /// Rows `idx` of batch item `b`, viewed as `(H·W, C)`: returns `(K, C)`.
    pub fn gather_points(self, b: usize, idx: Rc<Vec<usize>>) -> Self {
        let x = self.value();
        let (bs, c, h, w) = x.dims4();
        let hw = h * w;
        let k = idx.len();
        let mut out = Tensor::zeros(&[k, c]);
        for (r, &p) in idx.iter().enumerate() {
            for ci in 0..c {
                out.data_mut()[r * c + ci] = x.data()[(b * c + ci) * hw + p];
            }
        }
        self.tape.push(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[bs, c, h, w]);
            for (r, &p) in idx.iter().enumerate() {
                for ci in 0..c {
                    let d = &mut gx.data_mut()[(b * c + ci) * hw + p];
                    *d = *d + g.data()[r * c + ci];
                }
            }
            vec![Some(gx)]
        })
    }

    /// Replaces positions `idx` of batch item `b` with `rows (K, C)`. All
    /// other positions are copied through untouched.
    pub fn scatter_points(self, b: usize, idx: Rc<Vec<usize>>, rows: Self) -> Self {
        let x = self.value();
        let r = rows.value();
        let (bs, c, h, w) = x.dims4();
        assert_eq!(r.shape(), &[idx.len(), c], "scatter rows shape");
        let hw = h * w;
        let mut out = (*x).clone();
        for (ri, &p) in idx.iter().enumerate() {
            for ci in 0..c {
                out.data_mut()[(b * c + ci) * hw + p] = r.data()[ri * c + ci];
            }
        }
        let k = idx.len();
        self.tape.push(out, &[self, rows], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for &p in idx.iter() {
                    for ci in 0..c {
                        gx.data_mut()[(b * c + ci) * hw + p] = T::zero();
                    }
                }
                gx
            });
            let gr = need[1].then(|| {
                let mut gr = Tensor::zeros(&[k, c]);
                for (ri, &p) in idx.iter().enumerate() {
                    for ci in 0..c {
                        gr.data_mut()[ri * c + ci] = g.data()[(b * c + ci) * hw + p];
                    }
                }
                gr
            });
            let _ = bs;
            vec![gx, gr]
        })
    }

    /// `(N, Din) · (Din, Dout) + bias`.
    pub fn linear(self, weight: Self, bias: Self) -> Self {
        let (x, w, bv) = (self.value(), weight.value(), bias.value());
        let mut y = tensor::matmul(&x, false, &w, false);
        let (n, dout) = y.dims2();
        for r in 0..n {
            for (o, &bb) in y.data_mut()[r * dout..(r + 1) * dout].iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        self.tape.push(y, &[self, weight, bias], move |g, need| {
            let gx = need[0].then(|| tensor::matmul(g, false, &w, true));
            let gw = need[1].then(|| tensor::matmul(&x, true, g, false));
            let gb = need[2].then(|| {
                let mut gb = Tensor::zeros(&[dout]);
                for r in 0..n {
                    for (o, &gv) in gb.data_mut().iter_mut().zip(&g.data()[r * dout..(r + 1) * dout]) {
                        *o = *o + gv;
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        })
    }

    /// `self · otherᵀ` for `(K, D)` and `(M, D)`.
    pub fn matmul_nt(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let y = tensor::matmul(&a, false, &b, true);
        self.tape.push(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| tensor::matmul(g, false, &b, false)),
                need[1].then(|| tensor::matmul(g, true, &a, false)),
            ]
        })
    }

    /// `self · other` for `(K, M)` and `(M, D)`.
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let y = tensor::matmul(&a, false, &b, false);
        self.tape.push(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| tensor::matmul(g, false, &b, true)),
                need[1].then(|| tensor::matmul(&a, true, g, false)),
            ]
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        let x = self.value();
        let (n, d) = x.dims2();
        let mut out = Tensor::zeros(&[n, len]);
        for r in 0..n {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        self.tape.push(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, d]);
            for r in 0..n {
                gx.data_mut()[r * d + start..r * d + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(gx)]
        })
    }

    pub fn concat_cols(parts: &[Self]) -> Self {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = values[0].dims2().0;
        let widths: Vec<usize> = values.iter().map(|v| v.dims2().1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut c0 = 0;
        for (v, &d) in values.iter().zip(&widths) {
            assert_eq!(v.dims2().0, n);
            for r in 0..n {
                out.data_mut()[r * total + c0..r * total + c0 + d]
                    .copy_from_slice(&v.data()[r * d..(r + 1) * d]);
            }
            c0 += d;
        }
        tape.push(out, parts, move |g, need| {
            let mut res = Vec::new();
            let mut c0 = 0;
            for (i, &d) in widths.iter().enumerate() {
                res.push(need[i].then(|| {
                    let mut gp = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        gp.data_mut()[r * d..(r + 1) * d]
                            .copy_from_slice(&g.data()[r * total + c0..r * total + c0 + d]);
                    }
                    gp
                }));
                c0 += d;
            }
            res
        })
    }

    /// Row-wise softmax of an `(N, M)` matrix.
    pub fn softmax_rows(self) -> Self {
        let x = self.value();
        let (n, m) = x.dims2();
        let mut y = Tensor::zeros(&[n, m]);
        for r in 0..n {
            softmax_into(&x.data()[r * m..(r + 1) * m], &mut y.data_mut()[r * m..(r + 1) * m]);
        }
        let y2 = y.clone();
        self.tape.push(y, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, m]);
            for r in 0..n {
                let ys = &y2.data()[r * m..(r + 1) * m];
                let gs = &g.data()[r * m..(r + 1) * m];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    gx.data_mut()[r * m + j] = ys[j] * (gs[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// `Σ self ⊙ weights` against a constant tensor of the same shape.
    pub fn dot_const(self, weights: Tensor<T>) -> Self {
        let x = self.value();
        let v: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.tape.push(Tensor::scalar(v), &[self], move |g, _| {
            let gv = g.data()[0];
            vec![Some(weights.map(|w| w * gv))]
        })
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    /// `Σ wᵢ·sᵢ` over scalar variables.
    pub fn weighted_sum(terms: &[(Self, f64)]) -> Self {
        let tape = terms[0].0.tape;
        let ws: Vec<T> = terms.iter().map(|&(_, w)| T::of(w)).collect();
        let v = terms
            .iter()
            .zip(&ws)
            .fold(T::zero(), |acc, ((s, _), &w)| acc + s.value().data()[0] * w);
        let parents: Vec<Self> = terms.iter().map(|&(s, _)| s).collect();
        tape.push(Tensor::scalar(v), &parents, move |g, _| {
            ws.iter().map(|&w| Some(Tensor::scalar(g.data()[0] * w))).collect()
        })
    }

    /// Mean pixel-wise cross entropy of `(B, n, H, W)` logits against class ids
    /// laid out as `B·H·W`.
    pub fn cross_entropy(self, target: Rc<Vec<usize>>) -> Self {
        let x = self.value();
        let (b, n, h, w) = x.dims4();
        let hw = h * w;
        assert_eq!(target.len(), b * hw, "target length");
        let mut probs = Tensor::zeros(x.shape());
        let mut loss = T::zero();
        let mut logits = vec![T::zero(); n];
        let mut p = vec![T::zero(); n];
        for bi in 0..b {
            for px in 0..hw {
                for c in 0..n {
                    logits[c] = x.data()[(bi * n + c) * hw + px];
                }
                let lse = log_sum_exp(&logits);
                let t = target[bi * hw + px];
                loss = loss + lse - logits[t];
                softmax_into(&logits, &mut p);
                for c in 0..n {
                    probs.data_mut()[(bi * n + c) * hw + px] = p[c];
                }
            }
        }
        let count = T::of((b * hw) as f64);
        self.tape.push(Tensor::scalar(loss / count), &[self], move |g, _| {
            let s = g.data()[0] / count;
            let mut gx = probs.clone();
            for bi in 0..b {
                for px in 0..hw {
                    let t = target[bi * hw + px];
                    let d = &mut gx.data_mut()[(bi * n + t) * hw + px];
                    *d = *d - T::one();
                }
            }
            vec![Some(gx.map(|v| v * s))]
        })
    }

    /// Squared-denominator Dice loss on `(B, 1, H, W)` probabilities, averaged
    /// over the batch.
    pub fn dice_loss(self, target: Rc<Vec<T>>, smooth: f64) -> Self {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, 1);
        let hw = h * w;
        assert_eq!(target.len(), b * hw);
        let eps = T::of(smooth);
        let mut terms = Vec::with_capacity(b);
        let mut loss = T::zero();
        for bi in 0..b {
            let p = &x.data()[bi * hw..(bi + 1) * hw];
            let t = &target[bi * hw..(bi + 1) * hw];
            let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
            let den: T = p.iter().map(|&a| a * a).sum::<T>() + t.iter().map(|&a| a * a).sum::<T>();
            let num = T::of(2.0) * inter + eps;
            let den = den + eps;
            loss = loss + T::one() - num / den;
            terms.push((num, den));
        }
        let bb = T::of(b as f64);
        self.tape.push(Tensor::scalar(loss / bb), &[self], move |g, _| {
            let s = g.data()[0] / bb;
            let mut gx = Tensor::zeros(&[b, 1, h, w]);
            for (bi, &(num, den)) in terms.iter().enumerate() {
                for px in 0..hw {
                    let pv = x.data()[bi * hw + px];
                    let tv = target[bi * hw + px];
                    // d/dp [1 - num/den] = -(2t·den - num·2p) / den²
                    let d = -(T::of(2.0) * tv * den - num * T::of(2.0) * pv) / (den * den);
                    gx.data_mut()[bi * hw + px] = d * s;
                }
            }
            vec![Some(gx)]
        })
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax_into<T: Real>(xs: &[T], out: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(xs) {
        *o = (v - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

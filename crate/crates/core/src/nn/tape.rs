//! Reverse-mode tape over feature maps.
//!
//! Nodes are appended in evaluation order, so reverse iteration is a valid
//! topological order for the backward sweep. Nodes built only from constants
//! do not require gradients and are skipped.

use ndarray::{Array5, ArrayD, ArrayView1, ArrayView5, Ix1, Ix5, IxDyn};

use super::{conv, ops};
use crate::error::{Error, Result};
use crate::transformer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array5<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        patch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, ArrayD<f64>)>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(tape.value(v).raw_dim()))
    }
}

fn as5(a: &ArrayD<f64>) -> ArrayView5<'_, f64> {
    a.view()
        .into_dimensionality::<Ix5>()
        .expect("feature maps and kernels are 5D")
}

fn as1(a: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("biases and norm parameters are 1D")
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
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

    fn push(&mut self, value: ArrayD<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn value5(&self, v: Var) -> Array5<f64> {
        as5(self.value(v)).to_owned()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv3d(
            as5(self.value(x)),
            as5(self.value(w)),
            b.map(|b| as1(self.value(b))),
            stride,
            pad,
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            y.into_dyn(),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        ))
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = conv::conv_transpose3d(
            as5(self.value(x)),
            as5(self.value(w)),
            b.map(|b| as1(self.value(b))),
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y.into_dyn(), Op::ConvTranspose { x, w, b }, &parents))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(as5(self.value(x)));
        self.push(y.into_dyn(), Op::Relu(x), &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(as5(self.value(x)))?;
        Ok(self.push(y.into_dyn(), Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = ops::upsample2(as5(self.value(x)));
        self.push(y.into_dyn(), Op::Upsample(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let views: Vec<_> = xs.iter().map(|&v| as5(self.value(v))).collect();
        let y = ops::concat_channels(&views)?;
        Ok(self.push(y.into_dyn(), Op::Concat(xs.to_vec()), xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = ops::layer_norm_channels(
            as5(self.value(x)),
            as1(self.value(gamma)),
            as1(self.value(beta)),
        )?;
        Ok(self.push(
            out.y.into_dyn(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head attention between patch tokens of three equally shaped maps;
    /// the result is folded back to the maps' shape.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, patch: usize, heads: usize) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        if self.value(k).shape() != shape || self.value(v).shape() != shape {
            return Err(Error::ShapeMismatch("attention inputs differ in shape".into()));
        }
        let tq = transformer::patchify(as5(self.value(q)), patch)?;
        let tk = transformer::patchify(as5(self.value(k)), patch)?;
        let tv = transformer::patchify(as5(self.value(v)), patch)?;
        let (b, n, len) = tq.dim();
        if heads == 0 || len % heads != 0 {
            return Err(Error::IndivisibleChannels { len, heads });
        }
        let (y, probs) = transformer::attention_tokens(
            tq.as_slice().unwrap(),
            tk.as_slice().unwrap(),
            tv.as_slice().unwrap(),
            b,
            n,
            len,
            heads,
        );
        let y = ndarray::Array3::from_shape_vec((b, n, len), y).expect("shape matches buffer");
        let out = transformer::unpatchify(y.view(), [shape[2], shape[3], shape[4]], patch)?;
        Ok(self.push(
            out.into_dyn(),
            Op::Attention {
                q,
                k,
                v,
                patch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Scalar `sum_i <w_i, x_i>`; the usual root for a backward sweep.
    pub fn weighted_sum(&mut self, terms: &[(Var, ArrayD<f64>)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, w) in terms {
            if self.value(*v).shape() != w.shape() {
                return Err(Error::ShapeMismatch("weighted_sum weight shape".into()));
            }
            total += (self.value(*v) * w).sum();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::WeightedSum(terms.to_vec()),
            &parents,
        ))
    }

    /// Backward sweep from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch("backward root must be a scalar".into()));
        }
        self.backward_with(root, ArrayD::ones(self.value(root).raw_dim()))
    }

    /// Backward sweep seeded with `seed` at `root`.
    pub fn backward_with(&self, root: Var, seed: ArrayD<f64>) -> Result<Grads> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::ShapeMismatch("seed shape".into()));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            let send = |v: Var, d: ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], d);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let r = conv::conv3d_backward(
                        as5(self.value(*x)),
                        as5(self.value(*w)),
                        as5(&g),
                        *stride,
                        *pad,
                        wants(*x),
                    )?;
                    if let Some(dx) = r.dx {
                        send(*x, dx.into_dyn(), &mut grads);
                    }
                    send(*w, r.dw.into_dyn(), &mut grads);
                    if let Some(b) = b {
                        send(*b, r.db.into_dyn(), &mut grads);
                    }
                }
                Op::ConvTranspose { x, w, b } => {
                    let r = conv::conv_transpose3d_backward(
                        as5(self.value(*x)),
                        as5(self.value(*w)),
                        as5(&g),
                        wants(*x),
                    )?;
                    if let Some(dx) = r.dx {
                        send(*x, dx.into_dyn(), &mut grads);
                    }
                    send(*w, r.dw.into_dyn(), &mut grads);
                    if let Some(b) = b {
                        send(*b, r.db.into_dyn(), &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(as5(&node.value), as5(&g));
                    send(*x, dx.into_dyn(), &mut grads);
                }
                Op::MaxPool { x, argmax } => {
                    let dx = ops::max_pool2_backward(self.value(*x).shape(), argmax, as5(&g));
                    send(*x, dx.into_dyn(), &mut grads);
                }
                Op::Upsample(x) => {
                    send(*x, ops::upsample2_backward(as5(&g)).into_dyn(), &mut grads);
                }
                Op::Concat(xs) => {
                    let chans: Vec<usize> = xs.iter().map(|v| self.value(*v).shape()[1]).collect();
                    for (v, d) in xs.iter().zip(ops::concat_backward(as5(&g), &chans)) {
                        send(*v, d.into_dyn(), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let r = ops::layer_norm_channels_backward(
                        xhat.view(),
                        inv_std,
                        as1(self.value(*gamma)),
                        as5(&g),
                    );
                    send(*x, r.dx.into_dyn(), &mut grads);
                    send(*gamma, r.dgamma.into_dyn(), &mut grads);
                    send(*beta, r.dbeta.into_dyn(), &mut grads);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    patch,
                    heads,
                    probs,
                } => {
                    let shape = self.value(*q).shape().to_vec();
                    let spatial = [shape[2], shape[3], shape[4]];
                    let tq = transformer::patchify(as5(self.value(*q)), *patch)?;
                    let tk = transformer::patchify(as5(self.value(*k)), *patch)?;
                    let tv = transformer::patchify(as5(self.value(*v)), *patch)?;
                    let tg = transformer::patchify(as5(&g), *patch)?;
                    let (b, n, len) = tq.dim();
                    let (dq, dk, dv) = transformer::attention_tokens_backward(
                        tq.as_slice().unwrap(),
                        tk.as_slice().unwrap(),
                        tv.as_slice().unwrap(),
                        probs,
                        tg.as_slice().unwrap(),
                        b,
                        n,
                        len,
                        *heads,
                    );
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let seq = ndarray::Array3::from_shape_vec((b, n, len), d)
                            .expect("shape matches buffer");
                        let map = transformer::unpatchify(seq.view(), spatial, *patch)?;
                        send(var, map.into_dyn(), &mut grads);
                    }
                }
                Op::WeightedSum(terms) => {
                    let s = g.iter().next().copied().unwrap_or(0.0);
                    for (v, w) in terms {
                        send(*v, w * s, &mut grads);
                    }
                }
            }
        }
        // Only leaves keep their gradients.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Grads { grads })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_flow_through_a_small_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Array5::from_shape_simple_fn((1, 2, 4, 4, 4), || rng.gen_range(-1.0..1.0));
        let w0 = Array5::from_shape_simple_fn((3, 2, 3, 3, 3), || rng.gen_range(-0.3..0.3));
        let dy = Array5::from_shape_simple_fn((1, 3, 4, 4, 4), || rng.gen_range(-1.0..1.0));
        let run = |x: &Array5<f64>, w: &Array5<f64>| -> (f64, Option<ArrayD<f64>>) {
            let mut t = Tape::new();
            let xv = t.constant(x.clone().into_dyn());
            let wv = t.param(w.clone().into_dyn());
            let c = t.conv3d(xv, wv, None, 1, 1).unwrap();
            let r = t.relu(c);
            let p = t.max_pool2(r).unwrap();
            let u = t.upsample2(p);
            let s = t.add(u, c).unwrap();
            let root = t.weighted_sum(&[(s, dy.clone().into_dyn())]).unwrap();
            let value = t.value(root).iter().next().copied().unwrap();
            let g = t.backward(root).unwrap();
            assert!(g.get(xv).is_none(), "constants get no gradient");
            (value, g.get(wv).cloned())
        };
        let (_, g) = run(&x0, &w0);
        let g = g.unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [2, 1, 1, 2, 0], [1, 0, 2, 2, 2]] {
            let mut wp = w0.clone();
            wp[idx] += h;
            let mut wm = w0.clone();
            wm[idx] -= h;
            let fd = (run(&x0, &wp).0 - run(&x0, &wm).0) / (2.0 * h);
            assert!((fd - g[IxDyn(&idx)]).abs() < 1e-6, "{fd} vs {}", g[IxDyn(&idx)]);
        }
    }
}

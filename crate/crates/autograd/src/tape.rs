use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array4, ArrayD, Axis, Dimension, IxDyn, Zip};

use crate::kernels;
use crate::store::{ParamId, ParamStore};
use crate::TensorData;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    AddScalar(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Ln(Var),
    ClampMin(Var, f32),
    Mean(Var),
    Sum(Var),
    MeanPerSample(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatCh(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var, usize),
    AvgPool2(Var),
    Warp {
        frame: Var,
        flow: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    BatchMatmul(Var, Var),
}

struct Node {
    value: TensorData,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass. Build ops eagerly, then call [`Tape::backward`] on
/// a scalar node to get gradients for every grad-requiring node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

/// Result of a backward pass; indexable by the `Var`s of the originating tape.
pub struct Gradients {
    by_node: Vec<Option<TensorData>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&TensorData> {
        self.by_node[v.0].as_ref()
    }

    pub fn of_param(&self, id: ParamId) -> Option<&TensorData> {
        self.param_vars.get(&id).and_then(|v| self.by_node[v.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &TensorData)> {
        self.param_vars
            .iter()
            .filter_map(|(id, v)| self.by_node[v.0].as_ref().map(|g| (*id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: TensorData, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &TensorData {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().unwrap()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, value: TensorData) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients (used for gradient checks and for
    /// detached tensors that still need a gradient).
    pub fn grad_leaf(&mut self, value: TensorData) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy a parameter onto the tape. Repeated requests for the same id on
    /// one tape return the same node so gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        let g = self.ng(a);
        self.push(value, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|x| c * x);
        let g = self.ng(a);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        let g = self.ng(a);
        self.push(value, Op::AddScalar(a, c), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let g = self.ng(a);
        self.push(value, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let g = self.ng(a);
        self.push(value, Op::LeakyRelu(a, slope), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::tanh);
        let g = self.ng(a);
        self.push(value, Op::Tanh(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let g = self.ng(a);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 20.0 { x } else { x.exp().ln_1p() });
        let g = self.ng(a);
        self.push(value, Op::Softplus(a), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::abs);
        let g = self.ng(a);
        self.push(value, Op::Abs(a), g)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::ln);
        let g = self.ng(a);
        self.push(value, Op::Ln(a), g)
    }

    pub fn clamp_min(&mut self, a: Var, min: f32) -> Var {
        let value = self.value(a).mapv(|x| x.max(min));
        let g = self.ng(a);
        self.push(value, Op::ClampMin(a, min), g)
    }

    /// Mean over all elements; yields a 0-d tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().expect("mean of empty tensor");
        let g = self.ng(a);
        self.push(scalar(m), Op::Mean(a), g)
    }

    /// Sum over all elements; yields a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.ng(a);
        self.push(scalar(s), Op::Sum(a), g)
    }

    /// Mean over every axis except the first: (N, ...) -> (N,).
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let n = val.shape()[0];
        let per = val.len() / n;
        let flat = val
            .to_shape((n, per))
            .expect("reshape")
            .mean_axis(Axis(1))
            .expect("mean");
        let g = self.ng(a);
        self.push(flat.into_dyn(), Op::MeanPerSample(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let g = self.ng(a);
        self.push(value, Op::Reshape(a), g)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let g = self.ng(a);
        self.push(value, Op::Permute(a, axes.to_vec()), g)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_channels shape mismatch");
        let g = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatCh(parts.to_vec()), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let bias = b.map(|bv| as1(self.value(bv)));
        let value = kernels::conv2d(
            &as4(self.value(x)),
            &as4(self.value(w)),
            bias.as_ref(),
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(value.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let bias = b.map(|bv| as1(self.value(bv)));
        let value = kernels::conv_transpose2d(
            &as4(self.value(x)),
            &as4(self.value(w)),
            bias.as_ref(),
            stride,
            pad,
            out_pad,
        );
        let g = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(
            value.into_dyn(),
            Op::ConvTranspose2d { x, w, b, stride, pad },
            g,
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::upsample_nearest(&as4(self.value(x)), factor);
        let g = self.ng(x);
        self.push(value.into_dyn(), Op::UpsampleNearest(x, factor), g)
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::upsample_bilinear(&as4(self.value(x)), factor);
        let g = self.ng(x);
        self.push(value.into_dyn(), Op::UpsampleBilinear(x, factor), g)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let value = kernels::avg_pool2(&as4(self.value(x)));
        let g = self.ng(x);
        self.push(value.into_dyn(), Op::AvgPool2(x), g)
    }

    /// Backward-warp `frame` by `flow` (channel 0 = dx, channel 1 = dy).
    pub fn warp(&mut self, frame: Var, flow: Var) -> Var {
        let value = kernels::warp(&as4(self.value(frame)), &as4(self.value(flow)));
        let g = self.ng(frame) || self.ng(flow);
        self.push(value.into_dyn(), Op::Warp { frame, flow }, g)
    }

    /// Batch normalization over (N, H, W) per channel, using batch statistics
    /// in every mode. `gamma`/`beta` are per-channel vectors.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f32;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ci in 0..c {
            let ch = xv.index_axis(Axis(1), ci);
            let mu = ch.sum() / m;
            mean[ci] = mu;
            var[ci] = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / m;
        }
        let gv = as1(self.value(gamma));
        let bv = as1(self.value(beta));
        let mut y = Array4::<f32>::zeros((n, c, h, w));
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let (mu, ga, be) = (mean[ci], gv[ci], bv[ci]);
            Zip::from(y.index_axis_mut(Axis(1), ci))
                .and(xv.index_axis(Axis(1), ci))
                .for_each(|o, &i| *o = ga * (i - mu) * inv + be);
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y.into_dyn(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
            g,
        )
    }

    /// Per-channel matrix products: (C, m, k) x (C, k, n) -> (C, m, n).
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (c, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (cb, kb, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(c, cb, "batch_matmul channel mismatch");
        assert_eq!(k, kb, "batch_matmul inner-dim mismatch");
        let a3 = av.to_shape((c, m, k)).expect("shape");
        let b3 = bv.to_shape((c, kb, n)).expect("shape");
        let mut out = ndarray::Array3::<f32>::zeros((c, m, n));
        for ci in 0..c {
            let prod = a3
                .index_axis(Axis(0), ci)
                .dot(&b3.index_axis(Axis(0), ci));
            out.index_axis_mut(Axis(0), ci).assign(&prod);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::BatchMatmul(a, b), g)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<TensorData>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients {
            by_node: grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn backprop_node(&self, idx: usize, gy: &TensorData, grads: &mut [Option<TensorData>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_bc(grads, *a, gy.clone());
                self.acc_bc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc_bc(grads, *a, gy.clone());
                self.acc_bc(grads, *b, gy.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = broadcast_zip(gy, self.value(*b), |g, y| g * y);
                    self.acc_bc(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = broadcast_zip(gy, self.value(*a), |g, x| g * x);
                    self.acc_bc(grads, *b, d);
                }
            }
            Op::Neg(a) => self.acc(grads, *a, gy.mapv(|v| -v)),
            Op::Scale(a, c) => self.acc(grads, *a, gy.mapv(|v| c * v)),
            Op::AddScalar(a, _) => self.acc(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let d = zip_with(gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let slope = *s;
                let d = zip_with(gy, self.value(*a), |g, x| if x > 0.0 { g } else { slope * g });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_with(gy, &node.value, |g, y| g * (1.0 - y * y));
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_with(gy, &node.value, |g, y| g * y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_with(gy, self.value(*a), |g, x| g * stable_sigmoid(x));
                self.acc(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_with(gy, self.value(*a), |g, x| {
                    if x >= 0.0 {
                        g
                    } else {
                        -g
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Ln(a) => {
                let d = zip_with(gy, self.value(*a), |g, x| g / x);
                self.acc(grads, *a, d);
            }
            Op::ClampMin(a, min) => {
                let m = *min;
                let d = zip_with(gy, self.value(*a), |g, x| if x > m { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f32;
                let g = gy.iter().next().unwrap() / n;
                let d = ArrayD::from_elem(self.value(*a).raw_dim(), g);
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let g = *gy.iter().next().unwrap();
                let d = ArrayD::from_elem(self.value(*a).raw_dim(), g);
                self.acc(grads, *a, d);
            }
            Op::MeanPerSample(a) => {
                let shape = self.value(*a).raw_dim();
                let n = shape[0];
                let per = self.value(*a).len() / n;
                let mut d = ArrayD::zeros(shape.clone());
                {
                    let mut flat = d.view_mut().into_shape_with_order((n, per)).expect("reshape");
                    for ni in 0..n {
                        let g = gy[[ni]] / per as f32;
                        flat.row_mut(ni).fill(g);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let d = gy
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .expect("reshape grad");
                self.acc(grads, *a, d);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let d = gy
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                self.acc(grads, *a, d);
            }
            Op::ConcatCh(parts) => {
                let mut offset = 0usize;
                for p in parts {
                    let cw = self.value(*p).shape()[1];
                    let d = gy
                        .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + cw))
                        .to_owned();
                    self.acc(grads, *p, d);
                    offset += cw;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    &as4(self.value(*x)),
                    &as4(self.value(*w)),
                    &as4(gy),
                    *stride,
                    *pad,
                );
                self.acc(grads, *x, dx.into_dyn());
                self.acc(grads, *w, dw.into_dyn());
                if let Some(bv) = b {
                    self.acc(grads, *bv, db.into_dyn());
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    &as4(self.value(*x)),
                    &as4(self.value(*w)),
                    &as4(gy),
                    *stride,
                    *pad,
                );
                self.acc(grads, *x, dx.into_dyn());
                self.acc(grads, *w, dw.into_dyn());
                if let Some(bv) = b {
                    self.acc(grads, *bv, db.into_dyn());
                }
            }
            Op::UpsampleNearest(x, f) => {
                let d = kernels::upsample_nearest_backward(&as4(gy), *f);
                self.acc(grads, *x, d.into_dyn());
            }
            Op::UpsampleBilinear(x, f) => {
                let shape = self.value(*x).shape();
                let d = kernels::upsample_bilinear_backward(&as4(gy), *f, shape[2], shape[3]);
                self.acc(grads, *x, d.into_dyn());
            }
            Op::AvgPool2(x) => {
                let d = kernels::avg_pool2_backward(&as4(gy));
                self.acc(grads, *x, d.into_dyn());
            }
            Op::Warp { frame, flow } => {
                let (df, dl) = kernels::warp_backward(
                    &as4(self.value(*frame)),
                    &as4(self.value(*flow)),
                    &as4(gy),
                );
                self.acc(grads, *frame, df.into_dyn());
                self.acc(grads, *flow, dl.into_dyn());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            } => {
                let xv = as4(self.value(*x));
                let gyv = as4(gy);
                let (n, c, h, w) = xv.dim();
                let m = (n * h * w) as f32;
                let gv = as1(self.value(*gamma));
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                let mut dx = Array4::<f32>::zeros((n, c, h, w));
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let mu = mean[ci];
                    let xc = xv.index_axis(Axis(1), ci);
                    let gc = gyv.index_axis(Axis(1), ci);
                    let mut sum_g = 0.0f32;
                    let mut sum_gx = 0.0f32;
                    Zip::from(&gc).and(&xc).for_each(|&g, &xi| {
                        let xh = (xi - mu) * inv;
                        sum_g += g;
                        sum_gx += g * xh;
                    });
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;
                    let ga = gv[ci];
                    let mg = sum_g / m;
                    let mgx = sum_gx / m;
                    Zip::from(dx.index_axis_mut(Axis(1), ci))
                        .and(&gc)
                        .and(&xc)
                        .for_each(|o, &g, &xi| {
                            let xh = (xi - mu) * inv;
                            *o = ga * inv * (g - mg - xh * mgx);
                        });
                }
                self.acc(grads, *x, dx.into_dyn());
                self.acc(grads, *gamma, dgamma.into_dyn());
                self.acc(grads, *beta, dbeta.into_dyn());
            }
            Op::BatchMatmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (c, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                let a3 = av.to_shape((c, m, k)).expect("shape");
                let b3 = bv.to_shape((c, k, n)).expect("shape");
                let g3 = gy.to_shape((c, m, n)).expect("shape");
                if self.ng(*a) {
                    let mut da = ndarray::Array3::<f32>::zeros((c, m, k));
                    for ci in 0..c {
                        let d = g3
                            .index_axis(Axis(0), ci)
                            .dot(&b3.index_axis(Axis(0), ci).t());
                        da.index_axis_mut(Axis(0), ci).assign(&d);
                    }
                    self.acc(grads, *a, da.into_dyn());
                }
                if self.ng(*b) {
                    let mut db = ndarray::Array3::<f32>::zeros((c, k, n));
                    for ci in 0..c {
                        let d = a3
                            .index_axis(Axis(0), ci)
                            .t()
                            .dot(&g3.index_axis(Axis(0), ci));
                        db.index_axis_mut(Axis(0), ci).assign(&d);
                    }
                    self.acc(grads, *b, db.into_dyn());
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<TensorData>], v: Var, delta: TensorData) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Accumulate with reduction over broadcast axes.
    fn acc_bc(&self, grads: &mut [Option<TensorData>], v: Var, delta: TensorData) {
        if !self.ng(v) {
            return;
        }
        let target = self.value(v).raw_dim();
        let reduced = sum_to_shape(delta, &target);
        self.acc(grads, v, reduced);
    }
}

fn scalar(v: f32) -> TensorData {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as4(v: &TensorData) -> ndarray::ArrayView4<'_, f32> {
    v.view().into_dimensionality().expect("expected 4-d tensor")
}

fn as1(v: &TensorData) -> Array1<f32> {
    v.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected 1-d tensor")
        .to_owned()
}

/// Elementwise combine with numpy-style broadcasting.
fn broadcast_zip(a: &TensorData, b: &TensorData, f: impl Fn(f32, f32) -> f32) -> TensorData {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|o, &y| *o = f(*o, y));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce `grad` down to `target` by summing broadcast axes.
fn sum_to_shape(grad: TensorData, target: &IxDyn) -> TensorData {
    if grad.raw_dim() == *target {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > target.ndim() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.ndim() {
        if target[ax] == 1 && g.shape()[ax] > 1 {
            let summed = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            g = summed;
        }
    }
    g
}

fn zip_with(g: &TensorData, x: &TensorData, f: impl Fn(f32, f32) -> f32) -> TensorData {
    let mut out = g.clone();
    Zip::from(&mut out).and(x).for_each(|o, &xv| *o = f(*o, xv));
    out
}

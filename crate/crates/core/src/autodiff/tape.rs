use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{GaitError, Result};
use crate::kernels::{self, ConvGeometry, PoolKind};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// What a backward rule sees: its inputs' forward values, its own output,
/// the upstream gradient, and which inputs actually need a gradient.
pub struct BackwardCtx<'a, F> {
    pub inputs: Vec<&'a Tensor<F>>,
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
    pub needs: Vec<bool>,
}

pub type BackwardFn<F> =
    Box<dyn FnOnce(&BackwardCtx<'_, F>) -> Result<Vec<Option<Tensor<F>>>> + Send>;

enum Origin<F> {
    Constant,
    Input,
    Param(ParamId),
    Op {
        name: &'static str,
        backward: Option<BackwardFn<F>>,
    },
}

struct Node<F> {
    value: Option<Tensor<F>>,
    inputs: Vec<Var>,
    origin: Origin<F>,
    requires_grad: bool,
}

/// Gradients of the loss with respect to `Tape::input` leaves.
pub struct LeafGrads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> LeafGrads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Append-only record of forward operations. `backward` walks it once in
/// reverse insertion order and consumes it.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    fault: Option<String>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: perturbs every gradient produced by operations named `op`.
    /// Used as a negative control for the gradient checker.
    pub fn inject_fault(&mut self, op: impl Into<String>) {
        self.fault = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("tape value already released")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<F>, inputs: Vec<Var>, origin: Origin<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            inputs,
            origin,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Vec::new(), Origin::Constant, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Vec::new(), Origin::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Vec::new(), Origin::Param(id), true)
    }

    /// Records an operation with a custom backward rule. The rule returns one
    /// optional gradient per input, in input order.
    pub fn record(
        &mut self,
        name: &'static str,
        value: Tensor<F>,
        inputs: &[Var],
        backward: BackwardFn<F>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            value,
            inputs.to_vec(),
            Origin::Op {
                name,
                backward: requires_grad.then_some(backward),
            },
            requires_grad,
        )
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store`; gradients of `input` leaves are returned.
    pub fn backward(mut self, loss: Var, store: &mut ParamStore<F>) -> Result<LeafGrads<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GaitError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let fault = self.fault.take();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                self.nodes[i].value = None;
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            match &mut node.origin {
                Origin::Constant => {}
                Origin::Input => leaf[i] = Some(g),
                Origin::Param(id) => store.accumulate(*id, &g),
                Origin::Op { name, backward } => {
                    let name = *name;
                    let Some(rule) = backward.take() else { continue };
                    let inputs: Vec<&Tensor<F>> = node
                        .inputs
                        .iter()
                        .map(|v| before[v.0].value.as_ref().expect("input released early"))
                        .collect();
                    let needs = node.inputs.iter().map(|v| before[v.0].requires_grad).collect();
                    let ctx = BackwardCtx {
                        inputs,
                        output: node.value.as_ref().expect("output released early"),
                        grad: &g,
                        needs,
                    };
                    let mut out = rule(&ctx)?;
                    if out.len() != node.inputs.len() {
                        return Err(GaitError::Contract(format!(
                            "backward rule of '{name}' returned {} gradients for {} inputs",
                            out.len(),
                            node.inputs.len()
                        )));
                    }
                    if fault.as_deref() == Some(name) {
                        for gi in out.iter_mut().flatten() {
                            *gi = gi.map(|v| v * F::of(1.25) + F::of(0.01));
                        }
                    }
                    for (v, gi) in node.inputs.iter().zip(out) {
                        let Some(gi) = gi else { continue };
                        if !before[v.0].requires_grad {
                            continue;
                        }
                        if gi.shape() != before[v.0].value.as_ref().unwrap().shape() {
                            return Err(GaitError::Contract(format!(
                                "backward rule of '{name}' produced gradient shape {:?} for input {:?}",
                                gi.shape(),
                                before[v.0].value.as_ref().unwrap().shape()
                            )));
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
            node.value = None;
        }
        Ok(LeafGrads { grads: leaf })
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let y = kernels::conv3d(self.value(x), self.value(w), bias.map(|b| self.value(b)), &geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(
            "conv3d",
            y,
            &inputs,
            Box::new(move |c| {
                let g = kernels::conv3d_backward(c.inputs[0], c.inputs[1], has_bias, &geom, c.grad, c.needs[0])?;
                let mut out = vec![g.dx, Some(g.dw)];
                if has_bias {
                    out.push(g.db);
                }
                Ok(out)
            }),
        ))
    }

    /// `conv3d(x * mask, w)` without bias, with `mask: [H, W]` broadcast over
    /// batch, channel and time. Output rows that only read all-zero mask rows
    /// are skipped.
    pub fn masked_conv3d(&mut self, x: Var, w: Var, mask: &Tensor<F>, geom: ConvGeometry) -> Result<Var> {
        let xs = self.value(x).dims5("masked_conv3d")?;
        if mask.shape() != [xs[3], xs[4]] {
            return Err(GaitError::dim(
                "masked_conv3d",
                format!("mask shape {:?} does not broadcast over input {xs:?}", mask.shape()),
            ));
        }
        let apply = |t: &Tensor<F>, m: &Tensor<F>| -> Result<Tensor<F>> {
            let plane = m.len();
            let data = t
                .data()
                .chunks_exact(plane)
                .flat_map(|s| s.iter().zip(m.data()).map(|(&a, &b)| a * b))
                .collect();
            Tensor::from_vec(t.shape(), data)
        };
        let xm = apply(self.value(x), mask)?;
        let nonzero: Vec<bool> = mask.data().chunks_exact(xs[4]).map(|r| r.iter().any(|&v| v != F::zero())).collect();
        let h_out = geom
            .output_extents([xs[2], xs[3], xs[4]])
            .map(|e| e[1])
            .ok_or_else(|| GaitError::dim("masked_conv3d", format!("kernel {:?} does not fit input {xs:?}", geom.kernel)))?;
        let active = kernels::rows_reached(&nonzero, &geom, h_out);
        let y = kernels::conv3d_rows(&xm, self.value(w), None, &geom, &active)?;
        let mask = mask.clone();
        Ok(self.record(
            "masked_conv3d",
            y,
            &[x, w],
            Box::new(move |c| {
                let g = kernels::conv3d_rows_backward(&xm, c.inputs[1], false, &geom, c.grad, c.needs[0], &active)?;
                let dx = g.dx.map(|d| apply(&d, &mask)).transpose()?;
                Ok(vec![dx, Some(g.dw)])
            }),
        ))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let po = kernels::pool(self.value(x), kind, kernel, stride)?;
        let argmax = po.argmax;
        Ok(self.record(
            match kind {
                PoolKind::Max => "pool_max",
                PoolKind::Avg => "pool_avg",
            },
            po.value,
            &[x],
            Box::new(move |c| {
                let dx = kernels::pool_backward(c.inputs[0].shape(), kind, kernel, stride, argmax.as_deref(), c.grad)?;
                Ok(vec![Some(dx)])
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.record(
            "add",
            y,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.record(
            "sub",
            y,
            &[a, b],
            Box::new(|c| Ok(vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.record(
            "mul",
            y,
            &[a, b],
            Box::new(|c| {
                let da = c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, q| g * q)).transpose()?;
                let db = c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, p| g * p)).transpose()?;
                Ok(vec![da, db])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::of(s);
        let y = self.value(a).map(|v| v * s);
        self.record("scale", y, &[a], Box::new(move |c| Ok(vec![Some(c.grad.map(|g| g * s))])))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&mut self, a: Var, e: f64) -> Var {
        let ef = F::of(e);
        let y = self.value(a).map(|v| v.powf(ef));
        self.record(
            "pow",
            y,
            &[a],
            Box::new(move |c| {
                let d = c.inputs[0].map(|v| ef * v.powf(ef - F::one()));
                Ok(vec![Some(d.zip_map(c.grad, |p, g| p * g)?)])
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = F::of(slope);
        let y = self.value(a).map(|v| if v > F::zero() { v } else { v * s });
        self.record(
            "leaky_relu",
            y,
            &[a],
            Box::new(move |c| {
                Ok(vec![Some(c.inputs[0].zip_map(c.grad, |v, g| if v > F::zero() { g } else { g * s })?)])
            }),
        )
    }

    /// `max(a, lo)` elementwise.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = F::of(lo);
        let y = self.value(a).map(|v| if v > lo { v } else { lo });
        self.record(
            "clamp_min",
            y,
            &[a],
            Box::new(move |c| {
                Ok(vec![Some(c.inputs[0].zip_map(c.grad, |v, g| if v > lo { g } else { F::zero() })?)])
            }),
        )
    }

    /// Multiplies every `[H, W]` slice of a rank-5 `x` by the rank-2 `m`.
    pub fn mul_hw(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.value(x).dims5("mul_hw")?;
        let ms = self.value(m).shape().to_vec();
        if ms != [xs[3], xs[4]] {
            return Err(GaitError::dim(
                "mul_hw",
                format!("mask shape {ms:?} does not broadcast over input {xs:?}"),
            ));
        }
        let plane = xs[3] * xs[4];
        let y = {
            let md = self.value(m).data();
            let data = self
                .value(x)
                .data()
                .chunks_exact(plane)
                .flat_map(|s| s.iter().zip(md).map(|(&a, &b)| a * b))
                .collect();
            Tensor::from_vec(&xs, data)?
        };
        Ok(self.record(
            "mul_hw",
            y,
            &[x, m],
            Box::new(move |c| {
                let md = c.inputs[1].data();
                let dx = c.needs[0].then(|| {
                    let d = c
                        .grad
                        .data()
                        .chunks_exact(plane)
                        .flat_map(|s| s.iter().zip(md).map(|(&g, &b)| g * b))
                        .collect();
                    Tensor::from_vec(c.inputs[0].shape(), d)
                });
                let dm = c.needs[1].then(|| {
                    let mut acc = vec![F::zero(); plane];
                    for (gs, xs) in c.grad.data().chunks_exact(plane).zip(c.inputs[0].data().chunks_exact(plane)) {
                        for ((a, &g), &v) in acc.iter_mut().zip(gs).zip(xs) {
                            *a = *a + g * v;
                        }
                    }
                    Tensor::from_vec(c.inputs[1].shape(), acc)
                });
                Ok(vec![dx.transpose()?, dm.transpose()?])
            }),
        ))
    }

    /// Contraction of the last axis of `x` with a `[A, B]` matrix.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let a = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != a {
            return Err(GaitError::dim(
                "matmul",
                format!("cannot contract {xs:?} with {ws:?}"),
            ));
        }
        let b = ws[1];
        let rows = self.value(x).len() / a;
        let mut out = vec![F::zero(); rows * b];
        F::gemm(rows, a, b, F::one(), self.value(x).data(), a, 1, self.value(w).data(), b, 1, F::zero(), &mut out, b, 1);
        let mut os = xs.clone();
        *os.last_mut().unwrap() = b;
        let y = Tensor::from_vec(&os, out)?;
        Ok(self.record(
            "matmul",
            y,
            &[x, w],
            Box::new(move |c| {
                let g = c.grad.data();
                let dx = c.needs[0].then(|| {
                    let mut d = vec![F::zero(); rows * a];
                    F::gemm(rows, b, a, F::one(), g, b, 1, c.inputs[1].data(), 1, b, F::zero(), &mut d, a, 1);
                    Tensor::from_vec(c.inputs[0].shape(), d)
                });
                let dw = c.needs[1].then(|| {
                    let mut d = vec![F::zero(); a * b];
                    F::gemm(a, rows, b, F::one(), c.inputs[0].data(), 1, a, g, b, 1, F::zero(), &mut d, b, 1);
                    Tensor::from_vec(c.inputs[1].shape(), d)
                });
                Ok(vec![dx.transpose()?, dw.transpose()?])
            }),
        ))
    }

    /// Strip-wise linear maps: `x[N, H, C]` with `w[H, C, B]` gives
    /// `y[:, h, :] = x[:, h, :] . w[h]`. Each strip has its own matrix.
    pub fn separate_fc(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[1] || ws[1] != xs[2] {
            return Err(GaitError::Config(format!(
                "separate_fc: input {xs:?} needs one [C, B] weight per strip, got weights {ws:?}"
            )));
        }
        let (n, h, cin, cout) = (xs[0], xs[1], xs[2], ws[2]);
        let mut out = vec![F::zero(); n * h * cout];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for s in 0..h {
                F::gemm(n, cin, cout, F::one(), &xd[s * cin..], h * cin, 1, &wd[s * cin * cout..], cout, 1, F::zero(), &mut out[s * cout..], h * cout, 1);
            }
        }
        let y = Tensor::from_vec(&[n, h, cout], out)?;
        Ok(self.record(
            "separate_fc",
            y,
            &[x, w],
            Box::new(move |c| {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let dx = c.needs[0].then(|| {
                    let mut d = vec![F::zero(); n * h * cin];
                    for s in 0..h {
                        F::gemm(n, cout, cin, F::one(), &g[s * cout..], h * cout, 1, &wd[s * cin * cout..], 1, cout, F::zero(), &mut d[s * cin..], h * cin, 1);
                    }
                    Tensor::from_vec(&[n, h, cin], d)
                });
                let dw = c.needs[1].then(|| {
                    let mut d = vec![F::zero(); h * cin * cout];
                    for s in 0..h {
                        F::gemm(cin, n, cout, F::one(), &xd[s * cin..], 1, h * cin, &g[s * cout..], h * cout, 1, F::zero(), &mut d[s * cin * cout..], cout, 1);
                    }
                    Tensor::from_vec(&[h, cin, cout], d)
                });
                Ok(vec![dx.transpose()?, dw.transpose()?])
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.record(
            "reshape",
            y,
            &[x],
            Box::new(|c| Ok(vec![Some(c.grad.reshape(c.inputs[0].shape())?)])),
        ))
    }

    /// Swaps the two trailing axes.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(GaitError::dim("swap_last2", format!("rank {} < 2", xs.len())));
        }
        let y = transpose_last2(self.value(x));
        Ok(self.record("swap_last2", y, &[x], Box::new(|c| Ok(vec![Some(transpose_last2(c.grad))]))))
    }

    /// Concatenates rank-5 tensors along the height axis.
    pub fn concat_h(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GaitError::Contract("concat_h of nothing".into()));
        }
        let first = self.value(parts[0]).dims5("concat_h")?;
        let mut heights = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.value(p).dims5("concat_h")?;
            if d[0] != first[0] || d[1] != first[1] || d[2] != first[2] || d[4] != first[4] {
                return Err(GaitError::dim(
                    "concat_h",
                    format!("part shape {d:?} incompatible with {first:?}"),
                ));
            }
            heights.push(d[3]);
        }
        let total: usize = heights.iter().sum();
        let w = first[4];
        let outer = first[0] * first[1] * first[2];
        let mut out = Vec::with_capacity(outer * total * w);
        for o in 0..outer {
            for (&p, &h) in parts.iter().zip(&heights) {
                out.extend_from_slice(&self.value(p).data()[o * h * w..(o + 1) * h * w]);
            }
        }
        let y = Tensor::from_vec(&[first[0], first[1], first[2], total, w], out)?;
        let n_parts = parts.len();
        Ok(self.record(
            "concat_h",
            y,
            parts,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut bufs: Vec<Vec<F>> = heights.iter().map(|h| Vec::with_capacity(outer * h * w)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &h) in bufs.iter_mut().zip(&heights) {
                        buf.extend_from_slice(&g[off..off + h * w]);
                        off += h * w;
                    }
                }
                let mut res = Vec::with_capacity(n_parts);
                for (i, buf) in bufs.into_iter().enumerate() {
                    res.push(c.needs[i].then(|| Tensor::from_vec(c.inputs[i].shape(), buf)).transpose()?);
                }
                Ok(res)
            }),
        ))
    }

    /// Rows `[start, start + len)` of the height axis of a rank-5 tensor.
    pub fn slice_h(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.value(x).dims5("slice_h")?;
        if len == 0 || start + len > d[3] {
            return Err(GaitError::dim(
                "slice_h",
                format!("rows {start}..{} outside height {}", start + len, d[3]),
            ));
        }
        let (h, w) = (d[3], d[4]);
        let outer = d[0] * d[1] * d[2];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * w);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * h + start) * w..(o * h + start + len) * w]);
        }
        let y = Tensor::from_vec(&[d[0], d[1], d[2], len, w], out)?;
        Ok(self.record(
            "slice_h",
            y,
            &[x],
            Box::new(move |c| {
                let mut dx = vec![F::zero(); outer * h * w];
                for (o, g) in c.grad.data().chunks_exact(len * w).enumerate() {
                    dx[(o * h + start) * w..(o * h + start + len) * w].copy_from_slice(g);
                }
                Ok(vec![Some(Tensor::from_vec(c.inputs[0].shape(), dx)?)])
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            y,
            &[x],
            Box::new(|c| Ok(vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.data()[0]))])),
        )
    }

    /// Generalized mean over the last axis, `(mean(x^p))^(1/p)`, with a
    /// learnable scalar exponent `p` (shape `[1]`). Inputs must be >= 0.
    pub fn gem(&mut self, x: Var, p: Var) -> Result<Var> {
        let xv = self.value(x);
        let pv = self.value(p);
        if pv.len() != 1 {
            return Err(GaitError::dim("gem", format!("exponent must be a scalar, got {:?}", pv.shape())));
        }
        if xv.rank() < 2 {
            return Err(GaitError::dim("gem", format!("need rank >= 2, got {:?}", xv.shape())));
        }
        if let Some(&neg) = xv.data().iter().find(|v| **v < F::zero()) {
            return Err(GaitError::Domain(neg.as_f64()));
        }
        let pe = pv.data()[0];
        let w = *xv.shape().last().unwrap();
        let wn = F::of(w as f64);
        let inv_p = F::one() / pe;
        let out: Vec<F> = xv
            .data()
            .chunks_exact(w)
            .map(|s| {
                let m = s.iter().map(|&v| v.powf(pe)).sum::<F>() / wn;
                m.powf(inv_p)
            })
            .collect();
        let os = &xv.shape()[..xv.rank() - 1];
        let y = Tensor::from_vec(os, out)?;
        Ok(self.record(
            "gem",
            y,
            &[x, p],
            Box::new(move |c| {
                let xd = c.inputs[0].data();
                let (yd, g) = (c.output.data(), c.grad.data());
                let mut dx = c.needs[0].then(|| vec![F::zero(); xd.len()]);
                let mut dp = F::zero();
                for (r, s) in xd.chunks_exact(w).enumerate() {
                    let y = yd[r];
                    if y <= F::zero() {
                        // mean(x^p) == 0: every entry is 0, the map is flat from the right.
                        continue;
                    }
                    let m = s.iter().map(|&v| v.powf(pe)).sum::<F>() / wn;
                    if let Some(dx) = dx.as_mut() {
                        let k = g[r] * y / (wn * m);
                        for (d, &v) in dx[r * w..(r + 1) * w].iter_mut().zip(s) {
                            *d = k * v.powf(pe - F::one());
                        }
                    }
                    if c.needs[1] {
                        let xlx = s
                            .iter()
                            .filter(|v| **v > F::zero())
                            .map(|&v| v.powf(pe) * v.ln())
                            .sum::<F>()
                            / wn;
                        dp = dp + g[r] * y * (xlx / (m * pe) - m.ln() / (pe * pe));
                    }
                }
                Ok(vec![
                    dx.map(|d| Tensor::from_vec(c.inputs[0].shape(), d)).transpose()?,
                    c.needs[1].then(|| Tensor::scalar(dp)),
                ])
            }),
        ))
    }
}

fn transpose_last2<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let s = t.shape();
    let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = Vec::with_capacity(t.len());
    for blk in t.data().chunks_exact(a * b) {
        for j in 0..b {
            for i in 0..a {
                out.push(blk[i * b + j]);
            }
        }
    }
    let mut ns = s.to_vec();
    let r = ns.len();
    ns.swap(r - 2, r - 1);
    Tensor::from_vec(&ns, out).expect("transpose keeps element count")
}

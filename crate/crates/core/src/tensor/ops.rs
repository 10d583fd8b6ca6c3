//! Differentiable kernels recorded on the tape.

use super::tape::{accumulate, Node, Tape, Var};
use super::Tensor;
use crate::error::{NfsError, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum BnMode<'a, T: Scalar> {
    /// Normalize with the batch's own mean/variance.
    Train,
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Granularity of a search gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateLevel {
    /// One gate per response map.
    Channel,
    /// One gate per (channel, y, x) position.
    Pixel,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    ConcatRows(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    SteGate {
        param: Var,
        sigmoid_slope: Vec<T>,
    },
    GateMask {
        input: Var,
        gates: [Var; 2],
        rows: Vec<Modality>,
        level: GateLevel,
    },
    ScalarFn {
        inputs: Vec<Var>,
        local_grads: Vec<Vec<T>>,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
    fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.columns();
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * n];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + ci) * g.h * g.w..(b * g.c_in + ci + 1) * g.h * g.w];
                    let out = &mut dst[b * plane..(b + 1) * plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                out[oy * g.w_out + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.columns();
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + ci) * g.h * g.w..(b * g.c_in + ci + 1) * g.h * g.w];
                    let col = &src[b * plane..(b + 1) * plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += col[oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    fn requires_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn record(&mut self, shape: &[usize], values: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.requires_any(inputs);
        let tensor = Tensor::from_vec(shape, values)
            .expect("kernel produced consistent shape")
            .with_requires_grad(rg);
        self.push(tensor, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NfsError::shape("add", "shape", self.shape(a), self.shape(b)));
        }
        let values = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&shape, values, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NfsError::shape("mul", "shape", self.shape(a), self.shape(b)));
        }
        let values = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&shape, values, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let values = self.value(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, values, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        self.record(&[1], vec![total], Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(&shape, values, Op::Relu(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.tensor(v)).collect();
        let joined = Tensor::concat_rows(&tensors)?;
        let shape = joined.shape().to_vec();
        Ok(self.record(&shape, joined.into_values(), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// 2-D convolution of `input [B,C_in,H,W]` with `weight [C_out,C_in,k,k]`
    /// plus `bias [C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(NfsError::shape("conv2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(NfsError::shape("conv2d", "kernel (odd square)", "[C_out,C_in,k,k]", &ws));
        }
        if ws[1] != xs[1] {
            return Err(NfsError::shape("conv2d", "input channels", ws[1], xs[1]));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(NfsError::shape("conv2d", "bias", [ws[0]], self.shape(bias)));
        }
        if stride == 0 {
            return Err(NfsError::Config("conv2d stride must be positive".into()));
        }
        let k = ws[2];
        let h_span = xs[2] as isize + 2 * pad as isize - k as isize;
        let w_span = xs[3] as isize + 2 * pad as isize - k as isize;
        if h_span < 0 || w_span < 0 {
            return Err(NfsError::DegenerateOutput {
                op: "conv2d",
                height: h_span.div_euclid(stride as isize) + 1,
                width: w_span.div_euclid(stride as isize) + 1,
            });
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k,
            stride,
            pad,
            h_out: h_span as usize / stride + 1,
            w_out: w_span as usize / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let n = geom.columns();
        let kk = geom.patch();
        let mut tmp = vec![T::zero(); geom.c_out * n];
        T::gemm(
            geom.c_out,
            kk,
            n,
            T::one(),
            self.value(weight),
            (kk as isize, 1),
            &cols,
            (n as isize, 1),
            T::zero(),
            &mut tmp,
            (n as isize, 1),
        );
        let plane = geom.out_plane();
        let bias_v = self.value(bias);
        let mut out = vec![T::zero(); geom.batch * geom.c_out * plane];
        for b in 0..geom.batch {
            for co in 0..geom.c_out {
                let src = &tmp[co * n + b * plane..co * n + (b + 1) * plane];
                let dst = &mut out[(b * geom.c_out + co) * plane..(b * geom.c_out + co + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias_v[co];
                }
            }
        }
        let shape = [geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let keep_cols = if self.requires_grad(weight) { cols } else { Vec::new() };
        Ok(self.record(
            &shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep_cols,
            },
            &[input, weight, bias],
        ))
    }

    /// `input [B,D] · weight [D,K] + bias [K]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(NfsError::shape("affine", "rank", "[B,D]·[D,K]", (xs, ws)));
        }
        if xs[1] != ws[0] {
            return Err(NfsError::shape("affine", "inner dimension", ws[0], xs[1]));
        }
        if self.shape(bias) != [ws[1]] {
            return Err(NfsError::shape("affine", "bias", [ws[1]], self.shape(bias)));
        }
        let (b, d, k) = (xs[0], xs[1], ws[1]);
        let mut out: Vec<T> = (0..b).flat_map(|_| self.value(bias).iter().copied()).collect();
        T::gemm(
            b,
            d,
            k,
            T::one(),
            self.value(input),
            (d as isize, 1),
            self.value(weight),
            (k as isize, 1),
            T::one(),
            &mut out,
            (k as isize, 1),
        );
        Ok(self.record(&[b, k], out, Op::Affine { input, weight, bias }, &[input, weight, bias]))
    }

    /// Batch normalization over all axes except the channel axis 1.
    /// Returns the statistics used when running in train mode.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(NfsError::shape("batch_norm", "rank", ">= 2", xs.len()));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(NfsError::shape("batch_norm", "affine params", [channels], self.shape(gamma)));
        }
        let x = self.value(input);
        let count = batch * spatial;
        let eps = T::lit(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if batch < 2 {
                    return Err(NfsError::DegenerateBatch {
                        op: "batch_norm",
                        reason: format!("train mode needs at least 2 rows, got {batch}"),
                    });
                }
                let n = T::from_usize(count).expect("count fits");
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for c in 0..channels {
                    let mut s = T::zero();
                    for b in 0..batch {
                        let base = (b * channels + c) * spatial;
                        s += x[base..base + spatial].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let base = (b * channels + c) * spatial;
                        for &v in &x[base..base + spatial] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = sq / n;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(NfsError::shape("batch_norm", "running stats", channels, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                for i in base..base + spatial {
                    let h = (x[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + be[c];
                }
            }
        }
        let var_out = self.record(
            &xs,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        let stats = batch_stats.then_some(BatchStats { mean, var, count });
        Ok((var_out, stats))
    }

    /// Mean over spatial positions: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(NfsError::shape("global_avg_pool", "input rank", 4, xs.len()));
        }
        let plane = xs[2] * xs[3];
        let denom = T::from_usize(plane).expect("plane fits");
        let out = self
            .value(input)
            .chunks(plane)
            .map(|chunk| chunk.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.record(&[xs[0], xs[1]], out, Op::GlobalAvgPool(input), &[input]))
    }

    /// Binary gate whose forward value is `gate_values` and whose backward
    /// pass treats the binarization as identity with respect to
    /// `sigmoid(param)` (straight-through estimator).
    pub fn ste_gate(&mut self, param: Var, gate_values: Vec<T>) -> Result<Var> {
        let shape = self.shape(param).to_vec();
        if gate_values.len() != self.value(param).len() {
            return Err(NfsError::shape("ste_gate", "gate values", self.value(param).len(), gate_values.len()));
        }
        let sigmoid_slope = self
            .value(param)
            .iter()
            .map(|&p| {
                let s = sigmoid(p);
                s * (T::one() - s)
            })
            .collect();
        Ok(self.record(&shape, gate_values, Op::SteGate { param, sigmoid_slope }, &[param]))
    }

    /// Multiplies each row of `input [B,C,H,W]` by the gate of its modality.
    /// Channel gates have shape `[C]`, pixel gates `[C,H,W]`.
    pub fn gate_mask(&mut self, input: Var, gates: [Var; 2], rows: &[Modality], level: GateLevel) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(NfsError::shape("gate_mask", "input rank", 4, xs.len()));
        }
        if rows.len() != xs[0] {
            return Err(NfsError::shape("gate_mask", "modality tags", xs[0], rows.len()));
        }
        let expected: Vec<usize> = match level {
            GateLevel::Channel => vec![xs[1]],
            GateLevel::Pixel => xs[1..].to_vec(),
        };
        for gate in gates {
            if self.shape(gate) != expected.as_slice() {
                return Err(NfsError::shape("gate_mask", "gate", &expected, self.shape(gate)));
            }
        }
        let plane = xs[2] * xs[3];
        let row_len = xs[1] * plane;
        let x = self.value(input);
        let mut out = vec![T::zero(); x.len()];
        for (b, m) in rows.iter().enumerate() {
            let g = self.value(gates[m.index()]);
            let src = &x[b * row_len..(b + 1) * row_len];
            let dst = &mut out[b * row_len..(b + 1) * row_len];
            match level {
                GateLevel::Channel => {
                    for ((d, s), &gc) in dst.chunks_mut(plane).zip(src.chunks(plane)).zip(g) {
                        for (d, &s) in d.iter_mut().zip(s) {
                            *d = s * gc;
                        }
                    }
                }
                GateLevel::Pixel => {
                    for ((d, &s), &gi) in dst.iter_mut().zip(src).zip(g) {
                        *d = s * gi;
                    }
                }
            }
        }
        Ok(self.record(
            &xs,
            out,
            Op::GateMask {
                input,
                gates,
                rows: rows.to_vec(),
                level,
            },
            &[input, gates[0], gates[1]],
        ))
    }

    /// Records a scalar function of `inputs` whose local gradients were
    /// computed alongside its value.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, local_grads: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(NfsError::shape("scalar_fn", "gradient count", inputs.len(), local_grads.len()));
        }
        for (&v, g) in inputs.iter().zip(&local_grads) {
            if g.len() != self.value(v).len() {
                return Err(NfsError::shape("scalar_fn", "gradient length", self.value(v).len(), g.len()));
            }
        }
        Ok(self.record(
            &[1],
            vec![value],
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                local_grads,
            },
            inputs,
        ))
    }
}

impl<T: Scalar> Op<T> {
    pub(crate) fn backward(&self, nodes: &[Node<T>], out: &Tensor<T>, dy: &[T], scratch: &mut [Option<Vec<T>>]) {
        let val = |v: Var| nodes[v.0].tensor.values();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    accumulate(nodes, scratch, v, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(nodes, scratch, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * vb[i];
                    }
                });
                accumulate(nodes, scratch, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                accumulate(nodes, scratch, *a, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *s));
            }
            Op::Sum(a) => {
                accumulate(nodes, scratch, *a, |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(nodes, scratch, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let slice = &dy[offset..offset + len];
                    accumulate(nodes, scratch, p, |g| g.iter_mut().zip(slice).for_each(|(g, &d)| *g += d));
                    offset += len;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => conv_backward(nodes, scratch, dy, *input, *weight, *bias, geom, cols),
            Op::Affine { input, weight, bias } => {
                let xs = nodes[input.0].tensor.shape();
                let ws = nodes[weight.0].tensor.shape();
                let (b, d, k) = (xs[0], xs[1], ws[1]);
                let (x, w) = (val(*input), val(*weight));
                accumulate(nodes, scratch, *input, |g| {
                    T::gemm(b, k, d, T::one(), dy, (k as isize, 1), w, (1, k as isize), T::one(), g, (d as isize, 1));
                });
                accumulate(nodes, scratch, *weight, |g| {
                    T::gemm(d, b, k, T::one(), x, (1, d as isize), dy, (k as isize, 1), T::one(), g, (k as isize, 1));
                });
                accumulate(nodes, scratch, *bias, |g| {
                    for row in dy.chunks(k) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = out.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gam = val(*gamma);
                let mut sum_dy = vec![T::zero(); channels];
                let mut sum_dy_xhat = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        for i in base..base + spatial {
                            sum_dy[c] += dy[i];
                            sum_dy_xhat[c] += dy[i] * xhat[i];
                        }
                    }
                }
                accumulate(nodes, scratch, *gamma, |g| {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &d)| *g += d)
                });
                accumulate(nodes, scratch, *beta, |g| g.iter_mut().zip(&sum_dy).for_each(|(g, &d)| *g += d));
                let n = T::from_usize(batch * spatial).expect("count fits");
                accumulate(nodes, scratch, *input, |g| {
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * spatial;
                            let scale = gam[c] * inv_std[c];
                            for i in base..base + spatial {
                                g[i] += if *batch_stats {
                                    scale / n * (n * dy[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c])
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(input) => {
                let xs = nodes[input.0].tensor.shape();
                let plane = xs[2] * xs[3];
                let denom = T::from_usize(plane).expect("plane fits");
                accumulate(nodes, scratch, *input, |g| {
                    for (chunk, &d) in g.chunks_mut(plane).zip(dy) {
                        chunk.iter_mut().for_each(|g| *g += d / denom);
                    }
                });
            }
            Op::SteGate { param, sigmoid_slope } => {
                accumulate(nodes, scratch, *param, |g| {
                    let grad = ste_backward(dy, sigmoid_slope);
                    g.iter_mut().zip(grad).for_each(|(g, d)| *g += d);
                });
            }
            Op::GateMask {
                input,
                gates,
                rows,
                level,
            } => {
                let xs = out.shape();
                let plane = xs[2] * xs[3];
                let row_len = xs[1] * plane;
                let x = val(*input);
                accumulate(nodes, scratch, *input, |g| {
                    for (b, m) in rows.iter().enumerate() {
                        let gate = val(gates[m.index()]);
                        for i in 0..row_len {
                            let gv = match level {
                                GateLevel::Channel => gate[i / plane],
                                GateLevel::Pixel => gate[i],
                            };
                            g[b * row_len + i] += dy[b * row_len + i] * gv;
                        }
                    }
                });
                for m in Modality::ALL {
                    accumulate(nodes, scratch, gates[m.index()], |g| {
                        for (b, _) in rows.iter().enumerate().filter(|(_, r)| **r == m) {
                            for i in 0..row_len {
                                let contrib = dy[b * row_len + i] * x[b * row_len + i];
                                match level {
                                    GateLevel::Channel => g[i / plane] += contrib,
                                    GateLevel::Pixel => g[i] += contrib,
                                }
                            }
                        }
                    });
                }
            }
            Op::ScalarFn { inputs, local_grads } => {
                for (&v, lg) in inputs.iter().zip(local_grads) {
                    accumulate(nodes, scratch, v, |g| g.iter_mut().zip(lg).for_each(|(g, &l)| *g += dy[0] * l));
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    nodes: &[Node<T>],
    scratch: &mut [Option<Vec<T>>],
    dy: &[T],
    input: Var,
    weight: Var,
    bias: Var,
    geom: &ConvGeom,
    cols: &[T],
) {
    let n = geom.columns();
    let kk = geom.patch();
    let plane = geom.out_plane();
    // [B,C_out,plane] -> [C_out, B*plane]
    let mut dtmp = vec![T::zero(); geom.c_out * n];
    for b in 0..geom.batch {
        for co in 0..geom.c_out {
            let src = &dy[(b * geom.c_out + co) * plane..(b * geom.c_out + co + 1) * plane];
            dtmp[co * n + b * plane..co * n + (b + 1) * plane].copy_from_slice(src);
        }
    }
    accumulate(nodes, scratch, bias, |g| {
        for co in 0..geom.c_out {
            g[co] += dtmp[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
    });
    accumulate(nodes, scratch, weight, |g| {
        T::gemm(geom.c_out, n, kk, T::one(), &dtmp, (n as isize, 1), cols, (1, n as isize), T::one(), g, (kk as isize, 1));
    });
    if nodes[input.0].tensor.requires_grad() {
        let w = nodes[weight.0].tensor.values();
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(kk, geom.c_out, n, T::one(), w, (1, kk as isize), &dtmp, (n as isize, 1), T::zero(), &mut dcols, (n as isize, 1));
        accumulate(nodes, scratch, input, |g| col2im(&dcols, geom, g));
    }
}

/// Straight-through gradient for a sigmoid-parameterized binary gate:
/// the gradient with respect to the probability equals the gradient with
/// respect to the gate, then flows through the sigmoid slope.
pub fn ste_backward<T: Scalar>(grad_wrt_gate: &[T], sigmoid_slope: &[T]) -> Vec<T> {
    grad_wrt_gate.iter().zip(sigmoid_slope).map(|(&g, &s)| g * s).collect()
}

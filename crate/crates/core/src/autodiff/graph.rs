//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in evaluation order; `backward` walks
//! the tape once in reverse. Nodes only carry gradient bookkeeping when one
//! of their inputs does, so inference graphs built from constant leaves cost
//! no more than a plain forward pass.

use super::tensor::{plane_moments, Tensor};
use crate::error::{Error, Result};

/// Floor applied to a channel deviation wherever it is used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Public builder methods that record a differentiable node. `softmax` is
/// `masked_softmax` with a full mask.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "dense",
    "conv3x3",
    "relu",
    "avg_pool2",
    "global_avg_pool",
    "channel_mean",
    "channel_std",
    "channel_sub",
    "channel_mul",
    "channel_add",
    "floor",
    "recip",
    "softmax",
    "masked_softmax",
    "cross_entropy",
    "sum",
    "mean",
    "sum_rows",
    "cv_squared",
    "concat_cols",
    "mix",
];

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelStd {
        x: Var,
        mu: Vec<f64>,
    },
    ChannelSub(Var, Var),
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Floor(Var, f64),
    Recip(Var),
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    CvSquared(Var),
    Concat(Var, Var),
    Mix {
        weights: Var,
        experts: Vec<Option<Var>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `var`. Every leaf that requires
    /// a gradient has an entry, zero-filled when it does not reach the loss.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into the buffer of `tensor`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.wrt(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value at flat index {i}",
                op_name(&op)
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, factor), &[a])
    }

    /// `x[B, I] · w[I, O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, inp) = self.value(x).dims2()?;
        let (w_in, out) = self.value(w).dims2()?;
        if w_in != inp || self.shape(b) != [out] {
            return Err(Error::shape(format!(
                "dense: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(self.data(b));
        }
        gemm(
            rows,
            inp,
            out,
            self.data(x),
            (inp, 1),
            self.data(w),
            (out, 1),
            &mut y,
            (out, 1),
        );
        self.push(vec![rows, out], y, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// 3×3 convolution, unit stride, zero "same" padding.
    /// `x[B, Ci, H, W]`, `w[Co, Ci, 3, 3]`, `b[Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci || kh != 3 || kw != 3 || self.shape(b) != [co] {
            return Err(Error::shape(format!(
                "conv3x3: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let hw = h * wd;
        let n = bs * hw;
        let k = ci * 9;
        let cols = im2col(self.data(x), bs, ci, h, wd);
        let mut mat = vec![0.0; n * co];
        gemm(
            n,
            k,
            co,
            &cols,
            (k, 1),
            self.data(w),
            (1, k),
            &mut mat,
            (co, 1),
        );
        let bias = self.data(b);
        let mut out = vec![0.0; n * co];
        for bi in 0..bs {
            for p in 0..hw {
                let row = &mat[(bi * hw + p) * co..(bi * hw + p + 1) * co];
                for (c, v) in row.iter().enumerate() {
                    out[(bi * co + c) * hw + p] = v + bias[c];
                }
            }
        }
        let keep = if self.needs_grad(w) { cols } else { Vec::new() };
        self.push(
            vec![bs, co, h, wd],
            out,
            Op::Conv3x3 {
                x,
                w,
                b,
                cols: keep,
            },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), &[x])
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "avg_pool2 needs even spatial size, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; bs * c * oh * ow];
        for plane in 0..bs * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    o[i * ow + j] = 0.25 * (s[r0] + s[r0 + 1] + s[r0 + w] + s[r0 + w + 1]);
                }
            }
        }
        self.push(vec![bs, c, oh, ow], out, Op::AvgPool2(x), &[x])
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, _, _) = self.value(x).dims4()?;
        let mu = self.channel_means(x)?;
        self.push(vec![bs, c], mu, Op::GlobalAvgPool(x), &[x])
    }

    fn channel_means(&self, x: Var) -> Result<Vec<f64>> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape(
                "channel statistics need a non-empty spatial extent",
            ));
        }
        Ok(self
            .data(x)
            .chunks(hw)
            .take(bs * c)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect())
    }

    /// Per-channel spatial mean, `[B, C, H, W] -> [B, C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (bs, c, _, _) = self.value(x).dims4()?;
        let mu = self.channel_means(x)?;
        self.push(vec![bs, c], mu, Op::ChannelMean(x), &[x])
    }

    /// Per-channel population standard deviation, `[B, C, H, W] -> [B, C]`.
    pub fn channel_std(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape(
                "channel statistics need a non-empty spatial extent",
            ));
        }
        let (mu, sigma): (Vec<f64>, Vec<f64>) = self.data(x).chunks(hw).map(plane_moments).unzip();
        self.push(vec![bs, c], sigma, Op::ChannelStd { x, mu }, &[x])
    }

    fn channel_operands(&self, x: Var, v: Var, what: &str) -> Result<usize> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if self.shape(v) != [bs, c] {
            return Err(Error::shape(format!(
                "{what}: per-channel operand {:?} does not match feature map {:?}",
                self.shape(v),
                self.shape(x)
            )));
        }
        Ok(h * w)
    }

    fn channel_broadcast(
        &mut self,
        x: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        let hw = self.channel_operands(x, v, what)?;
        let vals = self.data(v);
        let data = self
            .data(x)
            .chunks(hw.max(1))
            .zip(vals)
            .flat_map(|(plane, &s)| plane.iter().map(move |&e| (e, s)))
            .map(|(e, s)| f(e, s))
            .collect();
        self.push(self.shape(x).to_vec(), data, op, &[x, v])
    }

    /// `x[b, c, :, :] - v[b, c]`.
    pub fn channel_sub(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, |e, s| e - s, Op::ChannelSub(x, v), "channel_sub")
    }

    /// `x[b, c, :, :] * v[b, c]`.
    pub fn channel_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, |e, s| e * s, Op::ChannelMul(x, v), "channel_mul")
    }

    /// `x[b, c, :, :] + v[b, c]`.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        self.channel_broadcast(x, v, |e, s| e + s, Op::ChannelAdd(x, v), "channel_add")
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(floor)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Floor(x, floor), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if let Some(i) = self.data(x).iter().position(|&v| v == 0.0) {
            return Err(Error::Numeric(format!("recip of zero at flat index {i}")));
        }
        let data = self.data(x).iter().map(|v| 1.0 / v).collect();
        self.push(self.shape(x).to_vec(), data, Op::Recip(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mask = vec![true; self.value(x).numel()];
        self.masked_softmax(x, &mask)
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true; masked-out entries are exactly zero. Every row needs at least
    /// one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax of a 0-axis tensor"))?;
        if n == 0 || mask.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "masked_softmax: mask of {} entries for shape {shape:?}",
                mask.len()
            )));
        }
        let mut out = vec![0.0; mask.len()];
        for ((row, m), o) in self
            .data(x)
            .chunks(n)
            .zip(mask.chunks(n))
            .zip(out.chunks_mut(n))
        {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(
                    "masked_softmax row with every entry masked".into(),
                ));
            }
            let mut total = 0.0;
            for ((v, &keep), slot) in row.iter().zip(m).zip(o.iter_mut()) {
                if keep {
                    *slot = (v - max).exp();
                    total += *slot;
                }
            }
            o.iter_mut().for_each(|s| *s /= total);
        }
        self.push(shape, out, Op::MaskedSoftmax(x), &[x])
    }

    /// Mean cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (bs, k) = self.value(logits).dims2()?;
        if labels.len() != bs || bs == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {bs} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; bs * k];
        let mut loss = 0.0;
        for (bi, row) in self.data(logits).chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[labels[bi]];
            for (j, v) in row.iter().enumerate() {
                probs[bi * k + j] = (v - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(vec![1], vec![loss / bs as f64], op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Column sums of a matrix, `[R, N] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = vec![0.0; n];
        for row in self.data(x).chunks(n.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        self.push(vec![n], out, Op::SumRows(x), &[x])
    }

    /// Squared coefficient of variation of a vector (population variance).
    /// Returns zero when the mean is zero.
    pub fn cv_squared(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 || self.shape(x)[0] == 0 {
            return Err(Error::shape(format!(
                "cv_squared of shape {:?}",
                self.shape(x)
            )));
        }
        let v = self.data(x);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let out = if mean == 0.0 {
            0.0
        } else {
            let var = v.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            var / (mean * mean)
        };
        self.push(vec![1], vec![out], Op::CvSquared(x), &[x])
    }

    /// Concatenates two matrices along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ra != rb {
            return Err(Error::shape(format!("concat_cols: {ra} vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        self.push(vec![ra, ca + cb], out, Op::Concat(a, b), &[a, b])
    }

    /// Per-sample convex mixture `y[b] = Σ_i weights[b, i] · experts[i][b]`.
    ///
    /// `experts[i]` may be `None` only if column `i` of `weights` is zero.
    pub fn mix(&mut self, weights: Var, experts: &[Option<Var>]) -> Result<Var> {
        let (bs, n) = self.value(weights).dims2()?;
        if experts.len() != n {
            return Err(Error::shape(format!(
                "mix: {} experts for {n} weights",
                experts.len()
            )));
        }
        let first = experts
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::Contract("mix with no evaluated expert".into()))?;
        let shape = self.shape(*first).to_vec();
        if shape.first() != Some(&bs) {
            return Err(Error::shape(format!(
                "mix: expert output {shape:?} for batch {bs}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let w = self.data(weights);
        let mut out = vec![0.0; bs * inner];
        for (i, e) in experts.iter().enumerate() {
            match e {
                Some(e) => {
                    if self.shape(*e) != shape.as_slice() {
                        return Err(Error::shape(format!(
                            "mix: expert {i} output {:?} differs from {shape:?}",
                            self.shape(*e)
                        )));
                    }
                    let ed = self.data(*e);
                    for b in 0..bs {
                        let wb = w[b * n + i];
                        if wb != 0.0 {
                            out[b * inner..(b + 1) * inner]
                                .iter_mut()
                                .zip(&ed[b * inner..(b + 1) * inner])
                                .for_each(|(o, v)| *o += wb * v);
                        }
                    }
                }
                None => {
                    if (0..bs).any(|b| w[b * n + i] != 0.0) {
                        return Err(Error::Contract(format!(
                            "mix: expert {i} skipped but carries weight"
                        )));
                    }
                }
            }
        }
        let mut inputs = vec![weights];
        inputs.extend(experts.iter().flatten().copied());
        let op = Op::Mix {
            weights,
            experts: experts.to_vec(),
        };
        self.push(shape, out, op, &inputs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((s, g), y)| *s += g * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((s, g), x)| *s += g * x)
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f)
                });
            }
            Op::Dense { x, w, b } => {
                let (rows, inp) = self.value(*x).dims2().expect("checked in forward");
                let out = self.shape(*b)[0];
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc(*x, &mut |s| {
                    gemm(rows, out, inp, g, (out, 1), wv, (1, out), s, (inp, 1))
                });
                acc(*w, &mut |s| {
                    gemm(inp, rows, out, xv, (1, inp), g, (out, 1), s, (out, 1))
                });
                acc(*b, &mut |s| {
                    for row in g.chunks(out) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let (bs, ci, h, wd) = self.value(*x).dims4().expect("checked in forward");
                let co = self.shape(*b)[0];
                let hw = h * wd;
                let n = bs * hw;
                let k = ci * 9;
                // Output gradient as an [N, Co] matrix.
                let mut dmat = vec![0.0; n * co];
                for bi in 0..bs {
                    for c in 0..co {
                        let plane = &g[(bi * co + c) * hw..(bi * co + c + 1) * hw];
                        for (p, v) in plane.iter().enumerate() {
                            dmat[(bi * hw + p) * co + c] = *v;
                        }
                    }
                }
                acc(*w, &mut |s| {
                    gemm(co, n, k, &dmat, (1, co), cols, (k, 1), s, (k, 1))
                });
                acc(*b, &mut |s| {
                    for row in dmat.chunks(co) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
                let wv = self.data(*w);
                acc(*x, &mut |s| {
                    let mut dcols = vec![0.0; n * k];
                    gemm(n, co, k, &dmat, (co, 1), wv, (k, 1), &mut dcols, (k, 1));
                    col2im_add(&dcols, s, bs, ci, h, wd);
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(y).for_each(|((s, g), y)| {
                        if *y > 0.0 {
                            *s += g
                        }
                    })
                });
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("checked in forward");
                let (oh, ow) = (h / 2, w / 2);
                acc(*x, &mut |s| {
                    for (plane, gp) in s.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for i in 0..oh {
                            for j in 0..ow {
                                let q = 0.25 * gp[i * ow + j];
                                let r0 = 2 * i * w + 2 * j;
                                plane[r0] += q;
                                plane[r0 + 1] += q;
                                plane[r0 + w] += q;
                                plane[r0 + w + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) | Op::ChannelMean(x) => {
                let (_, _, h, w) = self.value(*x).dims4().expect("checked in forward");
                let hw = h * w;
                acc(*x, &mut |s| {
                    for (plane, gv) in s.chunks_mut(hw).zip(g) {
                        let q = gv / hw as f64;
                        plane.iter_mut().for_each(|e| *e += q);
                    }
                });
            }
            Op::ChannelStd { x, mu } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("checked in forward");
                let hw = h * w;
                let sigma = node.value.data();
                let xv = self.data(*x);
                acc(*x, &mut |s| {
                    for (p, (plane, xp)) in s.chunks_mut(hw).zip(xv.chunks(hw)).enumerate() {
                        let q = g[p] / (hw as f64 * sigma[p].max(SIGMA_FLOOR));
                        plane
                            .iter_mut()
                            .zip(xp)
                            .for_each(|(e, xe)| *e += q * (xe - mu[p]));
                    }
                });
            }
            Op::ChannelSub(x, v) | Op::ChannelAdd(x, v) => {
                let hw = self
                    .channel_operands(*x, *v, "")
                    .expect("checked in forward");
                let sign = if matches!(node.op, Op::ChannelSub(..)) {
                    -1.0
                } else {
                    1.0
                };
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*v, &mut |s| {
                    for (sv, gp) in s.iter_mut().zip(g.chunks(hw.max(1))) {
                        *sv += sign * gp.iter().sum::<f64>();
                    }
                });
            }
            Op::ChannelMul(x, v) => {
                let hw = self
                    .channel_operands(*x, *v, "")
                    .expect("checked in forward");
                let (xv, vv) = (self.data(*x), self.data(*v));
                acc(*x, &mut |s| {
                    for ((sp, gp), f) in s.chunks_mut(hw.max(1)).zip(g.chunks(hw.max(1))).zip(vv) {
                        sp.iter_mut().zip(gp).for_each(|(s, g)| *s += g * f);
                    }
                });
                acc(*v, &mut |s| {
                    for ((sv, gp), xp) in s
                        .iter_mut()
                        .zip(g.chunks(hw.max(1)))
                        .zip(xv.chunks(hw.max(1)))
                    {
                        *sv += gp.iter().zip(xp).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            Op::Floor(x, f) => {
                let xv = self.data(*x);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(g).zip(xv).for_each(|((s, g), x)| {
                        if x > f {
                            *s += g
                        }
                    })
                });
            }
            Op::Recip(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(y)
                        .for_each(|((s, g), y)| *s -= g * y * y)
                });
            }
            Op::MaskedSoftmax(x) => {
                let n = *node.value.shape().last().expect("checked in forward");
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        sr.iter_mut()
                            .zip(gr)
                            .zip(yr)
                            .for_each(|((s, g), y)| *s += y * (g - dot));
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let bs = labels.len();
                let k = probs.len() / bs;
                let q = g[0] / bs as f64;
                acc(*logits, &mut |s| {
                    for (bi, (sr, pr)) in s.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (sv, p)) in sr.iter_mut().zip(pr).enumerate() {
                            let target = if j == labels[bi] { 1.0 } else { 0.0 };
                            *sv += q * (p - target);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|e| *e += g[0])),
            Op::Mean(x) => {
                let q = g[0] / self.value(*x).numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|e| *e += q));
            }
            Op::SumRows(x) => {
                let n = g.len();
                acc(*x, &mut |s| {
                    for row in s.chunks_mut(n.max(1)) {
                        row.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::CvSquared(x) => {
                let v = self.data(*x);
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                if mean != 0.0 {
                    let var = v.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
                    let m2 = mean * mean;
                    acc(*x, &mut |s| {
                        for (sv, e) in s.iter_mut().zip(v) {
                            let dvar = 2.0 * (e - mean) / n;
                            let dmean = 1.0 / n;
                            *sv += g[0] * (dvar / m2 - 2.0 * var / (m2 * mean) * dmean);
                        }
                    });
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                acc(*a, &mut |s| {
                    for (sr, gr) in s.chunks_mut(ca.max(1)).zip(g.chunks(ca + cb)) {
                        sr.iter_mut().zip(&gr[..ca]).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*b, &mut |s| {
                    for (sr, gr) in s.chunks_mut(cb.max(1)).zip(g.chunks(ca + cb)) {
                        sr.iter_mut().zip(&gr[ca..]).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Mix { weights, experts } => {
                let (bs, n) = self.value(*weights).dims2().expect("checked in forward");
                let inner = g.len() / bs;
                let w = self.data(*weights);
                for (i, e) in experts.iter().enumerate() {
                    let Some(e) = e else { continue };
                    let ed = self.data(*e);
                    acc(*e, &mut |s| {
                        for b in 0..bs {
                            let wb = w[b * n + i];
                            if wb != 0.0 {
                                s[b * inner..(b + 1) * inner]
                                    .iter_mut()
                                    .zip(&g[b * inner..(b + 1) * inner])
                                    .for_each(|(s, g)| *s += wb * g);
                            }
                        }
                    });
                    acc(*weights, &mut |s| {
                        for b in 0..bs {
                            s[b * n + i] += g[b * inner..(b + 1) * inner]
                                .iter()
                                .zip(&ed[b * inner..(b + 1) * inner])
                                .map(|(g, e)| g * e)
                                .sum::<f64>();
                        }
                    });
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Dense { .. } => "dense",
        Op::Conv3x3 { .. } => "conv3x3",
        Op::Relu(_) => "relu",
        Op::AvgPool2(_) => "avg_pool2",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::ChannelMean(_) => "channel_mean",
        Op::ChannelStd { .. } => "channel_std",
        Op::ChannelSub(..) => "channel_sub",
        Op::ChannelMul(..) => "channel_mul",
        Op::ChannelAdd(..) => "channel_add",
        Op::Floor(..) => "floor",
        Op::Recip(_) => "recip",
        Op::MaskedSoftmax(_) => "masked_softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumRows(_) => "sum_rows",
        Op::CvSquared(_) => "cv_squared",
        Op::Concat(..) => "concat_cols",
        Op::Mix { .. } => "mix",
    }
}

/// Rows are output pixels `(b, h, w)`; columns are taps `(ci, kh, kw)`.
fn im2col(x: &[f64], bs: usize, ci: usize, h: usize, w: usize) -> Vec<f64> {
    let k = ci * 9;
    let mut cols = vec![0.0; bs * h * w * k];
    for b in 0..bs {
        for c in 0..ci {
            let plane = &x[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
            for kh in 0..3 {
                for kw in 0..3 {
                    let col = c * 9 + kh * 3 + kw;
                    for i in 0..h {
                        let si = i as isize + kh as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + kw as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            cols[((b * h + i) * w + j) * k + col] =
                                plane[si as usize * w + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], bs: usize, ci: usize, h: usize, w: usize) {
    let k = ci * 9;
    for b in 0..bs {
        for c in 0..ci {
            let plane = &mut dx[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
            for kh in 0..3 {
                for kw in 0..3 {
                    let col = c * 9 + kh * 3 + kw;
                    for i in 0..h {
                        let si = i as isize + kh as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + kw as isize - 1;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            plane[si as usize * w + sj as usize] +=
                                cols[((b * h + i) * w + j) * k + col];
                        }
                    }
                }
            }
        }
    }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, MatRef};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

enum Op {
    Leaf,
    Const,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Dense { x: usize, w: usize, batch: usize, inp: usize, out: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeometry },
    BiasAdd { x: usize, b: usize },
    ChannelScale { x: usize, s: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    AddScalar { x: usize },
    Abs { x: usize },
    /// Identity gradient where `pass` is set, zero elsewhere (ReLU, clamp, STE).
    PassThrough { x: usize, pass: Vec<bool> },
    Reshape { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    LogSumExp { x: usize, classes: usize },
    SoftmaxCrossEntropy { x: usize, labels: Vec<usize>, classes: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Single-threaded record of primitive operations for reverse-mode
/// differentiation.
///
/// Values created with [`Tape::leaf`] are differentiable; values created with
/// [`Tape::constant`] are not. A result is tracked when any input is tracked,
/// and untracked subgraphs are skipped entirely during [`Tape::backward`].
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.leaves.push(v.index);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Value of `v`.
    ///
    /// # Panics
    /// If `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.index].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.index].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn node(&self, v: Var, op: &'static str) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar(op));
        }
        Ok(v.index)
    }

    fn tracked(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].tracked)
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data_of(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    /// Matrix product of `[m, k]` and `[k, n]` (or `[k]`, giving `[m]`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.node(a, "matmul")?, self.node(b, "matmul")?);
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa.len() != 2 || !(sb.len() == 1 || sb.len() == 2) || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.data_of(a), m, k),
            MatRef::new(self.data_of(b), k, n),
            0.0,
            &mut out,
        );
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// Fully connected map `x W^T` for `x: [batch, in]` (or `[in]`) and
    /// `W: [out, in]`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let (x, w) = (self.node(x, "dense")?, self.node(w, "dense")?);
        let (sx, sw) = (self.shape_of(x).to_vec(), self.shape_of(w).to_vec());
        let (batch, inp) = match sx.as_slice() {
            [i] => (1, *i),
            [b, i] => (*b, *i),
            _ => return Err(shape_err("dense", format!("input must be rank 1 or 2, got {sx:?}"))),
        };
        if sw.len() != 2 || sw[1] != inp {
            return Err(shape_err("dense", format!("weight {sw:?} does not accept input {sx:?}")));
        }
        let out = sw[0];
        let y = kernels::dense_forward(self.data_of(x), self.data_of(w), batch, inp, out);
        let shape = if sx.len() == 1 { vec![out] } else { vec![batch, out] };
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Dense { x, w, batch, inp, out },
            tracked,
        ))
    }

    /// Direct 2-D convolution of `x: [batch, in_ch, h, w]` with
    /// `w: [out_ch, in_ch, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w) = (self.node(x, "conv2d")?, self.node(w, "conv2d")?);
        let geom = conv_geometry(self.shape_of(x), self.shape_of(w), stride, padding)?;
        let y = kernels::conv2d_forward(self.data_of(x), self.data_of(w), &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_height(), geom.out_width()];
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv2d { x, w, geom }, tracked))
    }

    /// Adds `b: [channels]` along the channel axis of `x` (axis 1, or axis 0
    /// for rank-1 `x`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (x, b) = (self.node(x, "bias_add")?, self.node(b, "bias_add")?);
        let (outer, ch, inner) = self.channel_check("bias_add", x, b)?;
        let bv = self.data_of(b);
        let mut y = self.data_of(x).to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let start = (o * ch + c) * inner;
                y[start..start + inner].iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let shape = self.shape_of(x).to_vec();
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(Tensor::new(shape, y)?, Op::BiasAdd { x, b }, tracked))
    }

    /// Multiplies `x` by `s: [channels]` along the channel axis.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (x, s) = (self.node(x, "channel_scale")?, self.node(s, "channel_scale")?);
        let (outer, ch, inner) = self.channel_check("channel_scale", x, s)?;
        let sv = self.data_of(s);
        let mut y = self.data_of(x).to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let start = (o * ch + c) * inner;
                y[start..start + inner].iter_mut().for_each(|v| *v *= sv[c]);
            }
        }
        let shape = self.shape_of(x).to_vec();
        let tracked = self.tracked(&[x, s]);
        Ok(self.push(Tensor::new(shape, y)?, Op::ChannelScale { x, s }, tracked))
    }

    fn channel_check(&self, op: &'static str, x: usize, c: usize) -> Result<(usize, usize, usize)> {
        let layout = kernels::channel_layout(self.shape_of(x));
        let sc = self.shape_of(c);
        if sc.len() != 1 || sc[0] != layout.1 {
            return Err(shape_err(
                op,
                format!("per-channel operand {sc:?} does not match input {:?}", self.shape_of(x)),
            ));
        }
        Ok(layout)
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (a, b) = (self.node(a, op)?, self.node(b, op)?);
        if self.shape_of(a) != self.shape_of(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, f)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, make(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let x = self.node(x, "scale")?;
        let value = self.nodes[x].value.map(|v| v * factor);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Scale { x, factor }, tracked))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let x = self.node(x, "add_scalar")?;
        let value = self.nodes[x].value.map(|v| v + c);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::AddScalar { x }, tracked))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x, "abs")?;
        let value = self.nodes[x].value.map(f64::abs);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Abs { x }, tracked))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.node(x, "relu")?;
        let src = self.data_of(xi);
        let pass: Vec<bool> = src.iter().map(|&v| v > 0.0).collect();
        let data = src.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape_of(xi).to_vec();
        self.straight_through(x, Tensor::new(shape, data)?, pass)
    }

    /// Clamp into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xi = self.node(x, "clamp")?;
        let src = self.data_of(xi);
        let pass = src.iter().map(|&v| v >= lo && v <= hi).collect();
        let data = src.iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = self.shape_of(xi).to_vec();
        self.straight_through(x, Tensor::new(shape, data)?, pass)
    }

    /// Elementwise clamp into `[lo[i], hi[i]]`.
    pub fn clamp_elementwise(&mut self, x: Var, lo: &Tensor, hi: &Tensor) -> Result<Var> {
        let xi = self.node(x, "clamp_elementwise")?;
        let shape = self.shape_of(xi).to_vec();
        if lo.shape() != shape.as_slice() || hi.shape() != shape.as_slice() {
            return Err(shape_err(
                "clamp_elementwise",
                format!("bounds {:?}/{:?} vs input {shape:?}", lo.shape(), hi.shape()),
            ));
        }
        let src = self.data_of(xi);
        let mut pass = Vec::with_capacity(src.len());
        let mut data = Vec::with_capacity(src.len());
        for ((&v, &l), &h) in src.iter().zip(lo.data()).zip(hi.data()) {
            pass.push(v >= l && v <= h);
            data.push(v.max(l).min(h));
        }
        self.straight_through(x, Tensor::new(shape, data)?, pass)
    }

    /// Records a custom elementwise map whose forward value is `value` and
    /// whose derivative is 1 where `pass` is set and 0 elsewhere.
    pub fn straight_through(&mut self, x: Var, value: Tensor, pass: Vec<bool>) -> Result<Var> {
        let x = self.node(x, "straight_through")?;
        if value.shape() != self.shape_of(x) || pass.len() != value.len() {
            return Err(shape_err(
                "straight_through",
                format!("value {:?} vs input {:?}", value.shape(), self.shape_of(x)),
            ));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::PassThrough { x, pass }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let x = self.node(x, "reshape")?;
        let value = self.nodes[x].value.clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x, "sum")?;
        let s = self.data_of(x).iter().sum();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x, "mean")?;
        let d = self.data_of(x);
        if d.is_empty() {
            return Err(shape_err("mean", "mean of an empty tensor"));
        }
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean { x }, tracked))
    }

    fn rows_of(&self, op: &'static str, x: usize) -> Result<(usize, usize, Vec<usize>)> {
        match self.shape_of(x) {
            [c] if *c > 0 => Ok((1, *c, vec![])),
            [b, c] if *c > 0 => Ok((*b, *c, vec![*b])),
            s => Err(shape_err(op, format!("expected [classes] or [batch, classes], got {s:?}"))),
        }
    }

    /// `ln(sum(exp(.)))` over the last axis.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let x = self.node(x, "log_sum_exp")?;
        let (rows, classes, shape) = self.rows_of("log_sum_exp", x)?;
        let d = self.data_of(x);
        let out = (0..rows)
            .map(|r| kernels::log_sum_exp(&d[r * classes..(r + 1) * classes]))
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExp { x, classes }, tracked))
    }

    /// Per-row `logsumexp(z) - z[label]`: `[batch, classes]` logits give a
    /// `[batch]` loss vector, `[classes]` logits give a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.node(logits, "softmax_cross_entropy")?;
        let (rows, classes, shape) = self.rows_of("softmax_cross_entropy", x)?;
        if labels.len() != rows {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{rows} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        let d = self.data_of(x);
        let out = (0..rows)
            .map(|r| {
                let row = &d[r * classes..(r + 1) * classes];
                kernels::log_sum_exp(row) - row[labels[r]]
            })
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxCrossEntropy {
                x,
                labels: labels.to_vec(),
                classes,
            },
            tracked,
        ))
    }

    /// Gradient of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.node(output, "backward")?;
        let shape = self.shape_of(out);
        if !self.nodes[out].value.is_scalar() {
            return Err(Error::NonScalarOutput(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=out).map(|_| None).collect();
        adj[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        let grads = self
            .leaves
            .iter()
            .filter(|&&l| l <= out)
            .map(|&l| {
                let shape = self.shape_of(l).to_vec();
                let data = adj[l].take().unwrap_or_else(|| vec![0.0; self.nodes[l].value.len()]);
                (l, Tensor { shape, data })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let live = |j: usize| self.nodes[j].tracked;
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            &Op::MatMul { a, b, m, k, n } => {
                if live(a) {
                    kernels::gemm(
                        MatRef::new(g, m, n),
                        MatRef::transpose_of(self.data_of(b), n, k),
                        1.0,
                        slot(adj, a, m * k),
                    );
                }
                if live(b) {
                    kernels::gemm(
                        MatRef::transpose_of(self.data_of(a), k, m),
                        MatRef::new(g, m, n),
                        1.0,
                        slot(adj, b, k * n),
                    );
                }
            }
            &Op::Dense { x, w, batch, inp, out } => {
                if live(x) {
                    kernels::dense_backward_input(
                        g,
                        self.data_of(w),
                        batch,
                        inp,
                        out,
                        slot(adj, x, batch * inp),
                    );
                }
                if live(w) {
                    kernels::dense_backward_weight(
                        g,
                        self.data_of(x),
                        batch,
                        inp,
                        out,
                        slot(adj, w, out * inp),
                    );
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.data_of(x), self.data_of(w));
                match (live(x), live(w)) {
                    (true, true) => {
                        let mut dw = vec![0.0; geom.weight_len()];
                        kernels::conv2d_backward(
                            xv,
                            wv,
                            g,
                            &geom,
                            Some(slot(adj, x, geom.input_len())),
                            Some(&mut dw),
                        );
                        add_into(slot(adj, w, geom.weight_len()), &dw);
                    }
                    (true, false) => kernels::conv2d_backward(
                        xv,
                        wv,
                        g,
                        &geom,
                        Some(slot(adj, x, geom.input_len())),
                        None,
                    ),
                    (false, true) => kernels::conv2d_backward(
                        xv,
                        wv,
                        g,
                        &geom,
                        None,
                        Some(slot(adj, w, geom.weight_len())),
                    ),
                    (false, false) => {}
                }
            }
            &Op::BiasAdd { x, b } => {
                if live(x) {
                    add_into(slot(adj, x, g.len()), g);
                }
                if live(b) {
                    let (outer, ch, inner) = kernels::channel_layout(self.shape_of(x));
                    let db = slot(adj, b, ch);
                    for o in 0..outer {
                        for c in 0..ch {
                            let start = (o * ch + c) * inner;
                            db[c] += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::ChannelScale { x, s } => {
                let (outer, ch, inner) = kernels::channel_layout(self.shape_of(x));
                if live(x) {
                    let sv = self.data_of(s);
                    let dx = slot(adj, x, g.len());
                    for o in 0..outer {
                        for c in 0..ch {
                            let start = (o * ch + c) * inner;
                            for j in start..start + inner {
                                dx[j] += g[j] * sv[c];
                            }
                        }
                    }
                }
                if live(s) {
                    let xv = self.data_of(x);
                    let ds = slot(adj, s, ch);
                    for o in 0..outer {
                        for c in 0..ch {
                            let start = (o * ch + c) * inner;
                            ds[c] += (start..start + inner).map(|j| g[j] * xv[j]).sum::<f64>();
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if live(a) {
                    add_into(slot(adj, a, g.len()), g);
                }
                if live(b) {
                    add_into(slot(adj, b, g.len()), g);
                }
            }
            &Op::Sub { a, b } => {
                if live(a) {
                    add_into(slot(adj, a, g.len()), g);
                }
                if live(b) {
                    slot(adj, b, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Mul { a, b } => {
                if live(a) {
                    let bv = self.data_of(b);
                    let da = slot(adj, a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if live(b) {
                    let av = self.data_of(a);
                    let db = slot(adj, b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale { x, factor } => {
                slot(adj, x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += factor * v);
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => add_into(slot(adj, x, g.len()), g),
            &Op::Abs { x } => {
                let xv = self.data_of(x);
                let dx = slot(adj, x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        dx[j] += g[j];
                    } else if xv[j] < 0.0 {
                        dx[j] -= g[j];
                    }
                }
            }
            Op::PassThrough { x, pass } => {
                let dx = slot(adj, *x, g.len());
                for j in 0..g.len() {
                    if pass[j] {
                        dx[j] += g[j];
                    }
                }
            }
            &Op::Sum { x } => {
                let n = self.nodes[x].value.len();
                slot(adj, x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean { x } => {
                let n = self.nodes[x].value.len();
                let share = g[0] / n as f64;
                slot(adj, x, n).iter_mut().for_each(|d| *d += share);
            }
            &Op::LogSumExp { x, classes } => {
                let xv = self.data_of(x);
                let dx = slot(adj, x, xv.len());
                let mut p = vec![0.0; classes];
                for (r, &gr) in g.iter().enumerate() {
                    let row = &xv[r * classes..(r + 1) * classes];
                    kernels::softmax_into(row, &mut p);
                    for c in 0..classes {
                        dx[r * classes + c] += gr * p[c];
                    }
                }
            }
            Op::SoftmaxCrossEntropy { x, labels, classes } => {
                let classes = *classes;
                let xv = self.data_of(*x);
                let dx = slot(adj, *x, xv.len());
                let mut p = vec![0.0; classes];
                for (r, &gr) in g.iter().enumerate() {
                    let row = &xv[r * classes..(r + 1) * classes];
                    kernels::softmax_into(row, &mut p);
                    p[labels[r]] -= 1.0;
                    for c in 0..classes {
                        dx[r * classes + c] += gr * p[c];
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn conv_geometry(
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (&[batch, in_ch, height, width], &[out_ch, w_in, kernel_h, kernel_w]) = (x, w) else {
        return Err(shape_err(
            "conv2d",
            format!("expected [b, c, h, w] input and [o, c, kh, kw] weight, got {x:?} and {w:?}"),
        ));
    };
    if w_in != in_ch {
        return Err(shape_err(
            "conv2d",
            format!("input has {in_ch} channels but weight expects {w_in}"),
        ));
    }
    if stride == 0 || height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kernel_h}x{kernel_w} (stride {stride}, padding {padding}) does not fit {height}x{width}"),
        ));
    }
    Ok(ConvGeometry {
        batch,
        in_ch,
        height,
        width,
        out_ch,
        kernel_h,
        kernel_w,
        stride,
        padding,
    })
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; `None` for constants, intermediates, foreign
    /// variables and leaves created after the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index)
    }
}

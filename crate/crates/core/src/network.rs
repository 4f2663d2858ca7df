//! Layer specifications, the flat parameter store θ, and forward passes.
//!
//! A [`Network`] owns its parameters as one tensor per (layer, role). The
//! concatenation of those tensors in layer order is the flat vector θ, and
//! every scalar is addressable through a [`ParamId`].
//!
//! Two forward paths exist: [`Network::forward`] evaluates directly with the
//! shared kernels, and [`Network::forward_on`] records the same computation
//! on a [`Tape`] against a [`BoundParams`] binding.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inp: usize,
        out: usize,
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    Flatten,
    BatchNorm {
        features: usize,
    },
}

impl LayerSpec {
    /// Shape of one sample after this layer.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inp, out, .. } => {
                if input != [inp] {
                    return Err(format!("expects input [{inp}]"));
                }
                Ok(vec![out])
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = input else {
                    return Err(format!("expects [{in_ch}, h, w] input"));
                };
                if c != in_ch {
                    return Err(format!("expects {in_ch} input channels"));
                }
                if stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!("kernel {kernel} does not fit {h}x{w}"));
                }
                Ok(vec![
                    out_ch,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNorm { features } => {
                if input.first() != Some(&features) || !(input.len() == 1 || input.len() == 3) {
                    return Err(format!("expects {features} features or channels"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// `(role, shape, fan_in)` of every parameter tensor this layer owns.
    fn param_shapes(&self) -> Vec<(ParamRole, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense { inp, out, bias } => {
                let mut v = vec![(ParamRole::Weight, vec![out, inp], inp)];
                if bias {
                    v.push((ParamRole::Bias, vec![out], inp));
                }
                v
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                let mut v = vec![(ParamRole::Weight, vec![out_ch, in_ch, kernel, kernel], fan_in)];
                if bias {
                    v.push((ParamRole::Bias, vec![out_ch], fan_in));
                }
                v
            }
            LayerSpec::BatchNorm { features } => vec![
                (ParamRole::BnGamma, vec![features], features),
                (ParamRole::BnBeta, vec![features], features),
            ],
            LayerSpec::Relu | LayerSpec::Flatten => Vec::new(),
        }
    }

    /// Dense and convolutional layers carry weights that can be pruned.
    pub fn is_affine(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |bias: bool| if bias { "bias" } else { "nobias" };
        match *self {
            LayerSpec::Dense { inp, out, bias } => write!(f, "dense {inp} {out} {}", b(bias)),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                bias,
            } => write!(
                f,
                "conv2d {in_ch} {out_ch} {kernel} {stride} {padding} {}",
                b(bias)
            ),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::BatchNorm { features } => write!(f, "batchnorm {features}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Network(format!("cannot parse layer `{s}`"));
        let toks: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            toks.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad)
        };
        let bias = |i: usize| -> Result<bool> {
            match toks.get(i) {
                Some(&"bias") => Ok(true),
                Some(&"nobias") => Ok(false),
                _ => Err(bad()),
            }
        };
        let (layer, arity) = match toks.first() {
            Some(&"dense") => (
                LayerSpec::Dense {
                    inp: num(1)?,
                    out: num(2)?,
                    bias: bias(3)?,
                },
                4,
            ),
            Some(&"conv2d") => (
                LayerSpec::Conv2d {
                    in_ch: num(1)?,
                    out_ch: num(2)?,
                    kernel: num(3)?,
                    stride: num(4)?,
                    padding: num(5)?,
                    bias: bias(6)?,
                },
                7,
            ),
            Some(&"relu") => (LayerSpec::Relu, 1),
            Some(&"flatten") => (LayerSpec::Flatten, 1),
            Some(&"batchnorm") => (LayerSpec::BatchNorm { features: num(1)? }, 2),
            _ => return Err(bad()),
        };
        if toks.len() != arity {
            return Err(bad());
        }
        Ok(layer)
    }
}

/// Input shape plus the ordered layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    /// Dense layers of the given widths with ReLU between them.
    pub fn mlp(widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LayerSpec::Dense {
                inp: pair[0],
                out: pair[1],
                bias: true,
            });
            if i + 2 < widths.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        Self::new(vec![widths[0]], layers)
    }

    /// Two strided convolutions and a classifier: a small conv net for
    /// `channels x size x size` images.
    pub fn conv_small(channels: usize, size: usize, classes: usize) -> Self {
        let s1 = (size + 2 - 4) / 2 + 1;
        let s2 = (s1 + 2 - 4) / 2 + 1;
        Self::new(
            vec![channels, size, size],
            vec![
                LayerSpec::Conv2d {
                    in_ch: channels,
                    out_ch: 8,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_ch: 8,
                    out_ch: 16,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inp: 16 * s2 * s2,
                    out: classes,
                    bias: true,
                },
            ],
        )
    }

    /// Five 3x3 convolutions (64, 64, 128, 128, 128 filters; strides
    /// 1, 1, 2, 1, 1), a 512-unit dense layer and the classifier, with batch
    /// norm and ReLU after every layer but the last.
    pub fn cnn7(channels: usize, size: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = channels;
        let mut side = size;
        for (out_ch, stride) in [(64, 1), (64, 1), (128, 2), (128, 1), (128, 1)] {
            layers.push(LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel: 3,
                stride,
                padding: 1,
                bias: true,
            });
            layers.push(LayerSpec::BatchNorm { features: out_ch });
            layers.push(LayerSpec::Relu);
            in_ch = out_ch;
            side = (side + 2 - 3) / stride + 1;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            inp: in_ch * side * side,
            out: 512,
            bias: true,
        });
        layers.push(LayerSpec::BatchNorm { features: 512 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dense {
            inp: 512,
            out: classes,
            bias: true,
        });
        Self::new(vec![channels, size, size], layers)
    }

    /// Per-layer output shapes; fails on the first incompatible pair.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|why| {
                let prev = match i {
                    0 => "the input".to_string(),
                    _ => format!("layer {} ({}) producing {shape:?}", i - 1, self.layers[i - 1]),
                };
                Error::Network(format!("layer {i} ({layer}) {why}, but follows {prev}"))
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_classes(&self) -> Result<usize> {
        match self.shapes()?.last() {
            Some(s) if s.len() == 1 => Ok(s[0]),
            Some(s) => Err(Error::Network(format!("network ends with non-vector shape {s:?}"))),
            None => Err(Error::Network("network has no layers".into())),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input")?;
        for d in &self.input_shape {
            write!(f, " {d}")?;
        }
        for layer in &self.layers {
            write!(f, "\n{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Network("empty architecture".into()))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some("input") {
            return Err(Error::Network(format!("expected `input ...`, got `{header}`")));
        }
        let input_shape = toks
            .map(|t| t.parse().map_err(|_| Error::Network(format!("bad input extent `{t}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(input_shape, layers))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamRole {
    pub const ALL: [ParamRole; 4] = [
        ParamRole::Weight,
        ParamRole::Bias,
        ParamRole::BnGamma,
        ParamRole::BnBeta,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Address of one scalar of θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub layer: usize,
    pub role: ParamRole,
    pub value: Tensor,
}

/// Running (or frozen batch) statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn fresh(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// Per-channel `(scale, shift)` of the normalization alone.
    fn inv_std(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug)]
pub enum BnUse<'a> {
    Running,
    /// Frozen per-layer statistics (indexed by layer), e.g. of the clean batch.
    Frozen(&'a [Option<BnStats>]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<ParamTensor>,
    offsets: Vec<usize>,
    slots: Vec<[Option<usize>; 4]>,
    bn: Vec<Option<BnStats>>,
    mode: Mode,
}

impl Network {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases,
    /// unit batch-norm scale; fully determined by `seed`.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::with_capacity(arch.layers.len());
        for (layer, spec) in arch.layers.iter().enumerate() {
            for (role, shape, fan_in) in spec.param_shapes() {
                let n: usize = shape.iter().product();
                let data = match role {
                    ParamRole::Weight => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    ParamRole::BnGamma => vec![1.0; n],
                    ParamRole::Bias | ParamRole::BnBeta => vec![0.0; n],
                };
                params.push(ParamTensor {
                    layer,
                    role,
                    value: Tensor::new(shape, data)?,
                });
            }
            bn.push(match spec {
                LayerSpec::BatchNorm { features } => Some(BnStats::fresh(*features)),
                _ => None,
            });
        }
        Ok(Self::assemble(arch, params, bn))
    }

    fn assemble(arch: Architecture, params: Vec<ParamTensor>, bn: Vec<Option<BnStats>>) -> Self {
        let mut offsets = Vec::with_capacity(params.len());
        let mut slots = vec![[None; 4]; arch.layers.len()];
        let mut off = 0;
        for (i, p) in params.iter().enumerate() {
            offsets.push(off);
            off += p.value.len();
            slots[p.layer][p.role.slot()] = Some(i);
        }
        Self {
            arch,
            params,
            offsets,
            slots,
            bn,
            mode: Mode::Eval,
        }
    }

    /// Rebuild a network from stored parts, validating every extent.
    pub fn from_parts(arch: Architecture, flat: &[f64], bn: Vec<Option<BnStats>>) -> Result<Self> {
        let mut net = Self::build(arch, 0)?;
        net.set_flat_params(flat)?;
        if bn.len() != net.bn.len() {
            return Err(Error::Network(format!(
                "{} batch-norm slots for {} layers",
                bn.len(),
                net.bn.len()
            )));
        }
        for (i, (have, want)) in bn.iter().zip(&net.bn).enumerate() {
            match (have, want) {
                (None, None) => {}
                (Some(h), Some(w)) if h.mean.len() == w.mean.len() && h.var.len() == w.var.len() => {
                    if h.var.iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::Network(format!(
                            "layer {i}: batch-norm running variance must be positive"
                        )));
                    }
                }
                _ => return Err(Error::Network(format!("layer {i}: batch-norm statistics mismatch"))),
            }
        }
        net.bn = bn;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.arch.output_classes().expect("validated at construction")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn bn_stats(&self) -> &[Option<BnStats>] {
        &self.bn
    }

    /// Index into [`Network::params`] of a layer's parameter tensor.
    pub fn param_index(&self, layer: usize, role: ParamRole) -> Option<usize> {
        self.slots.get(layer)?[role.slot()]
    }

    /// Flat offset of each parameter tensor within θ.
    pub fn param_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for p in &self.params {
            flat.extend_from_slice(p.value.data());
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Network(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        for (p, &off) in self.params.iter_mut().zip(&self.offsets) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
        }
        Ok(())
    }

    /// Copy of this network with θ replaced.
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_flat_params(flat)?;
        Ok(net)
    }

    pub fn flat_index(&self, id: ParamId) -> Option<usize> {
        let t = self.param_index(id.layer, id.role)?;
        (id.offset < self.params[t].value.len()).then(|| self.offsets[t] + id.offset)
    }

    pub fn param_id(&self, flat: usize) -> Option<ParamId> {
        if flat >= self.num_params() {
            return None;
        }
        let t = self.offsets.partition_point(|&o| o <= flat) - 1;
        Some(ParamId {
            layer: self.params[t].layer,
            role: self.params[t].role,
            offset: flat - self.offsets[t],
        })
    }

    /// Role of every entry of θ, in flat order.
    pub fn flat_roles(&self) -> Vec<ParamRole> {
        let mut roles = Vec::with_capacity(self.num_params());
        for p in &self.params {
            roles.extend(std::iter::repeat_n(p.role, p.value.len()));
        }
        roles
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let want = &self.arch.input_shape;
        if s == want.as_slice() {
            Ok(1)
        } else if s.len() == want.len() + 1 && &s[1..] == want.as_slice() {
            Ok(s[0])
        } else {
            Err(shape_err(
                "forward",
                format!("input {s:?} does not match network input {want:?}"),
            ))
        }
    }

    /// `x` with a leading batch axis, and whether one was added.
    pub fn as_batch(&self, x: &Tensor) -> Result<(Tensor, bool)> {
        let batch = self.check_input(x)?;
        let single = x.shape() == self.arch.input_shape.as_slice();
        if single {
            let shape = [vec![1], x.shape().to_vec()].concat();
            Ok((x.clone().reshape(&shape)?, true))
        } else {
            debug_assert_eq!(batch, x.shape()[0]);
            Ok((x.clone(), false))
        }
    }

    /// Logits for one sample (`[classes]`) or a batch (`[batch, classes]`).
    ///
    /// Eval mode normalizes with running statistics; Train mode with the
    /// statistics of `x` itself (without updating the running averages, see
    /// [`Network::forward_train`]).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Eval => self.forward_with(x, BnUse::Running),
            Mode::Train => {
                let stats = self.batch_stats(x)?;
                self.forward_with(x, BnUse::Frozen(&stats))
            }
        }
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running averages with momentum [`BN_MOMENTUM`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let stats = self.batch_stats(x)?;
        let y = self.forward_with(x, BnUse::Frozen(&stats))?;
        self.update_running_stats(&stats, self.check_input(x)?);
        Ok(y)
    }

    pub fn forward_with(&self, x: &Tensor, bn: BnUse<'_>) -> Result<Tensor> {
        self.run_plain(x, bn, None)
    }

    /// Per-layer batch statistics of `x`, normalizing with them on the way.
    pub fn batch_stats(&self, x: &Tensor) -> Result<Vec<Option<BnStats>>> {
        let mut stats = vec![None; self.arch.layers.len()];
        self.run_plain(x, BnUse::Running, Some(&mut stats))?;
        Ok(stats)
    }

    /// Blend batch statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[Option<BnStats>], batch_size: usize) {
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        for (run, b) in self.bn.iter_mut().zip(batch) {
            if let (Some(run), Some(b)) = (run.as_mut(), b) {
                for c in 0..run.mean.len() {
                    run.mean[c] = (1.0 - BN_MOMENTUM) * run.mean[c] + BN_MOMENTUM * b.mean[c];
                    run.var[c] =
                        (1.0 - BN_MOMENTUM) * run.var[c] + BN_MOMENTUM * b.var[c] * correction;
                }
            }
        }
    }

    fn run_plain(
        &self,
        x: &Tensor,
        bn: BnUse<'_>,
        mut collect: Option<&mut Vec<Option<BnStats>>>,
    ) -> Result<Tensor> {
        let batch = self.check_input(x)?;
        let single = x.shape() == self.arch.input_shape.as_slice();
        let mut shape = self.arch.input_shape.clone();
        let mut h = x.data().to_vec();
        for (i, layer) in self.arch.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inp, out, .. } => {
                    let w = self.param(i, ParamRole::Weight);
                    h = kernels::dense_forward(&h, w.data(), batch, inp, out);
                    if let Some(b) = self.param_opt(i, ParamRole::Bias) {
                        add_channel(&mut h, b.data(), batch, out, 1);
                    }
                }
                LayerSpec::Conv2d {
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    in_ch,
                    ..
                } => {
                    let g = ConvGeometry {
                        batch,
                        in_ch,
                        height: shape[1],
                        width: shape[2],
                        out_ch,
                        kernel_h: kernel,
                        kernel_w: kernel,
                        stride,
                        padding,
                    };
                    h = kernels::conv2d_forward(&h, self.param(i, ParamRole::Weight).data(), &g);
                    if let Some(b) = self.param_opt(i, ParamRole::Bias) {
                        add_channel(&mut h, b.data(), batch, out_ch, g.out_height() * g.out_width());
                    }
                }
                LayerSpec::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerSpec::Flatten => {}
                LayerSpec::BatchNorm { features } => {
                    let inner = shape[1..].iter().product::<usize>();
                    let stats = match (&mut collect, bn) {
                        (Some(out), _) => {
                            let s = channel_stats(&h, batch, features, inner);
                            out[i] = Some(s.clone());
                            s
                        }
                        (None, BnUse::Running) => self.bn[i].clone().expect("bn layer"),
                        (None, BnUse::Frozen(s)) => s[i].clone().ok_or_else(|| {
                            Error::Network(format!("no frozen statistics for layer {i}"))
                        })?,
                    };
                    let (scale, shift) = self.bn_affine_plain(i, &stats);
                    for o in 0..batch {
                        for c in 0..features {
                            let start = (o * features + c) * inner;
                            for v in &mut h[start..start + inner] {
                                *v = *v * scale[c] + shift[c];
                            }
                        }
                    }
                }
            }
            shape = layer.output_shape(&shape).map_err(Error::Network)?;
        }
        let out_shape = if single { shape } else { [vec![batch], shape].concat() };
        Tensor::new(out_shape, h)
    }

    fn bn_affine_plain(&self, layer: usize, stats: &BnStats) -> (Vec<f64>, Vec<f64>) {
        let gamma = self.param(layer, ParamRole::BnGamma).data();
        let beta = self.param(layer, ParamRole::BnBeta).data();
        let inv = stats.inv_std();
        let scale: Vec<f64> = gamma.iter().zip(&inv).map(|(g, i)| g * i).collect();
        let shift = beta
            .iter()
            .zip(&scale)
            .zip(&stats.mean)
            .map(|((b, a), m)| b - a * m)
            .collect();
        (scale, shift)
    }

    pub(crate) fn param(&self, layer: usize, role: ParamRole) -> &Tensor {
        self.param_opt(layer, role).expect("parameter exists")
    }

    fn param_opt(&self, layer: usize, role: ParamRole) -> Option<&Tensor> {
        self.param_index(layer, role).map(|i| &self.params[i].value)
    }

    /// Class with the highest logit; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = self.forward(x)?;
        Ok(argmax(logits.data()))
    }

    /// Predictions for every row of a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let c = self.classes();
        Ok(logits.data().chunks(c).map(argmax).collect())
    }

    /// Bind θ onto `tape`, optionally through a Hadamard mask and/or an
    /// additive perturbation (both flat, aligned with θ).
    ///
    /// With `track` the raw parameters become leaves, so gradients reach θ
    /// as `grad ⊙ mask`; without it everything is a constant.
    pub fn bind(&self, tape: &mut Tape, binding: Binding<'_>) -> Result<BoundParams> {
        let n = self.num_params();
        for (what, v) in [("mask", binding.mask), ("shift", binding.shift)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Network(format!(
                        "{what} has {} entries but the network has {n} parameters",
                        v.len()
                    )));
                }
            }
        }
        let mut leaves = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (p, &off) in self.params.iter().zip(&self.offsets) {
            let len = p.value.len();
            let mask = binding.mask.map(|m| &m[off..off + len]);
            let shift = binding.shift.map(|s| &s[off..off + len]);
            let shape = p.value.shape().to_vec();
            let var = if binding.track {
                let leaf = tape.leaf(p.value.clone());
                leaves.push(leaf);
                let mut v = leaf;
                if let Some(m) = mask {
                    let mc = tape.constant(Tensor::new(shape.clone(), m.to_vec())?);
                    v = tape.mul(v, mc)?;
                }
                if let Some(s) = shift {
                    let sc = tape.constant(Tensor::new(shape, s.to_vec())?);
                    v = tape.add(v, sc)?;
                }
                v
            } else {
                let mut data = p.value.data().to_vec();
                if let Some(m) = mask {
                    data.iter_mut().zip(m).for_each(|(d, &k)| *d *= k);
                }
                if let Some(s) = shift {
                    data.iter_mut().zip(s).for_each(|(d, &k)| *d += k);
                }
                tape.constant(Tensor::new(shape, data)?)
            };
            vars.push(var);
        }
        Ok(BoundParams { vars, leaves })
    }

    /// Tape version of [`Network::forward_with`] on a batch `x`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        bn: BnUse<'_>,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Dense { .. } => {
                    let y = tape.dense(h, params.var(self, i, ParamRole::Weight))?;
                    self.maybe_bias(tape, params, i, y)?
                }
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let y = tape.conv2d(h, params.var(self, i, ParamRole::Weight), stride, padding)?;
                    self.maybe_bias(tape, params, i, y)?
                }
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::Flatten => self.flatten_on(tape, h)?,
                LayerSpec::BatchNorm { .. } => {
                    let (scale, shift) = self.bn_affine_on(tape, params, i, bn)?;
                    let y = tape.channel_scale(h, scale)?;
                    tape.bias_add(y, shift)?
                }
            };
        }
        Ok(h)
    }

    pub(crate) fn maybe_bias(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        layer: usize,
        y: Var,
    ) -> Result<Var> {
        match self.param_index(layer, ParamRole::Bias) {
            Some(t) => tape.bias_add(y, params.vars[t]),
            None => Ok(y),
        }
    }

    pub(crate) fn flatten_on(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let shape = tape.value(h).shape().to_vec();
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        tape.reshape(h, &[batch, rest])
    }

    /// Batch norm as a fixed per-channel affine map `x * scale + shift`.
    pub(crate) fn bn_affine_on(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        layer: usize,
        bn: BnUse<'_>,
    ) -> Result<(Var, Var)> {
        let stats = match bn {
            BnUse::Running => self.bn[layer].as_ref(),
            BnUse::Frozen(s) => s.get(layer).and_then(Option::as_ref),
        }
        .ok_or_else(|| Error::Network(format!("no batch-norm statistics for layer {layer}")))?;
        let features = stats.mean.len();
        let inv = tape.constant(Tensor::vector(stats.inv_std()));
        let mean = tape.constant(Tensor::vector(stats.mean.clone()));
        let gamma = params.var(self, layer, ParamRole::BnGamma);
        let beta = params.var(self, layer, ParamRole::BnBeta);
        let scale = tape.mul(gamma, inv)?;
        let centered = tape.mul(scale, mean)?;
        let shift = tape.sub(beta, centered)?;
        debug_assert_eq!(tape.value(scale).len(), features);
        Ok((scale, shift))
    }
}

/// A network seen through an optional Hadamard mask and additive weight
/// perturbation, with a fixed choice of batch-norm statistics.
///
/// Losses, attacks and bounds all run against a view, so a pruned or
/// perturbed variant shares θ with the base network.
#[derive(Clone, Copy, Debug)]
pub struct NetView<'a> {
    pub net: &'a Network,
    pub mask: Option<&'a [f64]>,
    pub shift: Option<&'a [f64]>,
    pub bn: BnUse<'a>,
}

impl<'a> NetView<'a> {
    pub fn new(net: &'a Network) -> Self {
        Self {
            net,
            mask: None,
            shift: None,
            bn: BnUse::Running,
        }
    }

    pub fn masked(mut self, mask: Option<&'a [f64]>) -> Self {
        self.mask = mask;
        self
    }

    pub fn shifted(mut self, shift: Option<&'a [f64]>) -> Self {
        self.shift = shift;
        self
    }

    pub fn with_bn(mut self, bn: BnUse<'a>) -> Self {
        self.bn = bn;
        self
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> Result<BoundParams> {
        self.net.bind(
            tape,
            Binding {
                track,
                mask: self.mask,
                shift: self.shift,
            },
        )
    }

    pub fn forward_on(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        self.net.forward_on(tape, params, x, self.bn)
    }

    /// Effective parameters θ ⊙ mask + shift, materialized.
    pub fn effective_params(&self) -> Vec<f64> {
        let mut flat = self.net.flat_params();
        if let Some(m) = self.mask {
            flat.iter_mut().zip(m).for_each(|(w, &k)| *w *= k);
        }
        if let Some(s) = self.shift {
            flat.iter_mut().zip(s).for_each(|(w, &k)| *w += k);
        }
        flat
    }

    /// Logits of a batch through the view, without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (xb, single) = self.net.as_batch(x)?;
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let xv = tape.constant(xb);
        let y = self.forward_on(&mut tape, &params, xv)?;
        let y = tape.value(y).clone();
        if single {
            let c = y.shape()[1];
            y.reshape(&[c])
        } else {
            Ok(y)
        }
    }
}

/// How θ is placed on a tape by [`Network::bind`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Binding<'a> {
    pub track: bool,
    pub mask: Option<&'a [f64]>,
    pub shift: Option<&'a [f64]>,
}

impl<'a> Binding<'a> {
    pub fn tracked() -> Self {
        Self {
            track: true,
            ..Self::default()
        }
    }

    pub fn constant() -> Self {
        Self::default()
    }

    pub fn with_mask(mut self, mask: Option<&'a [f64]>) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_shift(mut self, shift: Option<&'a [f64]>) -> Self {
        self.shift = shift;
        self
    }
}

/// Parameter tensors of a network as recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    leaves: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, net: &Network, layer: usize, role: ParamRole) -> Var {
        self.vars[net.param_index(layer, role).expect("parameter exists")]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient with respect to θ, flattened in parameter order.
    pub fn flat_grad(&self, grads: &crate::tensor::Gradients) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for &leaf in &self.leaves {
            let g = grads
                .get(leaf)
                .ok_or_else(|| Error::Network("parameters were bound without tracking".into()))?;
            flat.extend_from_slice(g.data());
        }
        Ok(flat)
    }
}

fn add_channel(h: &mut [f64], b: &[f64], batch: usize, ch: usize, inner: usize) {
    for o in 0..batch {
        for c in 0..ch {
            let start = (o * ch + c) * inner;
            h[start..start + inner].iter_mut().for_each(|v| *v += b[c]);
        }
    }
}

fn channel_stats(h: &[f64], batch: usize, ch: usize, inner: usize) -> BnStats {
    let n = (batch * inner) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let vals = (0..batch).flat_map(|o| {
            let start = (o * ch + c) * inner;
            h[start..start + inner].iter().copied()
        });
        let m = vals.clone().sum::<f64>() / n;
        mean[c] = m;
        var[c] = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    }
    BnStats { mean, var }
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

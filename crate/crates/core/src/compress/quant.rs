//! Uniform affine quantization.
//!
//! `Q(w) = clamp(round((w − z) / s), q_min, q_max) · s + z` with rounding
//! half away from zero. Calibration takes `s = (max − min) / (q_max − q_min)`
//! and `z = min − q_min · s`, so the smallest weight lands exactly on
//! `q_min` and the largest on `q_max`; within that range every weight is at
//! most `s / 2` from its quantized value.

use crate::error::{Error, Result};
use crate::network::{Network, ParamRole};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One spec per parameter tensor.
    PerTensor,
    /// Weight and bias of a layer share one spec.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
    pub q_min: i64,
    pub q_max: i64,
}

impl QuantSpec {
    /// Signed `bits`-bit range `[−2^(b−1), 2^(b−1) − 1]` with the given
    /// scale and zero point.
    pub fn new(bits: u32, scale: f64, zero_point: f64) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(Error::Config(format!("quantization needs 2..=32 bits, got {bits}")));
        }
        if !(scale > 0.0 && scale.is_finite()) || !zero_point.is_finite() {
            return Err(Error::Config(format!("invalid quantizer scale {scale} / zero {zero_point}")));
        }
        let half = 1i64 << (bits - 1);
        Ok(Self {
            bits,
            scale,
            zero_point,
            q_min: -half,
            q_max: half - 1,
        })
    }

    /// Grid `q · k` around zero with a wide clamp range.
    pub fn uniform_step(q_step: f64) -> Result<Self> {
        Self::new(32, q_step, 0.0)
    }

    pub fn q_step(&self) -> f64 {
        self.scale
    }

    fn level(&self, k: i64) -> f64 {
        k as f64 * self.scale + self.zero_point
    }

    pub fn range(&self) -> (f64, f64) {
        (self.level(self.q_min), self.level(self.q_max))
    }

    /// Whether `(w − z) / s` falls inside `[q_min, q_max]`, allowing for the
    /// rounding that puts calibrated extremes a hair outside.
    pub fn in_range(&self, w: f64) -> bool {
        const SLACK: f64 = 1e-9;
        let t = (w - self.zero_point) / self.scale;
        t >= self.q_min as f64 - SLACK && t <= self.q_max as f64 + SLACK
    }

    /// Integer code of `w`.
    pub fn code(&self, w: f64) -> i64 {
        let t = ((w - self.zero_point) / self.scale).round();
        let k = t.clamp(self.q_min as f64, self.q_max as f64) as i64;
        // rounding in the division or in the level arithmetic can leave a
        // neighbour closer; prefer it so the s/2 bound holds as computed
        let mut best = k;
        for cand in [k - 1, k + 1] {
            if (self.q_min..=self.q_max).contains(&cand)
                && (self.level(cand) - w).abs() < (self.level(best) - w).abs()
            {
                best = cand;
            }
        }
        best
    }

    pub fn quantize(&self, w: f64) -> f64 {
        self.level(self.code(w))
    }
}

/// Fit a spec to the range of `weights`.
///
/// A constant tensor has no range; it gets `s = 1`, `z` = that constant.
pub fn calibrate_quant(weights: &[f64], bits: u32) -> Result<QuantSpec> {
    if weights.is_empty() {
        return Err(Error::Config("cannot calibrate on an empty tensor".into()));
    }
    let (lo, hi) = weights
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| (lo.min(w), hi.max(w)));
    let probe = QuantSpec::new(bits, 1.0, 0.0)?;
    if hi <= lo {
        return QuantSpec::new(bits, 1.0, lo);
    }
    let scale = (hi - lo) / (probe.q_max - probe.q_min) as f64;
    QuantSpec::new(bits, scale, lo - probe.q_min as f64 * scale)
}

/// Quantizers for every weight/bias tensor of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantPlan {
    pub bits: u32,
    pub granularity: Granularity,
    /// `(parameter tensor index, spec)`, in parameter order.
    pub specs: Vec<(usize, QuantSpec)>,
}

impl QuantPlan {
    /// Calibrate on the current weights and biases of `net`.
    pub fn calibrate(net: &Network, bits: u32, granularity: Granularity) -> Result<Self> {
        let params = net.params();
        let mut specs = Vec::new();
        for (i, p) in params.iter().enumerate() {
            if !matches!(p.role, ParamRole::Weight | ParamRole::Bias) {
                continue;
            }
            let spec = match granularity {
                Granularity::PerTensor => calibrate_quant(p.value.data(), bits)?,
                Granularity::PerLayer => {
                    let mut values = Vec::new();
                    for role in [ParamRole::Weight, ParamRole::Bias] {
                        if let Some(j) = net.param_index(p.layer, role) {
                            values.extend_from_slice(params[j].value.data());
                        }
                    }
                    calibrate_quant(&values, bits)?
                }
            };
            specs.push((i, spec));
        }
        Ok(Self {
            bits,
            granularity,
            specs,
        })
    }

    /// One shared grid of step `q_step` over all weights and biases.
    pub fn uniform(net: &Network, q_step: f64) -> Result<Self> {
        let spec = QuantSpec::uniform_step(q_step)?;
        let specs = net
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p.role, ParamRole::Weight | ParamRole::Bias))
            .map(|(i, _)| (i, spec))
            .collect();
        Ok(Self {
            bits: spec.bits,
            granularity: Granularity::PerTensor,
            specs,
        })
    }

    /// Copy of `net` whose planned tensors hold quantized values.
    pub fn apply(&self, net: &Network) -> Result<Network> {
        let mut flat = net.flat_params();
        let offsets = net.param_offsets();
        for &(i, spec) in &self.specs {
            let len = net
                .params()
                .get(i)
                .ok_or_else(|| Error::Config(format!("quant plan names missing tensor {i}")))?
                .value
                .len();
            for w in &mut flat[offsets[i]..offsets[i] + len] {
                *w = spec.quantize(*w);
            }
        }
        net.with_flat_params(&flat)
    }
}

/// Calibrate and quantize weights and biases; BN parameters and running
/// statistics are left in full precision.
pub fn quantize_weights(net: &Network, bits: u32, granularity: Granularity) -> Result<(Network, QuantPlan)> {
    let plan = QuantPlan::calibrate(net, bits, granularity)?;
    Ok((plan.apply(net)?, plan))
}

/// Quantize on the tape: forward is `Q(w)`, backward passes the gradient
/// through where `w` is inside the clamp range and blocks it elsewhere.
pub fn ste_quantize(tape: &mut Tape, w: Var, spec: &QuantSpec) -> Result<Var> {
    let value = tape.value(w).map(|v| spec.quantize(v));
    let pass = tape.value(w).data().iter().map(|&v| spec.in_range(v)).collect();
    tape.straight_through(w, value, pass)
}

/// Elementwise `Q` over a tensor.
pub fn quantize_tensor(t: &Tensor, spec: &QuantSpec) -> Tensor {
    t.map(|w| spec.quantize(w))
}

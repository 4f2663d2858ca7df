//! Standard and IBP-certified accuracy of compressed variants.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::bounds::certify_batch;
use crate::compress::{compute_mask, materialize, quantize_weights, Granularity, PruneSpec, Score, Scope, Structure};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::network::{NetView, Network};

/// A compression applied before evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    None,
    Prune(PruneSpec),
    Quant { bits: u32, granularity: Granularity },
}

impl Variant {
    pub fn int8() -> Self {
        Variant::Quant {
            bits: 8,
            granularity: Granularity::PerLayer,
        }
    }

    pub fn int4() -> Self {
        Variant::Quant {
            bits: 4,
            granularity: Granularity::PerLayer,
        }
    }

    /// The compressed network this variant describes.
    pub fn apply(&self, net: &Network) -> Result<Network> {
        let named = |e: Error| Error::Config(format!("variant {self}: {e}"));
        match self {
            Variant::None => Ok(net.clone()),
            Variant::Prune(spec) => {
                let mask = compute_mask(net, spec, None).map_err(named)?;
                materialize(net, &mask).map_err(named)
            }
            Variant::Quant { bits, granularity } => {
                Ok(quantize_weights(net, *bits, *granularity).map_err(named)?.0)
            }
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::None => write!(f, "none"),
            Variant::Quant { bits, granularity } => match granularity {
                Granularity::PerLayer => write!(f, "int{bits}"),
                Granularity::PerTensor => write!(f, "int{bits}t"),
            },
            Variant::Prune(s) => {
                let scope = match s.scope {
                    Scope::Global => "g",
                    Scope::Local => "l",
                };
                let structure = match s.structure {
                    Structure::Unstructured => "u",
                    Structure::StructuredChannel => "s",
                };
                let score = match s.score {
                    Score::L1 => "l1",
                    Score::L2 => "l2",
                    Score::GradMag => "grad",
                };
                write!(f, "{scope}{structure}{score}:{}", s.ratio)
            }
        }
    }
}

/// Parses `none`, `int<bits>` (per layer), `int<bits>t` (per tensor), or
/// `<g|l><u|s><l1|l2>:<ratio>` such as `lul1:0.7` or `gsl2:0.5`.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown variant `{s}`"));
        if s == "none" {
            return Ok(Variant::None);
        }
        if let Some(rest) = s.strip_prefix("int") {
            let (digits, granularity) = match rest.strip_suffix('t') {
                Some(d) => (d, Granularity::PerTensor),
                None => (rest, Granularity::PerLayer),
            };
            let bits: u32 = digits.parse().map_err(|_| bad())?;
            if !(2..=32).contains(&bits) {
                return Err(bad());
            }
            return Ok(Variant::Quant { bits, granularity });
        }
        let (method, ratio) = s.split_once(':').ok_or_else(bad)?;
        let ratio: f64 = ratio.parse().map_err(|_| bad())?;
        let mut chars = method.chars();
        let scope = match chars.next() {
            Some('g') => Scope::Global,
            Some('l') => Scope::Local,
            _ => return Err(bad()),
        };
        let structure = match chars.next() {
            Some('u') => Structure::Unstructured,
            Some('s') => Structure::StructuredChannel,
            _ => return Err(bad()),
        };
        let score = match chars.as_str() {
            "l1" => Score::L1,
            "l2" => Score::L2,
            _ => return Err(bad()),
        };
        if !(0.0..1.0).contains(&ratio) {
            return Err(bad());
        }
        Ok(Variant::Prune(PruneSpec::new(ratio, scope, structure, score)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: String,
    pub n: usize,
    pub correct: usize,
    pub certified: usize,
}

impl EvalRow {
    pub fn std_acc(&self) -> f64 {
        percent(self.correct, self.n)
    }

    pub fn cert_acc(&self) -> f64 {
        percent(self.certified, self.n)
    }
}

fn percent(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * k as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eps: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,certifier,eps,n,correct,certified,std_acc,cert_acc\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},ibp,{},{},{},{},{:.2},{:.2}",
                r.variant,
                self.eps,
                r.n,
                r.correct,
                r.certified,
                r.std_acc(),
                r.cert_acc()
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut s = format!(
            "{:<w$}  {:>6}  {:>8}  {:>15}\n",
            "variant", "n", "std %", "IBP cert % (ε)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>6}  {:>8.2}  {:>8.2} ({})",
                r.variant,
                r.n,
                r.std_acc(),
                r.cert_acc(),
                self.eps
            );
        }
        s
    }
}

/// Counts for one network over a split; a sample counts as certified only
/// when it is also classified correctly.
pub fn accuracy_counts(net: &Network, split: &Split, eps: f64) -> Result<(usize, usize)> {
    let shape = net.input_shape().to_vec();
    let view = NetView::new(net);
    let mut correct = 0;
    let mut certified = 0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = split.batch(chunk, &shape)?;
        let preds = net.predict_batch(&x)?;
        let cert = certify_batch(&view, &x, &labels, eps)?;
        for ((p, y), c) in preds.iter().zip(&labels).zip(cert) {
            if p == y {
                correct += 1;
                certified += usize::from(c);
            }
        }
    }
    Ok((correct, certified))
}

pub fn evaluate(net: &Network, split: &Split, eps: f64, variants: &[Variant]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for v in variants {
        let compressed = v.apply(net)?;
        let (correct, certified) = accuracy_counts(&compressed, split, eps)?;
        rows.push(EvalRow {
            variant: v.to_string(),
            n: split.len(),
            correct,
            certified,
        });
    }
    Ok(EvalReport { eps, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for s in ["none", "int8", "int4t", "lul1:0.7", "gsl2:0.5"] {
            let v: Variant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert!("gxl2:0.5".parse::<Variant>().is_err());
        assert!("lul1:1.0".parse::<Variant>().is_err());
    }
}

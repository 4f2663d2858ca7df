//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "CCKP"
//! version u32      FORMAT_VERSION
//! then sections until end of file:
//!   tag     4 ASCII bytes
//!   length  u64    payload bytes that follow
//!   payload
//! ```
//!
//! | tag    | payload |
//! |--------|---------|
//! | `ARCH` | UTF-8 architecture text (`input ...` line, then one layer per line) |
//! | `PARM` | u64 count, then count × f64 θ in parameter order |
//! | `BNST` | u64 count, then per batch-norm layer: u64 layer, u64 features, features × f64 mean, features × f64 var |
//! | `RNGS` | u64 master seed |
//! | `ITER` | u64 iterations completed, u64 epochs completed |
//! | `MASK` | optional: u64 count, then count bytes, each 0 or 1, then u64 number of prunable entries |
//! | `QSPC` | optional: u32 bits, u8 granularity (0 tensor, 1 layer), u64 count, then per entry u64 tensor index, u32 bits, f64 scale, f64 zero point, i64 q_min, i64 q_max |
//! | `TRST` | optional: u64 Adam step, u64 count, count × f64 first moment, count × f64 second moment |
//!
//! Readers skip unknown tags; `ARCH`, `PARM`, `BNST`, `RNGS` and `ITER` are
//! required.

use std::fs;
use std::path::Path;

use crate::compress::{Granularity, PruningMask, QuantPlan, QuantSpec};
use crate::error::{Error, Result};
use crate::network::{Architecture, BnStats, Network};
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"CCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
    pub iteration: u64,
    pub epoch: usize,
    pub mask: Option<PruningMask>,
    pub quant: Option<QuantPlan>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(network: Network, seed: u64) -> Self {
        Self {
            network,
            seed,
            iteration: 0,
            epoch: 0,
            mask: None,
            quant: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let net = &self.network;

        section(&mut out, b"ARCH", net.architecture().to_string().into_bytes());

        let mut p = Writer::default();
        p.f64s(&net.flat_params());
        section(&mut out, b"PARM", p.0);

        let mut b = Writer::default();
        let bn: Vec<(usize, &BnStats)> = net
            .bn_stats()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
            .collect();
        b.u64(bn.len() as u64);
        for (layer, s) in bn {
            b.u64(layer as u64);
            b.u64(s.mean.len() as u64);
            s.mean.iter().for_each(|&v| b.f64(v));
            s.var.iter().for_each(|&v| b.f64(v));
        }
        section(&mut out, b"BNST", b.0);

        let mut r = Writer::default();
        r.u64(self.seed);
        section(&mut out, b"RNGS", r.0);

        let mut it = Writer::default();
        it.u64(self.iteration);
        it.u64(self.epoch as u64);
        section(&mut out, b"ITER", it.0);

        if let Some(mask) = &self.mask {
            let mut m = Writer::default();
            m.u64(mask.len() as u64);
            m.0.extend(mask.values().iter().map(|&v| u8::from(v != 0.0)));
            m.u64(mask.target_count() as u64);
            section(&mut out, b"MASK", m.0);
        }
        if let Some(plan) = &self.quant {
            let mut q = Writer::default();
            q.0.extend_from_slice(&plan.bits.to_le_bytes());
            q.0.push(match plan.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerLayer => 1,
            });
            q.u64(plan.specs.len() as u64);
            for (t, s) in &plan.specs {
                q.u64(*t as u64);
                q.0.extend_from_slice(&s.bits.to_le_bytes());
                q.f64(s.scale);
                q.f64(s.zero_point);
                q.0.extend_from_slice(&s.q_min.to_le_bytes());
                q.0.extend_from_slice(&s.q_max.to_le_bytes());
            }
            section(&mut out, b"QSPC", q.0);
        }
        if let Some(adam) = &self.optimizer {
            let mut t = Writer::default();
            t.u64(adam.t);
            t.f64s(&adam.m);
            t.0.extend(adam.v.iter().flat_map(|v| v.to_le_bytes()));
            section(&mut out, b"TRST", t.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut arch = None;
        let mut params = None;
        let mut bn = None;
        let mut seed = None;
        let mut iter = None;
        let mut mask = None;
        let mut quant = None;
        let mut optimizer = None;
        let mut r = Reader { bytes, pos: 8 };
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let mut s = Reader {
                bytes: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"ARCH" => {
                    let text = std::str::from_utf8(s.bytes)
                        .map_err(|_| Error::Checkpoint("architecture is not UTF-8".into()))?;
                    arch = Some(text.parse::<Architecture>()?);
                }
                b"PARM" => params = Some(s.f64s()?),
                b"BNST" => {
                    let count = s.u64()?;
                    let mut entries = Vec::new();
                    for _ in 0..count {
                        let layer = s.u64()? as usize;
                        let f = s.u64()? as usize;
                        let mean = (0..f).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                        let var = (0..f).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                        entries.push((layer, BnStats { mean, var }));
                    }
                    bn = Some(entries);
                }
                b"RNGS" => seed = Some(s.u64()?),
                b"ITER" => iter = Some((s.u64()?, s.u64()? as usize)),
                b"MASK" => {
                    let n = s.u64()? as usize;
                    let raw = s.take(n)?;
                    let values = raw.iter().map(|&b| f64::from(b)).collect();
                    let target = s.u64()? as usize;
                    mask = Some(
                        PruningMask::with_target_count(values, target)
                            .map_err(|e| Error::Checkpoint(e.to_string()))?,
                    );
                }
                b"QSPC" => {
                    let bits = s.u32()?;
                    let granularity = match s.take(1)?[0] {
                        0 => Granularity::PerTensor,
                        1 => Granularity::PerLayer,
                        g => return Err(Error::Checkpoint(format!("unknown granularity {g}"))),
                    };
                    let n = s.u64()?;
                    let mut specs = Vec::new();
                    for _ in 0..n {
                        let t = s.u64()? as usize;
                        let spec = QuantSpec {
                            bits: s.u32()?,
                            scale: s.f64()?,
                            zero_point: s.f64()?,
                            q_min: s.i64()?,
                            q_max: s.i64()?,
                        };
                        specs.push((t, spec));
                    }
                    quant = Some(QuantPlan {
                        bits,
                        granularity,
                        specs,
                    });
                }
                b"TRST" => {
                    let t = s.u64()?;
                    let m = s.f64s()?;
                    let v = (0..m.len()).map(|_| s.f64()).collect::<Result<Vec<_>>>()?;
                    optimizer = Some(AdamState { m, v, t });
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("missing {what} section"));
        let arch = arch.ok_or_else(|| missing("ARCH"))?;
        let params = params.ok_or_else(|| missing("PARM"))?;
        let mut bn_slots = vec![None; arch.layers.len()];
        for (layer, stats) in bn.ok_or_else(|| missing("BNST"))? {
            *bn_slots
                .get_mut(layer)
                .ok_or_else(|| Error::Checkpoint(format!("batch-norm stats for missing layer {layer}")))? =
                Some(stats);
        }
        let network = Network::from_parts(arch, &params, bn_slots)
            .map_err(|e| Error::Checkpoint(format!("architecture/parameter mismatch: {e}")))?;
        let (iteration, epoch) = iter.ok_or_else(|| missing("ITER"))?;
        let n = network.num_params();
        if mask.as_ref().is_some_and(|m: &PruningMask| m.len() != n)
            || optimizer.as_ref().is_some_and(|o: &AdamState| o.m.len() != n)
        {
            return Err(Error::Checkpoint("mask or optimizer state does not match θ".into()));
        }
        Ok(Self {
            network,
            seed: seed.ok_or_else(|| missing("RNGS"))?,
            iteration,
            epoch,
            mask,
            quant,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| {
            std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

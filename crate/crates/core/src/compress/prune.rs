//! Rank-based pruning masks.
//!
//! Scores are sorted ascending with ties broken by ascending [`ParamId`]
//! (flat order), and exactly the lowest `floor(δ·d)` entries are zeroed, so
//! sparsity is exact regardless of ties.

use crate::error::{Error, Result};
use crate::network::{NetView, Network, ParamRole};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Unstructured,
    /// Whole output channels (rows of a dense weight, filters of a conv).
    StructuredChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Score {
    L1,
    L2,
    /// `|g ⊙ w|` from a gradient snapshot.
    GradMag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSpec {
    pub ratio: f64,
    pub scope: Scope,
    pub structure: Structure,
    pub score: Score,
    pub targets: Vec<ParamRole>,
}

impl PruneSpec {
    pub fn new(ratio: f64, scope: Scope, structure: Structure, score: Score) -> Self {
        Self {
            ratio,
            scope,
            structure,
            score,
            targets: vec![ParamRole::Weight],
        }
    }

    /// Local unstructured magnitude pruning.
    pub fn local_l1(ratio: f64) -> Self {
        Self::new(ratio, Scope::Local, Structure::Unstructured, Score::L1)
    }

    /// Global structured channel pruning by l2 norm.
    pub fn global_structured_l2(ratio: f64) -> Self {
        Self::new(ratio, Scope::Global, Structure::StructuredChannel, Score::L2)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Prune(format!("ratio must lie in [0, 1), got {}", self.ratio)));
        }
        if self.structure == Structure::StructuredChannel && self.targets != [ParamRole::Weight] {
            return Err(Error::Prune("channel pruning only targets weights".into()));
        }
        Ok(())
    }
}

/// Binary mask over θ; 1 keeps a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningMask {
    values: Vec<f64>,
    target_count: usize,
    pruned: usize,
}

impl PruningMask {
    pub fn ones(len: usize) -> Self {
        Self {
            values: vec![1.0; len],
            target_count: len,
            pruned: 0,
        }
    }

    /// Mask from explicit 0/1 values (e.g. read back from a checkpoint).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Prune("mask entries must be 0 or 1".into()));
        }
        let pruned = values.iter().filter(|&&v| v == 0.0).count();
        Ok(Self {
            target_count: values.len(),
            values,
            pruned,
        })
    }

    /// Like [`from_values`](Self::from_values) with an explicit count of
    /// entries that were eligible for pruning.
    pub fn with_target_count(values: Vec<f64>, target_count: usize) -> Result<Self> {
        let mut m = Self::from_values(values)?;
        if target_count > m.values.len() || m.pruned > target_count {
            return Err(Error::Prune("inconsistent mask target count".into()));
        }
        m.target_count = target_count;
        Ok(m)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fraction of zeros among the targeted parameters.
    pub fn sparsity(&self) -> f64 {
        if self.target_count == 0 {
            0.0
        } else {
            self.pruned as f64 / self.target_count as f64
        }
    }

    pub fn pruned(&self) -> usize {
        self.pruned
    }

    pub fn target_count(&self) -> usize {
        self.target_count
    }
}

/// Parameter tensors the spec ranks, as `(tensor index, is last affine)`.
fn target_tensors(net: &Network, spec: &PruneSpec) -> Vec<usize> {
    net.params()
        .iter()
        .enumerate()
        .filter(|(_, p)| spec.targets.contains(&p.role))
        .map(|(i, _)| i)
        .collect()
}

fn elem_score(score: Score, w: f64, g: Option<f64>) -> f64 {
    match score {
        Score::L1 => w.abs(),
        Score::L2 => w * w,
        Score::GradMag => (w * g.unwrap_or(0.0)).abs(),
    }
}

/// Indices of the `count` lowest scores, ties broken by lower key.
fn lowest(mut scored: Vec<(f64, usize)>, count: usize) -> Vec<usize> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(count);
    scored.into_iter().map(|(_, k)| k).collect()
}

/// Compute a pruning mask for `net`.
///
/// `grads` is a flat gradient snapshot aligned with θ, required for
/// [`Score::GradMag`].
pub fn compute_mask(net: &Network, spec: &PruneSpec, grads: Option<&[f64]>) -> Result<PruningMask> {
    spec.validate()?;
    if spec.score == Score::GradMag {
        match grads {
            None => return Err(Error::Prune("gradient score needs a gradient snapshot".into())),
            Some(g) if g.len() != net.num_params() => {
                return Err(Error::Prune(format!(
                    "gradient snapshot has {} entries, network has {}",
                    g.len(),
                    net.num_params()
                )))
            }
            _ => {}
        }
    }
    match spec.structure {
        Structure::Unstructured => unstructured(net, spec, grads),
        Structure::StructuredChannel => structured(net, spec, grads),
    }
}

fn unstructured(net: &Network, spec: &PruneSpec, grads: Option<&[f64]>) -> Result<PruningMask> {
    let flat = net.flat_params();
    let offsets = net.param_offsets();
    let mut values = vec![1.0; flat.len()];
    let tensors = target_tensors(net, spec);
    let groups: Vec<Vec<usize>> = match spec.scope {
        Scope::Global => vec![tensors],
        Scope::Local => tensors.into_iter().map(|t| vec![t]).collect(),
    };
    let mut target_count = 0;
    let mut pruned = 0;
    for group in groups {
        let scored: Vec<(f64, usize)> = group
            .iter()
            .flat_map(|&t| offsets[t]..offsets[t] + net.params()[t].value.len())
            .map(|k| (elem_score(spec.score, flat[k], grads.map(|g| g[k])), k))
            .collect();
        let count = (spec.ratio * scored.len() as f64).floor() as usize;
        target_count += scored.len();
        pruned += count;
        for k in lowest(scored, count) {
            values[k] = 0.0;
        }
    }
    Ok(PruningMask {
        values,
        target_count,
        pruned,
    })
}

fn structured(net: &Network, spec: &PruneSpec, grads: Option<&[f64]>) -> Result<PruningMask> {
    let flat = net.flat_params();
    let offsets = net.param_offsets();
    let mut weights = target_tensors(net, spec);
    // the classifier's output units are the classes; never remove them
    weights.pop();
    if weights.is_empty() {
        return Err(Error::Prune("no hidden layer has prunable channels".into()));
    }
    // (tensor, channel count, channel size, channel scores)
    let mut layers = Vec::new();
    for &t in &weights {
        let shape = net.params()[t].value.shape();
        let channels = shape[0];
        let size = net.params()[t].value.len() / channels;
        let scores: Vec<f64> = (0..channels)
            .map(|c| {
                let range = offsets[t] + c * size..offsets[t] + (c + 1) * size;
                let (mut s1, mut s2) = (0.0, 0.0);
                for k in range {
                    let v = match spec.score {
                        Score::GradMag => flat[k] * grads.expect("validated")[k],
                        _ => flat[k],
                    };
                    s1 += v.abs();
                    s2 += v * v;
                }
                match spec.score {
                    Score::L1 => s1,
                    Score::L2 | Score::GradMag => s2.sqrt(),
                }
            })
            .collect();
        layers.push((t, channels, size, scores));
    }
    let mut drop: Vec<(usize, usize)> = Vec::new();
    match spec.scope {
        Scope::Local => {
            for (t, channels, _, scores) in &layers {
                let count = (spec.ratio * *channels as f64).floor() as usize;
                let scored = scores.iter().copied().zip(0..).collect();
                drop.extend(lowest(scored, count).into_iter().map(|c| (*t, c)));
            }
        }
        Scope::Global => {
            let mut scored = Vec::new();
            let mut keys = Vec::new();
            for (li, (_, _, size, scores)) in layers.iter().enumerate() {
                let norm = match spec.score {
                    Score::L1 => *size as f64,
                    Score::L2 | Score::GradMag => (*size as f64).sqrt(),
                };
                for (c, s) in scores.iter().enumerate() {
                    scored.push((s / norm, keys.len()));
                    keys.push((li, c));
                }
            }
            let count = (spec.ratio * scored.len() as f64).floor() as usize;
            let mut per_layer = vec![0; layers.len()];
            for k in lowest(scored, count) {
                let (li, c) = keys[k];
                per_layer[li] += 1;
                drop.push((layers[li].0, c));
            }
            for (li, (t, channels, _, _)) in layers.iter().enumerate() {
                if per_layer[li] >= *channels {
                    let p = &net.params()[*t];
                    return Err(Error::Prune(format!(
                        "ratio {} would remove every channel of layer {} ({:?})",
                        spec.ratio, p.layer, p.role
                    )));
                }
            }
        }
    }
    let mut values = vec![1.0; flat.len()];
    let mut pruned = 0;
    for (t, c) in drop {
        let size = net.params()[t].value.len() / net.params()[t].value.shape()[0];
        let start = offsets[t] + c * size;
        values[start..start + size].iter_mut().for_each(|v| *v = 0.0);
        pruned += size;
    }
    let target_count = weights.iter().map(|&t| net.params()[t].value.len()).sum();
    Ok(PruningMask {
        values,
        target_count,
        pruned,
    })
}

/// View of `net` through `mask`; forward passes, bounds and losses on it
/// use θ ⊙ ψ and send gradients to θ as `grad ⊙ ψ`.
pub fn apply_mask<'a>(net: &'a Network, mask: &'a PruningMask) -> Result<NetView<'a>> {
    if mask.len() != net.num_params() {
        return Err(Error::Prune(format!(
            "mask has {} entries, network has {} parameters",
            mask.len(),
            net.num_params()
        )));
    }
    Ok(NetView::new(net).masked(Some(mask.values())))
}

/// Copy of `net` with θ ⊙ ψ written into its parameters.
pub fn materialize(net: &Network, mask: &PruningMask) -> Result<Network> {
    let view = apply_mask(net, mask)?;
    net.with_flat_params(&view.effective_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, LayerSpec};
    use crate::tensor::Tensor;

    fn single_layer(weights: &[f64]) -> Network {
        let arch = Architecture::new(
            vec![weights.len()],
            vec![LayerSpec::Dense { inp: weights.len(), out: 1, bias: true }],
        );
        let mut net = Network::build(arch, 0).unwrap();
        let mut theta = weights.to_vec();
        theta.push(0.3);
        net.set_flat_params(&theta).unwrap();
        net
    }

    #[test]
    fn local_l1_example() {
        let net = single_layer(&[0.1, -0.5, 0.3, -0.2]);
        let mask = compute_mask(&net, &PruneSpec::local_l1(0.5), None).unwrap();
        assert_eq!(mask.values(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(mask.sparsity(), 0.5);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let net = Network::build(Architecture::mlp(&[3, 4, 2]), 1).unwrap();
        let mask = compute_mask(&net, &PruneSpec::local_l1(0.0), None).unwrap();
        assert!(mask.values().iter().all(|&v| v == 1.0));
        let x = Tensor::vector(vec![0.1, 0.5, 0.9]);
        assert_eq!(materialize(&net, &mask).unwrap().forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn ties_break_by_param_order() {
        let net = single_layer(&[0.2, -0.2, 0.2, 0.2]);
        let mask = compute_mask(&net, &PruneSpec::local_l1(0.5), None).unwrap();
        assert_eq!(&mask.values()[..4], &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gradmag_needs_snapshot() {
        let net = single_layer(&[0.1, 0.2]);
        let spec = PruneSpec::new(0.5, Scope::Local, Structure::Unstructured, Score::GradMag);
        assert!(compute_mask(&net, &spec, None).is_err());
        let mask = compute_mask(&net, &spec, Some(&[5.0, 1.0, 0.0])).unwrap();
        assert_eq!(&mask.values()[..2], &[1.0, 0.0]);
    }

    #[test]
    fn structured_removes_rows_and_keeps_one() {
        let net = Network::build(Architecture::mlp(&[3, 4, 4, 2]), 7).unwrap();
        let mask = compute_mask(&net, &PruneSpec::global_structured_l2(0.5), None).unwrap();
        let w0 = &mask.values()[..12];
        for row in w0.chunks(3) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        let classifier = net.flat_index(crate::network::ParamId {
            layer: 4,
            role: ParamRole::Weight,
            offset: 0,
        });
        assert_eq!(mask.values()[classifier.unwrap()], 1.0);
        assert!(compute_mask(&net, &PruneSpec::global_structured_l2(0.99), None).is_err());
    }

    #[test]
    fn misaligned_mask_is_rejected() {
        let net = single_layer(&[0.1, 0.2]);
        let mask = PruningMask::ones(2);
        assert!(apply_mask(&net, &mask).is_err());
    }
}

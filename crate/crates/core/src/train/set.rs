//! The compression set: the full network plus pruned and quantization-proxy
//! variants whose losses are averaged during training.

use rand::Rng;

use crate::attack::AwpConfig;
use crate::compress::{compute_mask, PruneSpec, PruningMask, Score, Scope, Structure};
use crate::error::{Error, Result};
use crate::network::Network;

/// Where a prune element's ratio comes from at each refresh.
#[derive(Clone, Debug, PartialEq)]
pub enum RatioSource {
    Fixed(f64),
    /// Uniform on `[lo, hi)`.
    Uniform { lo: f64, hi: f64 },
    /// Uniform choice from a list.
    Choice(Vec<f64>),
}

impl RatioSource {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            RatioSource::Fixed(r) => *r,
            RatioSource::Uniform { lo, hi } if hi > lo => rng.random_range(*lo..*hi),
            RatioSource::Uniform { lo, .. } => *lo,
            RatioSource::Choice(list) => list[rng.random_range(0..list.len())],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..1.0).contains(&r);
        let valid = match self {
            RatioSource::Fixed(r) => ok(*r),
            RatioSource::Uniform { lo, hi } => ok(*lo) && ok(*hi) && lo <= hi,
            RatioSource::Choice(list) => !list.is_empty() && list.iter().all(|&r| ok(r)),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pruning ratio source {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ElementKind {
    Identity,
    /// `spec.ratio` is replaced by a draw from `ratio` on every refresh.
    Prune { spec: PruneSpec, ratio: RatioSource },
    QuantProxy { awp: AwpConfig },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionElement {
    pub kind: ElementKind,
    mask: Option<PruningMask>,
    ratio: Option<f64>,
}

impl CompressionElement {
    pub fn new(kind: ElementKind) -> Self {
        Self {
            kind,
            mask: None,
            ratio: None,
        }
    }

    /// Short name used in metric column headers.
    pub fn label(&self) -> &'static str {
        match self.kind {
            ElementKind::Identity => "identity",
            ElementKind::Prune { .. } => "prune",
            ElementKind::QuantProxy { .. } => "quant",
        }
    }

    /// Mask from the latest refresh (prune elements only).
    pub fn mask(&self) -> Option<&PruningMask> {
        self.mask.as_ref()
    }

    /// Ratio drawn at the latest refresh.
    pub fn current_ratio(&self) -> Option<f64> {
        self.ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Fixed,
    Sampled,
    /// Prune elements join one at a time, every `every_epochs` epochs, in
    /// the order given; the set starts as the full network alone.
    Progressive { every_epochs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionSet {
    elements: Vec<CompressionElement>,
    strategy: Strategy,
    active: usize,
}

/// Pruning method used while training: global unstructured magnitude.
pub fn default_train_prune() -> PruneSpec {
    PruneSpec::new(0.0, Scope::Global, Structure::Unstructured, Score::L1)
}

impl CompressionSet {
    fn from_elements(mut elements: Vec<CompressionElement>, strategy: Strategy) -> Self {
        elements.insert(0, CompressionElement::new(ElementKind::Identity));
        let active = elements.len();
        Self {
            elements,
            strategy,
            active,
        }
    }

    /// Only the full network.
    pub fn identity() -> Self {
        Self::from_elements(Vec::new(), Strategy::Fixed)
    }

    /// One prune element per ratio, same ratios every batch.
    pub fn fixed(ratios: &[f64], spec: PruneSpec) -> Self {
        let elems = ratios
            .iter()
            .map(|&r| {
                CompressionElement::new(ElementKind::Prune {
                    spec: spec.clone(),
                    ratio: RatioSource::Fixed(r),
                })
            })
            .collect();
        Self::from_elements(elems, Strategy::Fixed)
    }

    /// `count` prune elements, each drawing a fresh ratio every batch.
    pub fn sampled(source: RatioSource, count: usize, spec: PruneSpec) -> Self {
        let elems = (0..count)
            .map(|_| {
                CompressionElement::new(ElementKind::Prune {
                    spec: spec.clone(),
                    ratio: source.clone(),
                })
            })
            .collect();
        Self::from_elements(elems, Strategy::Sampled)
    }

    pub fn progressive(ratios: &[f64], every_epochs: usize, spec: PruneSpec) -> Self {
        let mut set = Self::fixed(ratios, spec);
        set.strategy = Strategy::Progressive {
            every_epochs: every_epochs.max(1),
        };
        set.active = 1;
        set
    }

    /// Full network plus one prune element with δ ~ U[0.25, 0.75).
    pub fn default_cactus() -> Self {
        Self::sampled(RatioSource::Uniform { lo: 0.25, hi: 0.75 }, 1, default_train_prune())
    }

    /// Add an AWP quantization proxy element.
    pub fn with_quant_proxy(mut self, awp: AwpConfig) -> Self {
        self.elements
            .push(CompressionElement::new(ElementKind::QuantProxy { awp }));
        if !matches!(self.strategy, Strategy::Progressive { .. }) {
            self.active = self.elements.len();
        }
        self
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn elements(&self) -> &[CompressionElement] {
        &self.elements
    }

    /// Elements taking part in the current batch; the full network is
    /// always first.
    pub fn active(&self) -> impl Iterator<Item = (usize, &CompressionElement)> {
        let progressive = matches!(self.strategy, Strategy::Progressive { .. });
        let active = self.active;
        self.elements.iter().enumerate().filter(move |(i, e)| {
            !progressive || *i < active || matches!(e.kind, ElementKind::QuantProxy { .. })
        })
    }

    pub fn active_len(&self) -> usize {
        self.active().count()
    }

    /// Whether any prune element ranks by gradient magnitude.
    pub fn needs_grads(&self) -> bool {
        self.elements.iter().any(|e| {
            matches!(&e.kind, ElementKind::Prune { spec, .. } if spec.score == Score::GradMag)
        })
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.elements {
            match &e.kind {
                ElementKind::Identity => {}
                ElementKind::Prune { ratio, .. } => ratio.validate()?,
                ElementKind::QuantProxy { awp } => awp.validate()?,
            }
        }
        Ok(())
    }

    /// Recompute every active prune mask from the current θ, drawing new
    /// ratios where the source is random. The quantization proxy keeps no
    /// state between batches.
    pub fn refresh<R: Rng + ?Sized>(
        &mut self,
        net: &Network,
        epoch: usize,
        rng: &mut R,
        grads: Option<&[f64]>,
    ) -> Result<()> {
        if let Strategy::Progressive { every_epochs } = self.strategy {
            let prune = self
                .elements
                .iter()
                .filter(|e| matches!(e.kind, ElementKind::Prune { .. }))
                .count();
            self.active = 1 + (epoch / every_epochs).min(prune);
        }
        let active: Vec<usize> = self.active().map(|(i, _)| i).collect();
        for i in active {
            let e = &mut self.elements[i];
            if let ElementKind::Prune { spec, ratio } = &e.kind {
                let r = ratio.draw(rng);
                let spec = PruneSpec {
                    ratio: r,
                    ..spec.clone()
                };
                e.mask = Some(compute_mask(net, &spec, grads)?);
                e.ratio = Some(r);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`CompressionSet::refresh`].
pub fn refresh_set<R: Rng + ?Sized>(
    net: &Network,
    set: &mut CompressionSet,
    epoch: usize,
    rng: &mut R,
    grads: Option<&[f64]>,
) -> Result<()> {
    set.refresh(net, epoch, rng, grads)
}

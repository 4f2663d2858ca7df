//! Run configuration: a TOML file of flat `key = value` pairs grouped in
//! sections. Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use certcomp_core::attack::{AttackConfig, AwpConfig, PerturbationScale};
use certcomp_core::compress::{PruneSpec, Score, Scope, Structure};
use certcomp_core::data::{load_cifar10, load_mnist, make_synthetic, Dataset, SyntheticKind};
use certcomp_core::train::{AdamConfig, CompressionSet, RatioSource, Schedule, TrainConfig};
use certcomp_core::{Architecture, Error, Result, Variant};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub awp: AwpSection,
    pub compression: CompressionSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            awp: AwpSection::default(),
            compression: CompressionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Mnist,
    Cifar10,
    Blobs,
    Moons,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory with the IDX or CIFAR binary files.
    pub path: PathBuf,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    /// Synthetic sets: samples per split, noise level, generator seed
    /// (defaults to the run seed).
    pub n: usize,
    pub noise: f64,
    pub data_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Mnist,
            path: PathBuf::from("data/mnist"),
            train_size: None,
            test_size: None,
            n: 1000,
            noise: 0.05,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `mlp`, `conv_small`, `cnn7`, or `custom` (see `spec`).
    pub arch: String,
    /// Hidden widths for `mlp`.
    pub hidden: Vec<usize>,
    /// Architecture text for `custom`, e.g. `"input 2\ndense 2 2 bias"`.
    pub spec: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "mlp".into(),
            hidden: vec![128, 128],
            spec: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub ramp: u64,
    pub lambda_final: f64,
    pub per_element_updates: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let s = Schedule::default();
        Self {
            epochs: 10,
            batch_size: 16,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            warmup: s.warmup,
            ramp: s.ramp,
            lambda_final: s.lambda_final,
            per_element_updates: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Training radius; defaults to the dataset's first evaluation ε.
    pub epsilon: Option<f64>,
    /// SABR box radius as a fraction of ε.
    pub tau_ratio: f64,
    pub pgd_steps: usize,
    /// PGD step as a fraction of the attack radius.
    pub pgd_step_size: f64,
    pub restarts: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::new(1.0);
        Self {
            epsilon: None,
            tau_ratio: a.tau,
            pgd_steps: a.pgd_steps,
            pgd_step_size: a.pgd_step_size,
            restarts: a.restarts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AwpSection {
    /// Add the quantization proxy element to the compression set.
    pub enabled: bool,
    pub eta: f64,
    pub steps: usize,
    /// `absolute` or `relative` (η times the tensor's max |θ|).
    pub scale: String,
}

impl Default for AwpSection {
    fn default() -> Self {
        Self {
            enabled: false,
            eta: 0.25,
            steps: 1,
            scale: "absolute".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    /// `identity`, `fixed`, `sampled` or `progressive`.
    pub strategy: String,
    /// Pruning method used in training, as scope/structure/score letters:
    /// `gul1`, `lul1`, `gsl2`, `lugrad`, ...
    pub method: String,
    /// Ratios for `fixed` and `progressive`.
    pub ratios: Vec<f64>,
    /// Sampling range for `sampled`.
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Number of sampled prune elements.
    pub count: usize,
    /// Epochs between additions for `progressive`.
    pub every_epochs: usize,
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self {
            strategy: "sampled".into(),
            method: "gul1".into(),
            ratios: vec![0.5, 0.7],
            ratio_lo: 0.25,
            ratio_hi: 0.75,
            count: 1,
            every_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Radii to report; empty means the dataset default.
    pub eps: Vec<f64>,
    /// Variant names such as `none`, `lul1:0.7`, `gsl2:0.5`, `int8`.
    pub variants: Vec<String>,
}

pub const DEFAULT_VARIANTS: [&str; 7] = ["none", "lul1:0.5", "lul1:0.7", "gsl2:0.5", "gsl2:0.7", "int8", "int4"];

/// Parse a method string such as `gul1` or `lsgrad`.
pub fn parse_method(s: &str) -> Result<PruneSpec> {
    let bad = || Error::Config(format!("unknown pruning method `{s}`"));
    let mut chars = s.chars();
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
        "grad" => Score::GradMag,
        _ => return Err(bad()),
    };
    Ok(PruneSpec::new(0.0, scope, structure, score))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Read a config file; a missing file is an I/O error, bad contents a
    /// config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        let seed = d.data_seed.unwrap_or(self.seed);
        let ds = match d.kind {
            DataKind::Mnist => load_mnist(&d.path)?,
            DataKind::Cifar10 => load_cifar10(&d.path)?,
            DataKind::Blobs => make_synthetic(SyntheticKind::Blobs, d.n, d.noise, seed)?,
            DataKind::Moons => make_synthetic(SyntheticKind::Moons, d.n, d.noise, seed)?,
        };
        Ok(ds.subsample(d.train_size, d.test_size))
    }

    /// Default evaluation radii for the dataset.
    pub fn eval_eps(&self) -> Vec<f64> {
        if !self.eval.eps.is_empty() {
            return self.eval.eps.clone();
        }
        match self.data.kind {
            DataKind::Mnist => vec![0.1, 0.3],
            DataKind::Cifar10 => vec![2.0 / 255.0, 8.0 / 255.0],
            DataKind::Blobs | DataKind::Moons => vec![0.05],
        }
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.eval.variants.is_empty() {
            DEFAULT_VARIANTS.iter().map(|v| v.parse()).collect()
        } else {
            self.eval.variants.iter().map(|v| v.parse()).collect()
        }
    }

    pub fn architecture(&self, ds: &Dataset) -> Result<Architecture> {
        let m = &self.model;
        let arch = match m.arch.as_str() {
            "mlp" => {
                let input: usize = ds.input_shape.iter().product();
                let mut widths = vec![input];
                widths.extend(&m.hidden);
                widths.push(ds.classes);
                let mut a = Architecture::mlp(&widths);
                a.input_shape = ds.input_shape.clone();
                if ds.input_shape.len() > 1 {
                    a.layers.insert(0, certcomp_core::LayerSpec::Flatten);
                }
                a
            }
            "conv_small" | "cnn7" => {
                let [c, h, w] = ds.input_shape[..] else {
                    return Err(Error::Config(format!("{} needs image input", m.arch)));
                };
                if h != w {
                    return Err(Error::Config("convolutional presets need square images".into()));
                }
                if m.arch == "cnn7" {
                    Architecture::cnn7(c, h, ds.classes)
                } else {
                    Architecture::conv_small(c, h, ds.classes)
                }
            }
            "custom" => m
                .spec
                .as_deref()
                .ok_or_else(|| Error::Config("model.arch = \"custom\" needs model.spec".into()))?
                .parse()?,
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        let shapes = arch.shapes()?;
        if arch.input_shape != ds.input_shape {
            return Err(Error::Config(format!(
                "architecture input {:?} does not match dataset input {:?}",
                arch.input_shape, ds.input_shape
            )));
        }
        if shapes.last().map(|s| s.iter().product::<usize>()) != Some(ds.classes) {
            return Err(Error::Config(format!("architecture must output {} classes", ds.classes)));
        }
        Ok(arch)
    }

    pub fn epsilon(&self) -> f64 {
        self.attack.epsilon.unwrap_or_else(|| self.eval_eps()[0])
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let a = &self.attack;
        let eps = self.epsilon();
        if !(0.0..=1.0).contains(&a.tau_ratio) {
            return Err(Error::Config(format!("attack.tau_ratio must lie in [0, 1], got {}", a.tau_ratio)));
        }
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
                weight_decay: t.weight_decay,
            },
            schedule: Schedule {
                warmup: t.warmup,
                ramp: t.ramp,
                lambda_final: t.lambda_final,
            },
            attack: AttackConfig {
                epsilon: eps,
                tau: a.tau_ratio * eps,
                pgd_steps: a.pgd_steps,
                pgd_step_size: a.pgd_step_size,
                restarts: a.restarts,
            },
            seed: self.seed,
            per_element_updates: t.per_element_updates,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn compression_set(&self) -> Result<CompressionSet> {
        let c = &self.compression;
        let spec = parse_method(&c.method)?;
        let set = match c.strategy.as_str() {
            "identity" => CompressionSet::identity(),
            "fixed" => CompressionSet::fixed(&c.ratios, spec),
            "sampled" => CompressionSet::sampled(
                RatioSource::Uniform {
                    lo: c.ratio_lo,
                    hi: c.ratio_hi,
                },
                c.count,
                spec,
            ),
            "progressive" => CompressionSet::progressive(&c.ratios, c.every_epochs, spec),
            other => return Err(Error::Config(format!("unknown compression strategy `{other}`"))),
        };
        let set = if self.awp.enabled {
            let scale = match self.awp.scale.as_str() {
                "absolute" => PerturbationScale::Absolute,
                "relative" => PerturbationScale::TensorRelative,
                other => return Err(Error::Config(format!("unknown AWP scale `{other}`"))),
            };
            set.with_quant_proxy(AwpConfig {
                eta: self.awp.eta,
                steps: self.awp.steps,
                scale,
                exclude: Vec::new(),
            })
        } else {
            set
        };
        set.validate()?;
        Ok(set)
    }
}

//! Run configuration: a plain `key = value` file plus command-line overrides.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' anything
//! entry   := key '=' value [ '#' anything ]
//! key     := [a-z0-9_]+
//! list    := value (',' value)*
//! ```
//!
//! Whitespace around keys and values is ignored. A key may appear once per
//! file; `--set key=value` overrides replace file values. Relative paths are
//! taken relative to the working directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    load_idx, load_indian_pines, min_max_normalize, standardize, stratified_split, AugmentConfig,
    Dataset, FASHION_MNIST_MEAN, FASHION_MNIST_STD,
};
use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::inference::EarlyExitPolicy;
use crate::model::{build_cnn, build_mlp, CnnConfig, MlpConfig, MultiExitNetwork};
use crate::numerics::OptimizerKind;
use crate::training::{Regime, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    IndianPines,
    FashionMnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::IndianPines => "indian_pines",
            DatasetKind::FashionMnist => "fashion_mnist",
        }
    }

    pub fn task(self) -> &'static str {
        match self {
            DatasetKind::IndianPines => "hyperspectral",
            DatasetKind::FashionMnist => "image",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "indian_pines" => Ok(DatasetKind::IndianPines),
            "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?} (expected indian_pines or fashion_mnist)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backbone {
    Mlp,
    Cnn,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Mlp => "mlp",
            Backbone::Cnn => "cnn",
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Backbone::Mlp),
            "cnn" => Ok(Backbone::Cnn),
            _ => Err(Error::Config(format!("unknown backbone {s:?} (expected mlp or cnn)"))),
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// One labelled scene, split per class into train and test.
    Scene {
        cube: PathBuf,
        labels: PathBuf,
        train_fraction: f64,
        split_seed: u64,
    },
    /// Separate IDX train and test pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub source: DataSource,
    /// Keep a seeded random subset of this many training samples.
    pub train_limit: Option<usize>,
    /// Keep a seeded random subset of this many test samples.
    pub test_limit: Option<usize>,
    pub backbone: Backbone,
    pub mlp: MlpConfig,
    pub cnn: CnnConfig,
    pub train: TrainConfig,
    pub tau: f64,
    pub output_dir: PathBuf,
}

const KEYS: &[&str] = &[
    "augment",
    "backbone",
    "batch_size",
    "bn_refresh_batches",
    "cnn_widths",
    "cube",
    "dataset",
    "dropout",
    "epochs",
    "fixed_weights",
    "head_activation_epochs",
    "labels",
    "learning_rate",
    "mlp_depth",
    "mlp_exits",
    "mlp_width",
    "momentum",
    "optimizer",
    "output_dir",
    "policy_tau",
    "regime",
    "seed",
    "split_seed",
    "tau",
    "temperature",
    "test_images",
    "test_labels",
    "test_limit",
    "train_fraction",
    "train_images",
    "train_labels",
    "train_limit",
];

/// Raw entries in file order, before interpretation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Entries(BTreeMap<String, String>);

impl Entries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_entry(line).map_err(|m| Error::Config(format!("line {}: {m}", n + 1)))?;
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Entries(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_entry(assignment.trim())
            .map_err(|m| Error::Config(format!("--set {assignment:?}: {m}")))?;
        self.0.insert(k, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

fn split_entry(line: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = line.split_once('=').ok_or("expected key = value")?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || !k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
        return Err(format!("bad key {k:?}"));
    }
    if !KEYS.contains(&k) {
        return Err(format!("unknown key {k:?}"));
    }
    if v.is_empty() {
        return Err(format!("empty value for {k:?}"));
    }
    Ok((k.to_string(), v.to_string()))
}

struct Reader<'a>(&'a Entries);

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|t| {
                        t.trim().parse().map_err(|_| {
                            Error::Config(format!("{key} = {v:?}: bad element {t:?}"))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.required(key).map(PathBuf::from)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut entries = Entries::read(path)?;
        for o in overrides {
            entries.set(o)?;
        }
        Self::from_entries(&entries)
    }

    /// Interprets and validates the entries, including that input paths exist.
    pub fn from_entries(entries: &Entries) -> Result<Self> {
        let r = Reader(entries);
        let dataset: DatasetKind = r.required("dataset")?.parse()?;
        let source = match dataset {
            DatasetKind::IndianPines => DataSource::Scene {
                cube: r.path("cube")?,
                labels: r.path("labels")?,
                train_fraction: r.or("train_fraction", 0.7)?,
                split_seed: r.or("split_seed", 0)?,
            },
            DatasetKind::FashionMnist => DataSource::Idx {
                train_images: r.path("train_images")?,
                train_labels: r.path("train_labels")?,
                test_images: r.path("test_images")?,
                test_labels: r.path("test_labels")?,
            },
        };
        let backbone = match r.parse::<Backbone>("backbone")? {
            Some(b) => b,
            None if dataset == DatasetKind::IndianPines => Backbone::Mlp,
            None => Backbone::Cnn,
        };

        let mut mlp = MlpConfig::default();
        mlp.width = r.or("mlp_width", mlp.width)?;
        mlp.depth = r.or("mlp_depth", mlp.depth)?;
        mlp.exit_positions = r.list("mlp_exits")?.unwrap_or(mlp.exit_positions);
        mlp.dropout = r.or("dropout", mlp.dropout)?;
        let mut cnn = CnnConfig::default();
        cnn.widths = r.list("cnn_widths")?.unwrap_or(cnn.widths);

        let regime: Regime = r
            .or("regime", Regime::SoftCgt.to_string())?
            .parse()
            .map_err(|e: Error| Error::Config(e.to_string()))?;
        let tau: f64 = r.or("tau", 0.9)?;
        let temperature: f64 = r.or("temperature", 1.0)?;
        let gate = match regime {
            Regime::HardCgt | Regime::Cascade => GateConfig::hard(tau),
            Regime::SoftCgt => GateConfig::soft(tau, temperature),
            Regime::FixedJoint => GateConfig::fixed(r.list("fixed_weights")?.ok_or_else(|| {
                Error::Config("regime fixed needs fixed_weights".into())
            })?),
        };
        let mut train = TrainConfig::new(regime, gate);
        train.epochs = r.or("epochs", train.epochs)?;
        train.batch_size = r.or("batch_size", train.batch_size)?;
        train.learning_rate = r.or("learning_rate", train.learning_rate)?;
        train.seed = r.or("seed", train.seed)?;
        train.optimizer = match r.or("optimizer", "adam".to_string())?.as_str() {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::Sgd {
                momentum: r.or("momentum", 0.9)?,
            },
            o => return Err(Error::Config(format!("unknown optimizer {o:?} (adam or sgd)"))),
        };
        train.bn_refresh_batches = r.or("bn_refresh_batches", 0)?;
        train.head_activation_epochs = r.list("head_activation_epochs")?.unwrap_or_default();
        if r.flag("augment", false)? {
            train.augment = Some(AugmentConfig::light(train.seed));
        }

        let cfg = RunConfig {
            dataset,
            source,
            train_limit: r.parse("train_limit")?,
            test_limit: r.parse("test_limit")?,
            backbone,
            mlp,
            cnn,
            train,
            tau: r.or("policy_tau", 0.9)?,
            output_dir: r.path("output_dir")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        let check_fraction = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        if let DataSource::Scene { train_fraction, .. } = &self.source {
            check_fraction("train_fraction", *train_fraction)?;
        }
        if self.train.gate.mode != crate::gating::GateMode::Fixed {
            check_fraction("tau", self.train.gate.tau)?;
        }
        if self.backbone == Backbone::Cnn && self.dataset != DatasetKind::FashionMnist {
            return Err(Error::Config("the cnn backbone needs image data".into()));
        }
        if self.train.augment.is_some() && self.backbone != Backbone::Cnn {
            return Err(Error::Config("augment applies to the cnn backbone only".into()));
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::Config("train_limit and test_limit must be positive".into()));
        }
        EarlyExitPolicy::new(self.tau).map_err(cfg_err)?;
        self.train.gate.validate(self.num_exits()).map_err(cfg_err)?;
        self.train.validate(self.num_exits()).map_err(cfg_err)?;
        for p in self.input_paths() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn num_exits(&self) -> usize {
        match self.backbone {
            Backbone::Mlp => self.mlp.exit_positions.len(),
            Backbone::Cnn => self.cnn.widths.len(),
        }
    }

    pub fn input_paths(&self) -> Vec<&Path> {
        match &self.source {
            DataSource::Scene { cube, labels, .. } => vec![cube, labels],
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels],
        }
    }

    pub fn policy(&self) -> EarlyExitPolicy {
        EarlyExitPolicy::new(self.tau).expect("validated")
    }

    /// Train and test sets after splitting, subsetting and normalisation.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.source {
            DataSource::Scene {
                cube,
                labels,
                train_fraction,
                split_seed,
            } => {
                let scene = load_indian_pines(cube, labels)?;
                let (train, test) = stratified_split(&scene, *train_fraction, *split_seed)?;
                let train = limit(train, self.train_limit, *split_seed)?;
                let test = limit(test, self.test_limit, *split_seed)?;
                let (train, test, _) = min_max_normalize(&train, &test)?;
                (train, test)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = limit(load_idx(train_images, train_labels)?, self.train_limit, 0)?;
                let test = limit(load_idx(test_images, test_labels)?, self.test_limit, 0)?;
                (
                    standardize(&train, FASHION_MNIST_MEAN, FASHION_MNIST_STD)?,
                    standardize(&test, FASHION_MNIST_MEAN, FASHION_MNIST_STD)?,
                )
            }
        };
        Ok((train, test))
    }

    /// Freshly initialised network sized for `train`.
    pub fn build_network(&self, train: &Dataset) -> Result<MultiExitNetwork> {
        match self.backbone {
            Backbone::Mlp => {
                let mut c = self.mlp.clone();
                c.input_dim = train.feature_dim();
                c.num_classes = train.num_classes();
                build_mlp(c, self.train.seed)
            }
            Backbone::Cnn => {
                let mut c = self.cnn.clone();
                c.num_classes = train.num_classes();
                build_cnn(c, self.train.seed)
            }
        }
    }

    /// Every setting, defaults included, in the config grammar.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv("dataset", self.dataset.name().into());
        match &self.source {
            DataSource::Scene {
                cube,
                labels,
                train_fraction,
                split_seed,
            } => {
                kv("cube", cube.display().to_string());
                kv("labels", labels.display().to_string());
                kv("train_fraction", train_fraction.to_string());
                kv("split_seed", split_seed.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
            }
        }
        if let Some(n) = self.train_limit {
            kv("train_limit", n.to_string());
        }
        if let Some(n) = self.test_limit {
            kv("test_limit", n.to_string());
        }
        kv("backbone", self.backbone.name().into());
        match self.backbone {
            Backbone::Mlp => {
                kv("mlp_width", self.mlp.width.to_string());
                kv("mlp_depth", self.mlp.depth.to_string());
                kv("mlp_exits", join(&self.mlp.exit_positions));
                kv("dropout", self.mlp.dropout.to_string());
            }
            Backbone::Cnn => kv("cnn_widths", join(&self.cnn.widths)),
        }
        let t = &self.train;
        kv("regime", t.regime.to_string());
        match t.regime {
            Regime::FixedJoint => kv(
                "fixed_weights",
                t.gate.fixed_weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            Regime::SoftCgt => {
                kv("tau", t.gate.tau.to_string());
                kv("temperature", t.gate.temperature.to_string());
            }
            Regime::HardCgt | Regime::Cascade => kv("tau", t.gate.tau.to_string()),
        }
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        match t.optimizer {
            OptimizerKind::Adam { .. } => kv("optimizer", "adam".into()),
            OptimizerKind::Sgd { momentum } => {
                kv("optimizer", "sgd".into());
                kv("momentum", momentum.to_string());
            }
        }
        kv("learning_rate", t.learning_rate.to_string());
        kv("seed", t.seed.to_string());
        if !t.head_activation_epochs.is_empty() {
            kv("head_activation_epochs", join(&t.head_activation_epochs));
        }
        kv("augment", t.augment.is_some().to_string());
        kv("bn_refresh_batches", t.bn_refresh_batches.to_string());
        kv("policy_tau", self.tau.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }
}

fn limit(ds: Dataset, n: Option<usize>, seed: u64) -> Result<Dataset> {
    match n {
        Some(n) if n < ds.len() => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            ds.subset(&idx)
        }
        _ => Ok(ds),
    }
}

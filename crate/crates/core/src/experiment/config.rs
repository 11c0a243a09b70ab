//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{OptimizerKind, Reconstruction};

/// Comma-separated list of layer widths; empty means no hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Widths(pub Vec<usize>);

trait ConfigValue: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl ConfigValue for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => None,
        }
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse(s: &str) -> Option<Self> {
        Some(s.to_owned())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Widths {
    fn parse(s: &str) -> Option<Self> {
        if s.trim().is_empty() {
            return Some(Widths(Vec::new()));
        }
        s.split(',')
            .map(|w| w.trim().parse().ok().filter(|&w: &usize| w > 0))
            .collect::<Option<Vec<_>>>()
            .map(Widths)
    }
    fn show(&self) -> String {
        self.0.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for OptimizerKind {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse(value).ok_or_else(|| {
                            Error::Config(format!("bad value `{value}` for `{}`", stringify!($key)))
                        })?;
                    })*
                    "preset" => return Err(Error::Config("`preset` must be the first key".into())),
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Every key in declaration order, one `key = value` per line.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($key), self.$key.show()).expect("string write");)*
                s
            }
        }
    };
}

config! {
    /// Label used for the in-distribution data in reports.
    name: String = "mnist".into();
    /// `idx` or `toy3d`.
    dataset: String = "idx".into();
    train_images: String = "data/mnist-images-idx3-ubyte.gz".into();
    train_labels: String = "data/mnist-labels-idx1-ubyte.gz".into();
    /// Classes kept as inliers (relabelled to 0..k); empty keeps all.
    classes: String = String::new();
    train_size: usize = 5000;
    test_size: usize = 2000;
    /// Toy training points per class.
    toy_per_class: usize = 1000;
    /// Built-in OOD sets: gaussian, uniform, sphere, off_octant, heldout.
    ood_synthetic: String = "gaussian,uniform,sphere".into();
    /// `name:path` pairs of IDX image files used as OOD sets.
    ood_files: String = "fashion:data/fashion-images-idx3-ubyte.gz".into();
    /// Samples per OOD evaluation set.
    ood_count: usize = 2000;
    gaussian_clamp: bool = true;
    /// OOD set reserved for model selection; tagged in reports.
    validation_ood: String = String::new();
    latent_dim: usize = 8;
    cvae_encoder: Widths = Widths(vec![256, 128]);
    cvae_decoder: Widths = Widths(vec![128, 256]);
    /// `bernoulli` (data in [0, 1]) or `gaussian`.
    reconstruction: String = "bernoulli".into();
    recon_sigma: f64 = 0.1;
    cvae_epochs: usize = 40;
    cvae_batch: usize = 64;
    cvae_optimizer: OptimizerKind = OptimizerKind::Adam;
    cvae_lr: f64 = 1e-3;
    cvae_beta_kl: f64 = 1.0;
    /// Stop early once the loss stalls.
    cvae_converge: bool = true;
    beta_min: f64 = 0.1;
    beta_max: f64 = 1.0;
    type1_per_sample: usize = 1;
    type2_per_class: usize = 500;
    /// Share of Type I samples in the OOD training class.
    type1_fraction: f64 = 0.5;
    sv_threshold: f64 = 1e-6;
    clamp_type1: bool = false;
    /// One latent Gaussian for all classes instead of one per class.
    pooled_latent: bool = false;
    detector_hidden: Widths = Widths(vec![256, 128]);
    detector_epochs: usize = 15;
    detector_batch: usize = 64;
    detector_optimizer: OptimizerKind = OptimizerKind::Adam;
    detector_lr: f64 = 1e-3;
    ood_class_weight: f64 = 0.1;
    odin_temperature: f64 = 1000.0;
    odin_epsilon: f64 = 0.0014;
    seed: u64 = 0;
    out_dir: String = "runs".into();
}

impl ExperimentConfig {
    /// Settings for the two-octant sphere toy.
    pub fn toy3d() -> Self {
        Self {
            name: "toy3d".into(),
            dataset: "toy3d".into(),
            train_images: String::new(),
            train_labels: String::new(),
            toy_per_class: 1000,
            test_size: 1000,
            ood_synthetic: "off_octant".into(),
            ood_files: String::new(),
            ood_count: 1000,
            latent_dim: 2,
            cvae_encoder: Widths(vec![32, 32]),
            cvae_decoder: Widths(vec![32, 32]),
            reconstruction: "gaussian".into(),
            recon_sigma: 0.03,
            cvae_epochs: 300,
            cvae_batch: 64,
            cvae_lr: 3e-3,
            type2_per_class: 500,
            detector_hidden: Widths(vec![32, 32]),
            detector_epochs: 60,
            detector_batch: 64,
            detector_lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::default()),
            "toy3d" => Ok(Self::toy3d()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. An optional first
    /// key `preset` selects the starting defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if k.trim() == "preset" && first {
                cfg = Self::preset(v.trim())?;
            } else {
                cfg.set(k, v)
                    .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            }
            first = false;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical text, leaving out
    /// `out_dir` (where a run goes does not change what it computes).
    pub fn hash(&self) -> String {
        let canonical: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn out_path(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn class_list(&self) -> Result<Vec<usize>> {
        if self.classes.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.classes
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad class `{c}` in `classes`")))
            })
            .collect()
    }

    pub fn synthetic_ood(&self) -> Vec<String> {
        split_list(&self.ood_synthetic)
    }

    pub fn ood_file_list(&self) -> Result<Vec<(String, PathBuf)>> {
        split_list(&self.ood_files)
            .into_iter()
            .map(|entry| {
                entry
                    .split_once(':')
                    .map(|(n, p)| (n.trim().to_owned(), PathBuf::from(p.trim())))
                    .ok_or_else(|| Error::Config(format!("`ood_files` entry `{entry}` is not name:path")))
            })
            .collect()
    }

    pub fn reconstruction_model(&self) -> Result<Reconstruction> {
        match self.reconstruction.as_str() {
            "bernoulli" => Ok(Reconstruction::Bernoulli),
            "gaussian" => Ok(Reconstruction::Gaussian {
                sigma: self.recon_sigma,
            }),
            other => Err(Error::Config(format!("unknown reconstruction `{other}`"))),
        }
    }

    /// Checks values and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.dataset.as_str() {
            "idx" => {
                for p in [&self.train_images, &self.train_labels] {
                    if !Path::new(p).is_file() {
                        return fail(format!("input file `{p}` does not exist"));
                    }
                }
            }
            "toy3d" => {
                if self.toy_per_class == 0 {
                    return fail("toy_per_class must be positive".into());
                }
            }
            other => return fail(format!("unknown dataset `{other}`")),
        }
        for (name, p) in self.ood_file_list()? {
            if !p.is_file() {
                return fail(format!("OOD set `{name}` file `{}` does not exist", p.display()));
            }
        }
        for s in self.synthetic_ood() {
            if !["gaussian", "uniform", "sphere", "off_octant", "heldout"].contains(&s.as_str()) {
                return fail(format!("unknown synthetic OOD set `{s}`"));
            }
        }
        if self.latent_dim == 0 || self.train_size == 0 || self.test_size == 0 || self.ood_count == 0 {
            return fail("latent_dim, train_size, test_size and ood_count must be positive".into());
        }
        if !(0.0 <= self.beta_min && self.beta_min <= self.beta_max) {
            return fail("need 0 ≤ beta_min ≤ beta_max".into());
        }
        if !(0.0..=1.0).contains(&self.type1_fraction) {
            return fail("type1_fraction must lie in [0, 1]".into());
        }
        if self.ood_class_weight < 0.0 || self.odin_temperature <= 0.0 || self.odin_epsilon < 0.0 {
            return fail("ood_class_weight, odin_epsilon must be ≥ 0 and odin_temperature > 0".into());
        }
        if self.cvae_lr <= 0.0 || self.detector_lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        self.class_list()?;
        self.reconstruction_model()?;
        Ok(())
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

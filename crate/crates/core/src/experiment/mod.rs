//! End-to-end runs: CVAE → Type I/II generation → detector → metrics.
//!
//! Every artifact is named `{stage}-{config hash}-s{seed}.{ext}` inside the
//! output directory. A stage whose `.done` marker lists matching SHA-256
//! digests for its files is loaded instead of recomputed.

mod config;
mod toy;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, Widths};
pub use toy::{emit_toy_plotdata, project_plane, ToyPlotData};

use crate::batch::OodBatch;
use crate::cvae::{train_cvae, CvaeModel, CvaeTrainConfig};
use crate::data::{
    class_filter, gen_gaussian_noise, gen_off_octant_sphere, gen_sphere_ood, gen_toy3d, gen_uniform_noise,
    load_idx, read_all, split, LabeledDataset,
};
use crate::detector::{score, train_detector, DetectorModel, DetectorTrainConfig, ScoreRule, Variant};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::nn::{io, Optimizer};
use crate::offmanifold::{generate_type1, Type1Config};
use crate::onmanifold::{fit_class_stats, generate_type2};
use crate::rng::{derive_seed, seeded};

/// In-distribution splits and the OOD evaluation roster.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: Vec<LabeledDataset>,
}

impl Splits {
    pub fn n_classes(&self) -> usize {
        self.train.n_classes()
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

/// Loads or synthesizes the data a config describes. Deterministic in the seed.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let (train, test, heldout) = match cfg.dataset.as_str() {
        "toy3d" => {
            let train = gen_toy3d(cfg.toy_per_class, &mut seeded(derive_seed(cfg.seed, "toy-train")))?;
            let test = gen_toy3d(cfg.test_size.div_ceil(2), &mut seeded(derive_seed(cfg.seed, "toy-test")))?
                .take(cfg.test_size);
            (train, test, None)
        }
        "idx" => {
            let full = load_idx(Path::new(&cfg.train_images), Some(Path::new(&cfg.train_labels)))?;
            let keep = cfg.class_list()?;
            let (inl, heldout) = if keep.is_empty() {
                (full, None)
            } else {
                let rest: Vec<usize> = (0..full.n_classes()).filter(|c| !keep.contains(c)).collect();
                let heldout = if rest.is_empty() {
                    None
                } else {
                    Some(class_filter(&full, &rest, false)?)
                };
                (class_filter(&full, &keep, true)?, heldout)
            };
            if cfg.train_size >= inl.len() {
                return Err(Error::Config(format!(
                    "train_size {} leaves nothing to test among {} samples",
                    cfg.train_size,
                    inl.len()
                )));
            }
            let frac = cfg.train_size as f64 / inl.len() as f64;
            let (train, test) = split(&inl, frac, &mut seeded(derive_seed(cfg.seed, "split")))?;
            (train.take(cfg.train_size), test.take(cfg.test_size), heldout)
        }
        other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
    };
    let dim = train.dim();
    let mut ood = Vec::new();
    for name in cfg.synthetic_ood() {
        let mut rng = seeded(derive_seed(cfg.seed, &format!("ood-eval:{name}")));
        let n = cfg.ood_count;
        let mut ds = match name.as_str() {
            "gaussian" => gen_gaussian_noise(n, dim, cfg.gaussian_clamp, &mut rng),
            "uniform" => gen_uniform_noise(n, dim, &mut rng),
            "sphere" => gen_sphere_ood(n, dim, train.max_norm(), &mut rng)?,
            "off_octant" => {
                if dim != 3 {
                    return Err(Error::Config("off_octant OOD needs 3-D data".into()));
                }
                gen_off_octant_sphere(n, &mut rng)
            }
            "heldout" => match &heldout {
                Some(h) => h.take(n),
                None => return Err(Error::Config("`heldout` OOD needs a `classes` subset".into())),
            },
            other => return Err(Error::Config(format!("unknown synthetic OOD set `{other}`"))),
        };
        ds.name = name.clone();
        ood.push(ds);
    }
    for (name, path) in cfg.ood_file_list()? {
        let mut ds = load_idx(&path, None)?.take(cfg.ood_count);
        if ds.dim() != dim {
            return Err(Error::Config(format!("OOD set `{name}` has width {}, expected {dim}", ds.dim())));
        }
        ds.name = name;
        ood.push(ds);
    }
    Ok(Splits { train, test, ood })
}

/// Artifact naming and stage sealing for one (config, seed).
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
    pub hash: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Seal {
    stage: String,
    config_hash: String,
    seed: u64,
    files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(read_all(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl RunDir {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.out_path();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            hash: cfg.hash(),
            seed: cfg.seed,
        })
    }

    pub fn artifact(&self, stage: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{}-s{}.{ext}", self.hash, self.seed))
    }

    fn seal_path(&self, stage: &str) -> PathBuf {
        self.artifact(stage, "done")
    }

    /// Whether `stage` finished earlier and its files are unchanged.
    pub fn is_sealed(&self, stage: &str, files: &[PathBuf]) -> bool {
        let Ok(text) = std::fs::read_to_string(self.seal_path(stage)) else {
            return false;
        };
        let Ok(seal) = serde_json::from_str::<Seal>(&text) else {
            return false;
        };
        if seal.config_hash != self.hash || seal.seed != self.seed || seal.files.len() != files.len() {
            return false;
        }
        files.iter().all(|f| {
            let key = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            match (seal.files.get(&key), sha256_file(f)) {
                (Some(want), Ok(got)) => *want == got,
                _ => false,
            }
        })
    }

    pub fn seal(&self, stage: &str, files: &[PathBuf]) -> Result<()> {
        let mut map = BTreeMap::new();
        for f in files {
            let key = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            map.insert(key, sha256_file(f)?);
        }
        let seal = Seal {
            stage: stage.to_owned(),
            config_hash: self.hash.clone(),
            seed: self.seed,
            files: map,
        };
        std::fs::write(self.seal_path(stage), serde_json::to_string_pretty(&seal)?)?;
        Ok(())
    }
}

fn cvae_files(run: &RunDir) -> Vec<PathBuf> {
    let bin = run.artifact("cvae", "bin");
    vec![crate::cvae::meta_path(&bin), bin]
}

/// Trains the CVAE, or reloads it when the stage is sealed.
pub fn stage_cvae(cfg: &ExperimentConfig, run: &RunDir, train: &LabeledDataset) -> Result<CvaeModel> {
    stage("train-cvae", (|| {
        let files = cvae_files(run);
        if run.is_sealed("cvae", &files) {
            log::info!("reusing {}", files[1].display());
            return CvaeModel::load(&files[1]);
        }
        let mut rng = seeded(derive_seed(cfg.seed, "cvae"));
        let mut model = CvaeModel::new(
            train.dim(),
            train.n_classes(),
            cfg.latent_dim,
            &cfg.cvae_encoder.0,
            &cfg.cvae_decoder.0,
            cfg.reconstruction_model()?,
            &mut rng,
        )?;
        let tc = CvaeTrainConfig {
            epochs: cfg.cvae_epochs,
            batch_size: cfg.cvae_batch,
            beta_kl: cfg.cvae_beta_kl,
            convergence: cfg.cvae_converge.then_some((1e-3, 10)),
        };
        let mut opt = Optimizer::new(cfg.cvae_optimizer, cfg.cvae_lr)?;
        let log = train_cvae(&mut model, train, &tc, &mut opt, &mut rng)?;
        log::info!(
            "CVAE: {} epochs, loss {:.3} → {:.3}",
            log.loss.len(),
            log.loss.first().copied().unwrap_or(f64::NAN),
            log.loss.last().copied().unwrap_or(f64::NAN)
        );
        let mut w = std::fs::File::create(run.artifact("cvae-log", "csv"))?;
        writeln!(w, "epoch,loss,reconstruction,kl")?;
        for i in 0..log.loss.len() {
            writeln!(w, "{},{:?},{:?},{:?}", i + 1, log.loss[i], log.reconstruction[i], log.kl[i])?;
        }
        model.save(&files[1])?;
        run.seal("cvae", &files)?;
        Ok(model)
    })())
}

/// Generated Type I and Type II batches.
#[derive(Debug, Clone)]
pub struct Generated {
    pub type1: OodBatch,
    pub type2: OodBatch,
}

fn ood_files(run: &RunDir, which: &str) -> (PathBuf, PathBuf) {
    (run.artifact(which, "idx"), run.artifact(which, "csv"))
}

pub fn stage_generate(cfg: &ExperimentConfig, run: &RunDir, model: &CvaeModel, train: &LabeledDataset) -> Result<Generated> {
    stage("gen-ood", (|| {
        let (i1, m1) = ood_files(run, "ood-type1");
        let (i2, m2) = ood_files(run, "ood-type2");
        let files = vec![i1.clone(), m1.clone(), i2.clone(), m2.clone()];
        if run.is_sealed("ood", &files) {
            return Ok(Generated {
                type1: OodBatch::load(&i1, &m1)?,
                type2: OodBatch::load(&i2, &m2)?,
            });
        }
        let t1cfg = Type1Config {
            beta_min: cfg.beta_min,
            beta_max: cfg.beta_max,
            per_sample: cfg.type1_per_sample,
            sv_threshold_rel: cfg.sv_threshold,
            clamp: cfg.clamp_type1,
        };
        let type1 = if cfg.type1_per_sample > 0 {
            generate_type1(model, train, &t1cfg, &mut seeded(derive_seed(cfg.seed, "type1")))?
        } else {
            OodBatch::new(train.dim())
        };
        let stats = fit_class_stats(model, train, cfg.pooled_latent)?;
        let type2 = generate_type2(model, &stats, cfg.type2_per_class, &mut seeded(derive_seed(cfg.seed, "type2")))?;
        type1.save(&i1, &m1)?;
        type2.save(&i2, &m2)?;
        run.seal("ood", &files)?;
        Ok(Generated { type1, type2 })
    })())
}

/// Subsamples the two types to the configured ratio, keeping as many
/// samples as the ratio allows.
pub fn mix_ood(generated: &Generated, type1_fraction: f64, seed: u64) -> Result<OodBatch> {
    let (n1, n2) = (generated.type1.len(), generated.type2.len());
    let (k1, k2) = if type1_fraction >= 1.0 {
        (n1, 0)
    } else if type1_fraction <= 0.0 {
        (0, n2)
    } else {
        let total = (n1 as f64 / type1_fraction).min(n2 as f64 / (1.0 - type1_fraction)).floor();
        let k1 = ((total * type1_fraction).round() as usize).min(n1);
        (k1, (total as usize - k1).min(n2))
    };
    let mut rng = seeded(seed);
    let mut pick = |n: usize, k: usize| {
        let mut v = sample(&mut rng, n, k).into_vec();
        v.sort_unstable();
        v
    };
    let (a, b) = (pick(n1, k1), pick(n2, k2));
    let mut out = generated.type1.select(&a);
    out.append(generated.type2.select(&b))?;
    Ok(out)
}

fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    io::write_net(model.net(), &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_detector(path: &Path, n: usize, weight: f64) -> Result<DetectorModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    DetectorModel::new(io::read_net(&mut r)?, n, weight)
}

/// Trains (or reloads) a detector of the given variant. The `n + 1`
/// variant gets `ood` as its extra class.
pub fn stage_detector(
    cfg: &ExperimentConfig,
    run: &RunDir,
    train: &LabeledDataset,
    ood: &OodBatch,
    variant: Variant,
) -> Result<DetectorModel> {
    let (name, label) = match variant {
        Variant::NPlus1 => ("train-detector", "detector"),
        Variant::PlainN => ("baselines", "plain"),
    };
    stage(name, (|| {
        let path = run.artifact(label, "bin");
        let n = train.n_classes();
        if run.is_sealed(label, std::slice::from_ref(&path)) {
            return load_detector(&path, n, cfg.ood_class_weight);
        }
        let mut rng = seeded(derive_seed(cfg.seed, label));
        let mut model = DetectorModel::init(train.dim(), n, &cfg.detector_hidden.0, variant, cfg.ood_class_weight, &mut rng)?;
        let tc = DetectorTrainConfig {
            epochs: cfg.detector_epochs,
            batch_size: cfg.detector_batch,
        };
        let mut opt = Optimizer::new(cfg.detector_optimizer, cfg.detector_lr)?;
        let empty = OodBatch::new(train.dim());
        let extra = if variant == Variant::NPlus1 { ood } else { &empty };
        let losses = train_detector(&mut model, train, extra, &tc, &mut opt, &mut rng)?;
        log::info!("{label}: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
        save_detector(&model, &path)?;
        run.seal(label, &[path])?;
        Ok(model)
    })())
}

/// Scores the held-out inliers and every OOD set under each rule; writes
/// one score CSV per (set, rule).
pub fn evaluate(
    run: &RunDir,
    in_name: &str,
    model: &DetectorModel,
    splits: &Splits,
    rules: &[ScoreRule],
) -> Result<Vec<MetricsReport>> {
    stage("evaluate", (|| {
        let mut reports = Vec::new();
        for rule in rules {
            let s_in = score(model, *rule, splits.test.samples())?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(run.artifact(&format!("scores-in-{rule}"), "csv"))?);
            s_in.write_csv(&mut w)?;
            for ds in &splits.ood {
                let s_out = score(model, *rule, ds.samples())?;
                let mut w = std::io::BufWriter::new(std::fs::File::create(
                    run.artifact(&format!("scores-{}-{rule}", ds.name), "csv"),
                )?);
                s_out.write_csv(&mut w)?;
                reports.push(MetricsReport::compute(in_name, &ds.name, rule.tag(), &s_in.scores, &s_out.scores)?);
            }
        }
        Ok(reports)
    })())
}

fn write_reports(run: &RunDir, stem: &str, reports: &[MetricsReport]) -> Result<PathBuf> {
    let csv = run.artifact(stem, "csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv)?);
    metrics::write_csv(reports, &mut w)?;
    w.flush()?;
    let json = serde_json::json!({
        "config_hash": run.hash,
        "seed": run.seed,
        "results": metrics::to_json(reports),
    });
    std::fs::write(run.artifact(stem, "json"), serde_json::to_string_pretty(&json)?)?;
    Ok(csv)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<MetricsReport>,
    /// Held-out classification accuracy, arg-max over the inlier outputs.
    pub accuracy: f64,
    /// Held-out accuracy with arg-max over every output, the OOD class included.
    pub argmax_accuracy: f64,
    pub metrics_csv: PathBuf,
    pub n_type1: usize,
    pub n_type2: usize,
}

fn write_manifest(cfg: &ExperimentConfig, run: &RunDir, extra: serde_json::Value) -> Result<()> {
    let path = run.artifact("run", "json");
    let mut doc = match std::fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str(&t).ok()) {
        Some(serde_json::Value::Object(m)) => m,
        _ => serde_json::Map::new(),
    };
    doc.insert("config".into(), serde_json::Value::String(cfg.to_text()));
    doc.insert("config_hash".into(), run.hash.clone().into());
    doc.insert("seed".into(), run.seed.into());
    doc.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    if let serde_json::Value::Object(m) = extra {
        doc.extend(m);
    }
    std::fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(doc))?)?;
    Ok(())
}

/// Full `n + 1` pipeline. Writes `metrics-*.csv/json` and `run-*.json`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run = RunDir::new(cfg)?;
    let splits = stage("data", prepare_data(cfg))?;
    let model = stage_cvae(cfg, &run, &splits.train)?;
    let generated = stage_generate(cfg, &run, &model, &splits.train)?;
    let ood = stage("train-detector", mix_ood(&generated, cfg.type1_fraction, derive_seed(cfg.seed, "mix")))?;
    let detector = stage_detector(cfg, &run, &splits.train, &ood, Variant::NPlus1)?;
    let accuracy = stage("evaluate", detector.accuracy(&splits.test))?;
    let argmax_accuracy = stage("evaluate", detector.argmax_accuracy(&splits.test))?;
    let reports = evaluate(&run, &cfg.name, &detector, &splits, &[ScoreRule::OodClassProb, ScoreRule::NegMaxInlierProb])?;
    let metrics_csv = write_reports(&run, "metrics", &reports)?;
    write_manifest(
        cfg,
        &run,
        serde_json::json!({
            "nplus1_accuracy": accuracy,
            "nplus1_argmax_accuracy": argmax_accuracy,
            "n_train": splits.train.len(),
            "n_test": splits.test.len(),
            "n_type1": generated.type1.len(),
            "n_type2": generated.type2.len(),
            "n_ood_train": ood.len(),
        }),
    )?;
    Ok(RunSummary {
        reports,
        accuracy,
        argmax_accuracy,
        metrics_csv,
        n_type1: generated.type1.len(),
        n_type2: generated.type2.len(),
    })
}

/// Plain `n`-class classifier scored by max-softmax and ODIN on the same
/// splits. Writes `baselines-*.csv/json`.
pub fn run_baselines(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run = RunDir::new(cfg)?;
    let splits = stage("data", prepare_data(cfg))?;
    let plain = stage_detector(cfg, &run, &splits.train, &OodBatch::new(splits.train.dim()), Variant::PlainN)?;
    let accuracy = stage("evaluate", plain.accuracy(&splits.test))?;
    let rules = [
        ScoreRule::NegMaxSoftmax,
        ScoreRule::NegOdin {
            temperature: cfg.odin_temperature,
            epsilon: cfg.odin_epsilon,
        },
    ];
    let reports = evaluate(&run, &cfg.name, &plain, &splits, &rules)?;
    let metrics_csv = write_reports(&run, "baselines", &reports)?;
    write_manifest(cfg, &run, serde_json::json!({ "plain_accuracy": accuracy }))?;
    Ok(RunSummary {
        reports,
        accuracy,
        argmax_accuracy: accuracy,
        metrics_csv,
        n_type1: 0,
        n_type2: 0,
    })
}

/// The rule with the highest mean AUROC. When a validation OOD set is
/// named, only its rows take part in the choice.
pub fn best_rule(reports: &[MetricsReport], validation_ood: &str) -> Option<(String, f64)> {
    let mut by_rule: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| validation_ood.is_empty() || r.ood_dataset == validation_ood) {
        let e = by_rule.entry(&r.rule).or_default();
        e.0 += r.auroc;
        e.1 += 1;
    }
    by_rule
        .into_iter()
        .map(|(k, (s, n))| (k.to_owned(), s / n as f64))
        .max_by(|a, b| a.1.total_cmp(&b.1))
}

/// Reads every `metrics-*.csv` and `baselines-*.csv` under `dir`.
pub fn collect_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            (name.starts_with("metrics-") || name.starts_with("baselines-")) && name.ends_with(".csv")
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p)?;
        for (k, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format {
                path: p.clone(),
                offset: text.lines().take(k).map(|l| l.len() as u64 + 1).sum(),
                message: "malformed metrics row".into(),
            };
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            out.push(MetricsReport {
                in_dataset: f[0].into(),
                ood_dataset: f[1].into(),
                rule: f[2].into(),
                n_in: f[3].parse().map_err(|_| bad())?,
                n_out: f[4].parse().map_err(|_| bad())?,
                fpr_at_95_tpr: num(5)?,
                detection_error: num(6)?,
                auroc: num(7)?,
                aupr_in: num(8)?,
                aupr_out: num(9)?,
            });
        }
    }
    Ok(out)
}

/// Table of every report under `dir` plus the best rule by mean AUROC.
pub fn report(dir: &Path, validation_ood: &str) -> Result<String> {
    let reports = collect_reports(dir)?;
    if reports.is_empty() {
        return Err(Error::contract(format!("no metrics files in {}", dir.display())));
    }
    let mut s = metrics::format_table(&reports);
    if let Some((rule, auroc)) = best_rule(&reports, validation_ood) {
        s.push_str(&format!("best rule by mean AUROC: {rule} ({:.1})\n", 100.0 * auroc));
    }
    Ok(s)
}

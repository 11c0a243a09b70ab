//! Softmax classifiers used as OOD detectors, and their scoring rules.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::OodBatch;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, weighted_cross_entropy, Activation, DenseNet, Graph, Optimizer, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `n + 1` outputs, the last one being the OOD class.
    NPlus1,
    /// `n` outputs, trained on inliers only.
    PlainN,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    net: DenseNet,
    n_inlier: usize,
    ood_class_weight: f64,
    variant: Variant,
}

impl DetectorModel {
    /// Wraps a softmax network. The variant follows from its width.
    pub fn new(net: DenseNet, n_inlier: usize, ood_class_weight: f64) -> Result<Self> {
        if net.output_activation() != Activation::Softmax {
            return Err(Error::contract("detector network must end in softmax"));
        }
        let variant = if net.output_dim() == n_inlier + 1 {
            Variant::NPlus1
        } else if net.output_dim() == n_inlier {
            Variant::PlainN
        } else {
            return Err(Error::contract(format!(
                "detector has {} outputs for {n_inlier} inlier classes",
                net.output_dim()
            )));
        };
        if n_inlier == 0 {
            return Err(Error::contract("need at least one inlier class"));
        }
        Ok(Self {
            net,
            n_inlier,
            ood_class_weight,
            variant,
        })
    }

    /// Glorot-initialized ReLU network.
    pub fn init(
        input_dim: usize,
        n_inlier: usize,
        hidden: &[usize],
        variant: Variant,
        ood_class_weight: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(match variant {
            Variant::NPlus1 => n_inlier + 1,
            Variant::PlainN => n_inlier,
        });
        Self::new(DenseNet::glorot(&widths, Activation::Relu, Activation::Softmax, rng)?, n_inlier, ood_class_weight)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn into_net(self) -> DenseNet {
        self.net
    }

    pub fn n_inlier(&self) -> usize {
        self.n_inlier
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn ood_class_weight(&self) -> f64 {
        self.ood_class_weight
    }

    /// Per-class loss weights: 1 for inliers, `ood_class_weight` for the OOD class.
    pub fn class_weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.n_inlier];
        if self.variant == Variant::NPlus1 {
            w.push(self.ood_class_weight);
        }
        w
    }

    /// Softmax outputs, one row per sample of the flat `samples` buffer.
    pub fn probabilities(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        let dim = self.net.input_dim();
        if samples.len() % dim != 0 {
            return Err(Error::Dimension {
                layer: 0,
                expected: dim,
                got: samples.len() % dim,
            });
        }
        let chunks: Vec<Result<Tensor>> = samples
            .par_chunks(256 * dim)
            .map(|c| self.net.predict(&Tensor::matrix(c.len() / dim, dim, c.to_vec())?))
            .collect();
        let mut rows = Vec::with_capacity(samples.len() / dim);
        for t in chunks {
            let t = t?;
            rows.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
        }
        Ok(rows)
    }

    /// Classification accuracy: share of samples whose arg-max over the
    /// inlier outputs equals the label. Rejection is left to the OOD score.
    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        self.hit_rate(ds, self.n_inlier)
    }

    /// Share of samples whose arg-max over all outputs equals the label. For
    /// the `n + 1` variant a prediction of the OOD class counts as an error.
    pub fn argmax_accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        self.hit_rate(ds, self.net.output_dim())
    }

    fn hit_rate(&self, ds: &LabeledDataset, width: usize) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::contract("accuracy of an empty dataset"));
        }
        let probs = self.probabilities(ds.samples())?;
        let hits = probs
            .iter()
            .zip(ds.labels())
            .filter(|(p, &y)| argmax(&p[..width]) == y)
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
        }
    }
}

/// Minibatch training with per-class weighted cross-entropy. Inliers keep
/// their labels; every OOD sample gets label `n`. An `n + 1` model with an
/// empty OOD batch trains on inliers alone. Returns the mean loss per epoch.
pub fn train_detector(
    model: &mut DetectorModel,
    inliers: &LabeledDataset,
    ood: &OodBatch,
    cfg: &DetectorTrainConfig,
    opt: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let dim = model.net.input_dim();
    if inliers.is_empty() {
        return Err(Error::contract("detector training needs inliers"));
    }
    if inliers.dim() != dim {
        return Err(Error::Dimension {
            layer: 0,
            expected: dim,
            got: inliers.dim(),
        });
    }
    if let Some(&bad) = inliers.labels().iter().find(|&&y| y >= model.n_inlier) {
        return Err(Error::contract(format!("inlier label {bad} is not below n = {}", model.n_inlier)));
    }
    let use_ood = match model.variant {
        Variant::PlainN => {
            if !ood.is_empty() {
                return Err(Error::contract("a plain n-class model cannot take OOD samples"));
            }
            false
        }
        Variant::NPlus1 if ood.is_empty() => {
            log::warn!("empty OOD batch: training the n + 1 model on inliers only");
            false
        }
        Variant::NPlus1 => {
            if ood.dim() != dim {
                return Err(Error::Dimension {
                    layer: 0,
                    expected: dim,
                    got: ood.dim(),
                });
            }
            true
        }
    };
    // (is_ood, index)
    let mut items: Vec<(bool, usize)> = (0..inliers.len()).map(|i| (false, i)).collect();
    if use_ood {
        items.extend((0..ood.len()).map(|i| (true, i)));
    }
    let weights = model.class_weights();
    let ood_label = model.n_inlier;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        items.shuffle(rng);
        let mut sum = 0.0;
        for chunk in items.chunks(cfg.batch_size.max(1)) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &(is_ood, i) in chunk {
                if is_ood {
                    x.extend_from_slice(ood.sample(i));
                    labels.push(ood_label);
                } else {
                    x.extend_from_slice(inliers.sample(i));
                    labels.push(inliers.label(i));
                }
            }
            let mut g = Graph::new();
            let input = g.constant(Tensor::matrix(chunk.len(), dim, x)?);
            let bound = model.net.forward(&mut g, input)?;
            let loss = weighted_cross_entropy(&mut g, bound.output, &labels, &weights)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::numeric("detector loss became non-finite"));
            }
            g.backward(loss)?;
            model.net.accumulate_grads(&g, &bound);
            opt.step(model.net.params_mut())?;
            sum += value * chunk.len() as f64;
        }
        losses.push(sum / items.len() as f64);
    }
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScoreRule {
    /// Probability of the OOD class.
    OodClassProb,
    /// Negated largest inlier-class probability.
    NegMaxInlierProb,
    /// Negated largest softmax output.
    NegMaxSoftmax,
    /// Negated largest temperature-scaled softmax output after an input step
    /// against the gradient of the predicted class's loss.
    NegOdin { temperature: f64, epsilon: f64 },
}

impl ScoreRule {
    pub fn tag(&self) -> &'static str {
        match self {
            ScoreRule::OodClassProb => "ood_class_prob",
            ScoreRule::NegMaxInlierProb => "neg_max_inlier_prob",
            ScoreRule::NegMaxSoftmax => "neg_max_softmax",
            ScoreRule::NegOdin { .. } => "neg_odin",
        }
    }
}

impl fmt::Display for ScoreRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScoreRule {
    type Err = Error;

    /// Parses a tag; ODIN gets its default parameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ood_class_prob" => ScoreRule::OodClassProb,
            "neg_max_inlier_prob" => ScoreRule::NegMaxInlierProb,
            "neg_max_softmax" => ScoreRule::NegMaxSoftmax,
            "neg_odin" => ScoreRule::NegOdin {
                temperature: 1000.0,
                epsilon: 0.0014,
            },
            other => return Err(Error::Config(format!("unknown scoring rule `{other}`"))),
        })
    }
}

/// One score per sample; larger means more OOD.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub rule: ScoreRule,
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "id,score,rule")?;
        for (id, s) in self.ids.iter().zip(&self.scores) {
            writeln!(w, "{id},{s:?},{}", self.rule)?;
        }
        Ok(())
    }
}

/// OOD-class probability of one sample; only defined for `n + 1` models.
pub fn score_ood_class_prob(model: &DetectorModel, x: &[f64]) -> Result<f64> {
    Ok(score(model, ScoreRule::OodClassProb, x)?.scores[0])
}

pub fn score_max_inlier_prob(model: &DetectorModel, x: &[f64]) -> Result<f64> {
    Ok(score(model, ScoreRule::NegMaxInlierProb, x)?.scores[0])
}

pub fn score_max_softmax_baseline(model: &DetectorModel, x: &[f64]) -> Result<f64> {
    Ok(score(model, ScoreRule::NegMaxSoftmax, x)?.scores[0])
}

pub fn score_odin_baseline(model: &DetectorModel, x: &[f64], temperature: f64, epsilon: f64) -> Result<f64> {
    Ok(score(model, ScoreRule::NegOdin { temperature, epsilon }, x)?.scores[0])
}

fn neg_max(p: &[f64]) -> f64 {
    -p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Scores every sample of the flat `samples` buffer under `rule`.
pub fn score(model: &DetectorModel, rule: ScoreRule, samples: &[f64]) -> Result<ScoreVector> {
    let scores: Vec<f64> = match rule {
        ScoreRule::OodClassProb => {
            if model.variant != Variant::NPlus1 {
                return Err(Error::contract("OOD-class probability needs an n + 1 model"));
            }
            model.probabilities(samples)?.iter().map(|p| p[model.n_inlier]).collect()
        }
        ScoreRule::NegMaxInlierProb => model
            .probabilities(samples)?
            .iter()
            .map(|p| neg_max(&p[..model.n_inlier]))
            .collect(),
        ScoreRule::NegMaxSoftmax => model.probabilities(samples)?.iter().map(|p| neg_max(p)).collect(),
        ScoreRule::NegOdin { temperature, epsilon } => odin_scores(model, samples, temperature, epsilon)?,
    };
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric(format!("{rule} produced a non-finite score")));
    }
    Ok(ScoreVector {
        rule,
        ids: (0..scores.len()).collect(),
        scores,
    })
}

fn odin_scores(model: &DetectorModel, samples: &[f64], temperature: f64, epsilon: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::contract("ODIN temperature must be positive"));
    }
    let dim = model.net.input_dim();
    if samples.len() % dim != 0 {
        return Err(Error::Dimension {
            layer: 0,
            expected: dim,
            got: samples.len() % dim,
        });
    }
    let k = model.net.output_dim();
    let chunks: Vec<Result<Vec<f64>>> = samples
        .par_chunks(128 * dim)
        .map(|c| {
            let n = c.len() / dim;
            let mut x = c.to_vec();
            if epsilon != 0.0 {
                let mut g = Graph::new();
                let input = g.variable(Tensor::matrix(n, dim, x.clone())?);
                let bound = model.net.forward_logits(&mut g, input)?;
                let logits = g.value(bound.output).clone();
                let labels: Vec<usize> = (0..n).map(|r| argmax(logits.row_slice(r))).collect();
                let scaled = g.scale(bound.output, 1.0 / temperature);
                let probs = g.softmax(scaled);
                let loss = weighted_cross_entropy(&mut g, probs, &labels, &vec![1.0; k])?;
                g.backward(loss)?;
                let grad = g.grad(input).expect("input is a variable").data();
                for (xi, gi) in x.iter_mut().zip(grad) {
                    if *gi != 0.0 {
                        *xi -= epsilon * gi.signum();
                    }
                }
            }
            let logits = model.net.predict_logits(&Tensor::matrix(n, dim, x)?)?;
            Ok((0..n)
                .map(|r| {
                    let mut row: Vec<f64> = logits.row_slice(r).iter().map(|l| l / temperature).collect();
                    softmax_in_place(&mut row);
                    neg_max(&row)
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len() / dim);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

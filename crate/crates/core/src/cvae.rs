//! Conditional VAE. The one-hot class label is concatenated to both the
//! encoder input and the decoder input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{io, vae_loss, Activation, DenseNet, Graph, Optimizer, Reconstruction, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    encoder: DenseNet,
    decoder: DenseNet,
    latent_dim: usize,
    n_classes: usize,
    reconstruction: Reconstruction,
}

impl CvaeModel {
    /// Glorot-initialized model with ReLU hidden layers.
    pub fn new(
        input_dim: usize,
        n_classes: usize,
        latent_dim: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        reconstruction: Reconstruction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut enc = vec![input_dim + n_classes];
        enc.extend_from_slice(encoder_hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim + n_classes];
        dec.extend_from_slice(decoder_hidden);
        dec.push(input_dim);
        let encoder = DenseNet::glorot(&enc, Activation::Relu, Activation::Linear, rng)?;
        let decoder = DenseNet::glorot(&dec, Activation::Relu, output_activation(reconstruction), rng)?;
        Self::from_nets(encoder, decoder, latent_dim, n_classes, reconstruction)
    }

    pub fn from_nets(
        encoder: DenseNet,
        decoder: DenseNet,
        latent_dim: usize,
        n_classes: usize,
        reconstruction: Reconstruction,
    ) -> Result<Self> {
        if latent_dim == 0 || n_classes == 0 {
            return Err(Error::contract("latent_dim and n_classes must be positive"));
        }
        if encoder.output_dim() != 2 * latent_dim {
            return Err(Error::contract(format!(
                "encoder emits {} values, expected 2·{latent_dim}",
                encoder.output_dim()
            )));
        }
        if decoder.input_dim() != latent_dim + n_classes {
            return Err(Error::contract("decoder input must be latent_dim + n_classes"));
        }
        if encoder.input_dim() != decoder.output_dim() + n_classes {
            return Err(Error::contract("encoder input must be input_dim + n_classes"));
        }
        if decoder.output_activation() != output_activation(reconstruction) {
            return Err(Error::contract("decoder output activation does not match the likelihood"));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            n_classes,
            reconstruction,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn reconstruction(&self) -> Reconstruction {
        self.reconstruction
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.all_finite() && self.decoder.all_finite()
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.n_classes {
            return Err(Error::contract(format!(
                "label {label} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn with_one_hot(&self, x: &[f64], label: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + self.n_classes);
        v.extend_from_slice(x);
        v.extend((0..self.n_classes).map(|k| if k == label { 1.0 } else { 0.0 }));
        v
    }

    /// Posterior mean and log-variance for one input.
    pub fn encode(&self, x: &[f64], label: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_label(label)?;
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let out = self.encoder.predict(&Tensor::row(self.with_one_hot(x, label)))?;
        let d = self.latent_dim;
        Ok((out.data()[..d].to_vec(), out.data()[d..].to_vec()))
    }

    /// Posterior means for every sample of a labeled dataset, row-major `len × latent_dim`.
    pub fn encode_means(&self, ds: &LabeledDataset) -> Result<Vec<f64>> {
        if let Some(&bad) = ds.labels().iter().find(|&&y| y >= self.n_classes) {
            self.check_label(bad)?;
        }
        let d = self.latent_dim;
        let mut codes = Vec::with_capacity(ds.len() * d);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(512) {
            let input = self.conditioned_batch(ds, chunk);
            let out = self.encoder.predict(&input)?;
            for r in 0..chunk.len() {
                codes.extend_from_slice(&out.row_slice(r)[..d]);
            }
        }
        Ok(codes)
    }

    pub fn decode(&self, z: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_label(label)?;
        if z.len() != self.latent_dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        Ok(self
            .decoder
            .predict(&Tensor::row(self.with_one_hot(z, label)))?
            .into_data())
    }

    /// Decoder output at `z` and its Jacobian columns: row `j` of the returned
    /// tensor is `∂ decode(z, label) / ∂ z_j`.
    pub fn decoder_jvp(&self, z: &[f64], label: usize) -> Result<(Vec<f64>, Tensor)> {
        self.check_label(label)?;
        let d = self.latent_dim;
        let width = d + self.n_classes;
        let mut tangents = vec![0.0; d * width];
        for j in 0..d {
            tangents[j * width + j] = 1.0;
        }
        self.decoder.jvp(&self.with_one_hot(z, label), &Tensor::matrix(d, width, tangents)?)
    }

    fn conditioned_batch(&self, ds: &LabeledDataset, idx: &[usize]) -> Tensor {
        let w = self.input_dim() + self.n_classes;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend(self.with_one_hot(ds.sample(i), ds.label(i)));
        }
        Tensor::matrix(idx.len(), w, data).expect("batch shape")
    }

    /// Writes both networks in the binary weight format to `path` and a
    /// plain-text metadata record to `path.meta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        io::write_net(&self.encoder, &mut w)?;
        io::write_net(&self.decoder, &mut w)?;
        w.flush()?;
        let mut meta = format!(
            "latent_dim={}\nn_classes={}\ninput_dim={}\n",
            self.latent_dim,
            self.n_classes,
            self.input_dim()
        );
        match self.reconstruction {
            Reconstruction::Bernoulli => meta.push_str("reconstruction=bernoulli\n"),
            Reconstruction::Gaussian { sigma } => {
                meta.push_str(&format!("reconstruction=gaussian\nsigma={sigma:?}\n"))
            }
        }
        std::fs::write(meta_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = std::fs::read_to_string(meta_path(path))?;
        let get = |key: &str| -> Result<&str> {
            meta.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| Error::Config(format!("missing `{key}` in CVAE metadata")))
        };
        let parse = |key: &str| -> Result<usize> {
            get(key)?
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad `{key}` in CVAE metadata")))
        };
        let latent_dim = parse("latent_dim")?;
        let n_classes = parse("n_classes")?;
        let input_dim = parse("input_dim")?;
        let reconstruction = match get("reconstruction")?.trim() {
            "bernoulli" => Reconstruction::Bernoulli,
            "gaussian" => Reconstruction::Gaussian {
                sigma: get("sigma")?
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config("bad `sigma` in CVAE metadata".into()))?,
            },
            other => return Err(Error::Config(format!("unknown reconstruction `{other}`"))),
        };
        let mut r = BufReader::new(File::open(path)?);
        let encoder = io::read_net(&mut r)?;
        let decoder = io::read_net(&mut r)?;
        let model = Self::from_nets(encoder, decoder, latent_dim, n_classes, reconstruction)?;
        if model.input_dim() != input_dim {
            return Err(Error::Config("CVAE metadata input_dim disagrees with weights".into()));
        }
        Ok(model)
    }
}

fn output_activation(r: Reconstruction) -> Activation {
    match r {
        Reconstruction::Bernoulli => Activation::Sigmoid,
        Reconstruction::Gaussian { .. } => Activation::Linear,
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// `mu + exp(logvar / 2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (0.5 * l).exp() * e
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CvaeTrainConfig {
    /// Epoch cap.
    pub epochs: usize,
    pub batch_size: usize,
    pub beta_kl: f64,
    /// Stop once the epoch loss has improved by less than `rel_tol` for
    /// `patience` consecutive epochs. `None` always runs to the cap.
    pub convergence: Option<(f64, usize)>,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            beta_kl: 1.0,
            convergence: Some((1e-3, 10)),
        }
    }
}

/// Per-epoch means of the negative ELBO and its two parts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvaeTrainingLog {
    pub loss: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
}

pub fn train_cvae(
    model: &mut CvaeModel,
    ds: &LabeledDataset,
    cfg: &CvaeTrainConfig,
    opt: &mut Optimizer,
    rng: &mut impl Rng,
) -> Result<CvaeTrainingLog> {
    if ds.is_empty() {
        return Err(Error::contract("cannot train a CVAE on an empty dataset"));
    }
    if ds.dim() != model.input_dim() {
        return Err(Error::Dimension {
            layer: 0,
            expected: model.input_dim(),
            got: ds.dim(),
        });
    }
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= model.n_classes) {
        model.check_label(bad)?;
    }
    if model.reconstruction == Reconstruction::Bernoulli && ds.samples().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("Bernoulli CVAE needs pixels in [0, 1]"));
    }
    let mut log = CvaeTrainingLog::default();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let d = model.latent_dim;
    let batch_size = cfg.batch_size.max(1);
    let mut stale = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum_loss, mut sum_rec, mut sum_kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let mut g = Graph::new();
            let enc_in = g.constant(model.conditioned_batch(ds, chunk));
            let enc = model.encoder.forward(&mut g, enc_in)?;
            let mu = g.slice_cols(enc.output, 0, d)?;
            let logvar = g.slice_cols(enc.output, d, 2 * d)?;
            let eps: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
            let eps = g.constant(Tensor::matrix(b, d, eps)?);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, eps)?;
            let z = g.add(mu, noise)?;
            let mut onehot = vec![0.0; b * model.n_classes];
            for (r, &i) in chunk.iter().enumerate() {
                onehot[r * model.n_classes + ds.label(i)] = 1.0;
            }
            let onehot = g.constant(Tensor::matrix(b, model.n_classes, onehot)?);
            let dec_in = g.concat_cols(z, onehot)?;
            let dec = model.decoder.forward(&mut g, dec_in)?;
            let target = ds.batch(chunk).into_data();
            let loss = vae_loss(&mut g, &target, dec.output, mu, logvar, cfg.beta_kl, model.reconstruction)?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::numeric("CVAE loss became non-finite"));
            }
            g.backward(loss.total)?;
            model.encoder.accumulate_grads(&g, &enc);
            model.decoder.accumulate_grads(&g, &dec);
            opt.step(model.encoder.params_mut().chain(model.decoder.params_mut()))?;
            sum_loss += total * b as f64;
            sum_rec += g.value(loss.reconstruction).item() * b as f64;
            sum_kl += g.value(loss.kl).item() * b as f64;
        }
        let n = ds.len() as f64;
        let epoch_loss = sum_loss / n;
        if let (Some((tol, patience)), Some(&prev)) = (cfg.convergence, log.loss.last()) {
            if prev - epoch_loss < tol * prev.abs() {
                stale += 1;
            } else {
                stale = 0;
            }
            log.loss.push(epoch_loss);
            log.reconstruction.push(sum_rec / n);
            log.kl.push(sum_kl / n);
            if stale >= patience {
                log::info!("CVAE converged after {} epochs", log.loss.len());
                break;
            }
            continue;
        }
        log.loss.push(epoch_loss);
        log.reconstruction.push(sum_rec / n);
        log.kl.push(sum_kl / n);
    }
    Ok(log)
}

/// Mean per-feature reconstruction error of the deterministic (posterior
/// mean) autoencoding: BCE for Bernoulli models, squared error otherwise.
pub fn mean_reconstruction_error(model: &CvaeModel, ds: &LabeledDataset) -> Result<f64> {
    let codes = model.encode_means(ds)?;
    let d = model.latent_dim;
    let mut total = 0.0;
    for i in 0..ds.len() {
        let xh = model.decode(&codes[i * d..(i + 1) * d], ds.label(i))?;
        for (p, x) in xh.iter().zip(ds.sample(i)) {
            total += match model.reconstruction {
                Reconstruction::Bernoulli => {
                    -(x * p.max(crate::nn::LOG_FLOOR).ln()
                        + (1.0 - x) * (1.0 - p).max(crate::nn::LOG_FLOOR).ln())
                }
                Reconstruction::Gaussian { .. } => (p - x) * (p - x),
            };
        }
    }
    Ok(total / (ds.len() * ds.dim()).max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ValueRange;
    use crate::nn::Layer;
    use crate::rng::seeded;

    fn zero_model(input: usize, classes: usize, latent: usize) -> CvaeModel {
        let enc = DenseNet::zeros(&[input + classes, 2 * latent], Activation::Relu, Activation::Linear).unwrap();
        let dec = DenseNet::zeros(&[latent + classes, input], Activation::Relu, Activation::Sigmoid).unwrap();
        CvaeModel::from_nets(enc, dec, latent, classes, Reconstruction::Bernoulli).unwrap()
    }

    #[test]
    fn zero_encoder_gives_prior() {
        let m = zero_model(4, 2, 3);
        let (mu, lv) = m.encode(&[0.3, 0.9, 0.1, 0.0], 1).unwrap();
        assert_eq!(mu, vec![0.0; 3]);
        assert_eq!(lv, vec![0.0; 3]);
    }

    #[test]
    fn zero_decoder_gives_half() {
        let m = zero_model(4, 2, 3);
        assert_eq!(m.decode(&[1.0, -2.0, 0.5], 0).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn labels_are_checked() {
        let m = zero_model(4, 2, 3);
        assert!(matches!(m.encode(&[0.0; 4], 2), Err(Error::Contract(_))));
        assert!(matches!(m.decode(&[0.0; 3], 5), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_set_single_layer_maps() {
        // encoder: 2 pixels + 2 classes → (mu, logvar), latent 1
        // W = [[1, 2, 0.5, -0.5], [0, -1, 1, 0]], b = [0.1, -0.2]
        let enc = DenseNet::new(vec![Layer::new(
            2,
            4,
            vec![1.0, 2.0, 0.5, -0.5, 0.0, -1.0, 1.0, 0.0],
            vec![0.1, -0.2],
            Activation::Linear,
        )
        .unwrap()])
        .unwrap();
        // decoder: latent 1 + 2 classes → 2 pixels, W = [[2, 0, 1], [-1, 1, 0]], b = [0, 0.5]
        let dec = DenseNet::new(vec![Layer::new(
            2,
            3,
            vec![2.0, 0.0, 1.0, -1.0, 1.0, 0.0],
            vec![0.0, 0.5],
            Activation::Sigmoid,
        )
        .unwrap()])
        .unwrap();
        let m = CvaeModel::from_nets(enc, dec, 1, 2, Reconstruction::Bernoulli).unwrap();
        // x = [0.2, 0.4], label 1 → input [0.2, 0.4, 0, 1]
        // mu = 0.2 + 0.8 - 0.5 + 0.1 = 0.6 ; logvar = -0.4 - 0.2 = -0.6
        let (mu, lv) = m.encode(&[0.2, 0.4], 1).unwrap();
        assert!((mu[0] - 0.6).abs() < 1e-15);
        assert!((lv[0] + 0.6).abs() < 1e-15);
        // z = 0.25, label 1 → [0.25, 0, 1]; pre = [0.5 + 1, -0.25 + 0.5]
        let xh = m.decode(&[0.25], 1).unwrap();
        assert!((xh[0] - sigmoid_ref(1.5)).abs() < 1e-15);
        assert!((xh[1] - sigmoid_ref(0.25)).abs() < 1e-15);
        assert_eq!(m.encode(&[0.2, 0.4], 1).unwrap(), (mu, lv));
    }

    fn sigmoid_ref(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn reparameterize_limits_and_moments() {
        let mut rng = seeded(21);
        let z = reparameterize(&[0.3, -1.0], &[-50.0, -50.0], &mut rng);
        assert!((z[0] - 0.3).abs() < 1e-9 && (z[1] + 1.0).abs() < 1e-9);
        let draws: Vec<f64> = (0..10_000).map(|_| reparameterize(&[0.0], &[0.0], &mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1);
        assert_eq!(
            reparameterize(&[0.0; 3], &[0.0; 3], &mut seeded(5)),
            reparameterize(&[0.0; 3], &[0.0; 3], &mut seeded(5))
        );
    }

    #[test]
    fn zero_epochs_is_noop() {
        let mut rng = seeded(1);
        let mut m = CvaeModel::new(4, 2, 2, &[8], &[8], Reconstruction::Bernoulli, &mut rng).unwrap();
        let before = m.clone();
        let ds = LabeledDataset::new("d", 4, vec![0.5; 8], vec![0, 1], ValueRange::Unit).unwrap();
        let cfg = CvaeTrainConfig { epochs: 0, ..Default::default() };
        let log = train_cvae(&mut m, &ds, &cfg, &mut Optimizer::adam(1e-3).unwrap(), &mut rng).unwrap();
        assert!(log.loss.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut rng = seeded(1);
        let mut m = CvaeModel::new(4, 2, 2, &[8], &[8], Reconstruction::Bernoulli, &mut rng).unwrap();
        let ds = LabeledDataset::new("d", 4, vec![], vec![], ValueRange::Unit).unwrap();
        let r = train_cvae(&mut m, &ds, &CvaeTrainConfig::default(), &mut Optimizer::adam(1e-3).unwrap(), &mut rng);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn memorizes_single_sample() {
        let mut rng = seeded(2);
        let x = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let ds = LabeledDataset::new("one", 8, x.repeat(16), vec![0; 16], ValueRange::Unit).unwrap();
        let mut m = CvaeModel::new(8, 1, 2, &[16], &[16], Reconstruction::Bernoulli, &mut rng).unwrap();
        let cfg = CvaeTrainConfig { epochs: 200, batch_size: 16, beta_kl: 1.0, convergence: None };
        let log = train_cvae(&mut m, &ds, &cfg, &mut Optimizer::adam(1e-2).unwrap(), &mut rng).unwrap();
        assert_eq!(log.loss.len(), 200);
        let err = mean_reconstruction_error(&m, &ds).unwrap();
        assert!(err < 0.1, "per-pixel BCE {err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = CvaeModel::new(5, 3, 2, &[7], &[6], Reconstruction::Gaussian { sigma: 0.1 }, &mut seeded(8)).unwrap();
        let p = dir.path().join("cvae.bin");
        m.save(&p).unwrap();
        let meta = std::fs::read_to_string(meta_path(&p)).unwrap();
        assert!(meta.contains("latent_dim=2") && meta.contains("n_classes=3") && meta.contains("input_dim=5"));
        assert_eq!(CvaeModel::load(&p).unwrap(), m);
    }
}

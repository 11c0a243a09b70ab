use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::Result;

/// Mean over the batch of `w[y] · −ln p[y]`; `probs` are softmax outputs.
pub fn weighted_cross_entropy(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<Var> {
    g.weighted_nll(probs, labels, class_weights)
}

/// Likelihood used for the reconstruction term of the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Reconstruction {
    /// Per-pixel binary cross-entropy against sigmoid outputs; data in [0, 1].
    Bernoulli,
    /// Isotropic Gaussian with fixed standard deviation; unbounded data.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// Negative ELBO: reconstruction negative log-likelihood summed over features
/// plus `beta_kl` times the KL divergence to the standard normal prior, both
/// averaged over the batch.
pub fn vae_loss(
    g: &mut Graph,
    x: &[f64],
    x_hat: Var,
    mu: Var,
    logvar: Var,
    beta_kl: f64,
    recon: Reconstruction,
) -> Result<VaeLoss> {
    let reconstruction = match recon {
        Reconstruction::Bernoulli => g.bce(x_hat, x)?,
        Reconstruction::Gaussian { sigma } => {
            g.squared_error(x_hat, x, 0.5 / (sigma * sigma))?
        }
    };
    let kl = g.kl_std_normal(mu, logvar)?;
    let weighted = g.scale(kl, beta_kl);
    let total = g.add(reconstruction, weighted)?;
    Ok(VaeLoss {
        total,
        reconstruction,
        kl,
    })
}

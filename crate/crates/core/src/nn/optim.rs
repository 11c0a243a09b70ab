use serde::{Deserialize, Serialize};

use super::dense::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adadelta" => Ok(Self::Adadelta),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adadelta => "adadelta",
            Self::Adam => "adam",
        })
    }
}

/// Optimizer with per-parameter accumulators. Accumulators are created on
/// the first step and mirror the parameter list passed in; later steps must
/// pass the same parameters in the same order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    /// Adadelta decay.
    pub rho: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        let epsilon = match kind {
            OptimizerKind::Adam => 1e-8,
            _ => 1e-6,
        };
        Ok(Self {
            kind,
            learning_rate,
            rho: 0.95,
            epsilon,
            beta1: 0.9,
            beta2: 0.999,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adadelta(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adadelta, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Accumulator shapes, one entry per parameter (empty before the first step).
    pub fn state_shapes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    /// Applies one update to every parameter and zeroes their gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        let mut params: Vec<&mut Param> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| !p.has_grad()) {
            return Err(Error::contract(format!(
                "parameter {i} has no gradient; run backward first"
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(&params).any(|(s, p)| s.len() != p.len())
        {
            return Err(Error::contract("parameter list changed between steps"));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        let (rho, eps) = (self.rho, self.epsilon);
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.steps as i32;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = p.value_and_grad();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in value.iter_mut().zip(grad) {
                        *x -= lr * g;
                    }
                }
                OptimizerKind::Adadelta => {
                    // m: running E[g²], v: running E[Δx²]
                    for (((x, g), eg), ed) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *eg = rho * *eg + (1.0 - rho) * g * g;
                        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                        *ed = rho * *ed + (1.0 - rho) * delta * delta;
                        *x += lr * delta;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    for (((x, g), mi), vi) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Param {
        let mut p = Param::new(vec![v]);
        p.accumulate(&[g]);
        p
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut p = param(1.0, 2.0);
        opt.step([&mut p]).unwrap();
        assert!((p.value()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad(), &[0.0]);
        assert!(!p.has_grad());
    }

    #[test]
    fn adadelta_zero_gradient_is_noop() {
        let mut opt = Optimizer::adadelta(1.0).unwrap();
        let mut p = param(0.7, 0.0);
        opt.step([&mut p]).unwrap();
        assert_eq!(p.value()[0], 0.7);
    }

    #[test]
    fn adadelta_matches_scalar_recurrence() {
        // Hand-rolled Zeiler recurrences with rho = 0.95, eps = 1e-6, lr = 0.5.
        let (rho, eps, lr, g) = (0.95_f64, 1e-6_f64, 0.5_f64, 0.3_f64);
        let (mut x, mut eg2, mut edx2) = (2.0_f64, 0.0_f64, 0.0_f64);
        let mut trace = Vec::new();
        for _ in 0..2 {
            eg2 = rho * eg2 + (1.0 - rho) * g * g;
            let dx = -(edx2 + eps).sqrt() / (eg2 + eps).sqrt() * g;
            edx2 = rho * edx2 + (1.0 - rho) * dx * dx;
            x += lr * dx;
            trace.push(x);
        }
        let mut opt = Optimizer::adadelta(lr).unwrap();
        let mut p = Param::new(vec![2.0]);
        for expected in trace {
            p.accumulate(&[g]);
            opt.step([&mut p]).unwrap();
            assert_eq!(p.value()[0], expected);
        }
        assert_eq!(opt.state_shapes(), vec![1]);
    }

    #[test]
    fn step_without_gradient_is_rejected() {
        let mut opt = Optimizer::adam(0.01).unwrap();
        let mut p = Param::new(vec![1.0, 2.0]);
        assert!(matches!(opt.step([&mut p]), Err(Error::Contract(_))));
    }

    #[test]
    fn accumulators_mirror_parameter_shapes() {
        let mut opt = Optimizer::adam(0.01).unwrap();
        let mut a = Param::new(vec![1.0; 3]);
        let mut b = Param::new(vec![1.0; 5]);
        a.accumulate(&[0.1; 3]);
        b.accumulate(&[0.1; 5]);
        opt.step([&mut a, &mut b]).unwrap();
        assert_eq!(opt.state_shapes(), vec![3, 5]);
    }
}

#![allow(dead_code)]

use manifold_ood::nn::{Activation, Bound, DenseNet, Graph, Tensor, Var};
use manifold_ood::rng::seeded;
use rand::Rng;

const STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Case {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub batch: usize,
    pub seed: u64,
}

pub fn loss_of(net: &DenseNet, x: &Tensor, labels: &[usize], target: &[f64]) -> (f64, Graph, Bound, Var) {
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let bound = net.forward(&mut g, input).unwrap();
    let loss = match net.output_activation() {
        Activation::Softmax => {
            let w: Vec<f64> = (0..net.output_dim()).map(|k| 1.0 - 0.3 * k as f64 / net.output_dim() as f64).collect();
            g.weighted_nll(bound.output, labels, &w).unwrap()
        }
        Activation::Sigmoid => g.bce(bound.output, target).unwrap(),
        _ => g.squared_error(bound.output, target, 0.5).unwrap(),
    };
    (g.value(loss).item(), g, bound, loss)
}

/// Autodiff against central differences; returns the worst relative error
/// over all parameters whose one-sided differences agree (no kink crossed).
pub fn worst_relative_error(case: &Case) -> f64 {
    let mut rng = seeded(case.seed);
    let mut net = DenseNet::glorot(&case.widths, case.hidden, case.output, &mut rng).unwrap();
    // random biases so relu units are not all active at the origin
    for layer in net.layers_mut() {
        for b in layer.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let d_in = case.widths[0];
    let d_out = *case.widths.last().unwrap();
    let x = Tensor::matrix(case.batch, d_in, (0..case.batch * d_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..case.batch).map(|_| rng.random_range(0..d_out)).collect();
    let target: Vec<f64> = (0..case.batch * d_out).map(|_| rng.random_range(0.0..1.0)).collect();

    let (_, mut g, bound, loss) = loss_of(&net, &x, &labels, &target);
    g.backward(loss).unwrap();
    net.zero_grad();
    net.accumulate_grads(&g, &bound);
    let analytic: Vec<Vec<f64>> = net.params().map(|p| p.grad().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let eval = |net: &mut DenseNet, delta: f64| {
                let orig = net.params_mut().nth(pi).unwrap().value()[j];
                net.params_mut().nth(pi).unwrap().value_mut()[j] = orig + delta;
                let v = loss_of(net, &x, &labels, &target).0;
                net.params_mut().nth(pi).unwrap().value_mut()[j] = orig;
                v
            };
            let f0 = eval(&mut net, 0.0);
            let fp = eval(&mut net, STEP);
            let fm = eval(&mut net, -STEP);
            let (fwd, bwd) = ((fp - f0) / STEP, (f0 - fm) / STEP);
            if (fwd - bwd).abs() > 1e-2 * (fwd.abs() + bwd.abs()) + 1e-6 {
                continue;
            }
            let fd = (fp - fm) / (2.0 * STEP);
            let scale = a.abs().max(fd.abs());
            let err = if scale < 1e-7 { (a - fd).abs() } else { (a - fd).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// The twenty fixed networks used by the gradient checks.
pub fn fixed_cases() -> Vec<Case> {
    let shapes: [&[usize]; 4] = [&[3, 4, 2], &[2, 5, 3, 2], &[4, 3, 3], &[3, 6, 2]];
    let acts = [Activation::Sigmoid, Activation::Relu];
    let outs = [Activation::Softmax, Activation::Sigmoid, Activation::Linear];
    (0..20u64)
        .map(|i| Case {
            widths: shapes[i as usize % 4].to_vec(),
            hidden: acts[i as usize % 2],
            output: outs[i as usize % 3],
            batch: 2,
            seed: 1000 + i,
        })
        .collect()
}

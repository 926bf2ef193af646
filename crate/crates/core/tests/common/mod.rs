#![allow(dead_code)]

pub mod oracles;

use anomkit::numcore::{LayerSpec, Mode, Network, Rng, Tensor};

/// Largest per-tensor relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// between backprop and central finite differences for a random linear loss.
///
/// Dropout masks are reproduced exactly by reseeding before every forward pass.
pub fn gradient_check(input_shape: &[usize], specs: &[LayerSpec], seed: u64, eps: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut net = Network::<f64>::build(input_shape, specs, &mut rng).unwrap();
    // nonzero biases so every parameter influences the loss
    for l in 0..net.len() {
        if net.layer_params(l).is_empty() {
            continue;
        }
        for p in net.layer_params_mut(l) {
            for v in p.data_mut() {
                *v += 0.1 * rng.uniform_in(-1.0, 1.0);
            }
        }
    }
    let x = Tensor::from_fn(input_shape, |_| rng.uniform_in(-1.0, 1.0));
    let r = Tensor::from_fn(net.output_shape(), |_| rng.uniform_in(-1.0, 1.0));
    let mask_seed = seed ^ 0xD20;
    let loss = |net: &Network<f64>| -> f64 {
        let mut m = Rng::new(mask_seed);
        let (y, _) = net.forward(&x, &mut Mode::Train(&mut m)).unwrap();
        y.inner(&r).unwrap()
    };
    let mut m = Rng::new(mask_seed);
    let (_, tape) = net.forward(&x, &mut Mode::Train(&mut m)).unwrap();
    let grads = net.backward(&tape, &r).unwrap();
    let mut worst = 0.0f64;
    for l in 0..net.len() {
        for t in 0..net.layer_params(l).len() {
            let n = net.layer_params(l)[t].len();
            let mut num = vec![0.0; n];
            for i in 0..n {
                let orig = net.layer_params(l)[t].data()[i];
                net.layer_params_mut(l)[t].data_mut()[i] = orig + eps;
                let up = loss(&net);
                net.layer_params_mut(l)[t].data_mut()[i] = orig - eps;
                let down = loss(&net);
                net.layer_params_mut(l)[t].data_mut()[i] = orig;
                num[i] = (up - down) / (2.0 * eps);
            }
            let ana = grads.per_layer[l][t].data();
            let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let na: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = na.max(nn);
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn elu() -> LayerSpec {
    LayerSpec::Elu { alpha: 1.0 }
}

pub fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units, reshape: None }
}

/// Small encoder-decoder with every layer kind.
pub fn tiny_autoencoder(dropout: f64) -> (Vec<usize>, Vec<LayerSpec>) {
    let specs = vec![
        LayerSpec::Conv { filters: 3, kernel: 3 },
        elu(),
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::MaxPool { pool: 2 },
        dense(6),
        elu(),
        LayerSpec::Dropout { rate: dropout },
        dense(4),
        elu(),
        dense(6),
        elu(),
        LayerSpec::Dense { units: 2 * 2 * 3, reshape: Some(vec![2, 2, 3]) },
        elu(),
        LayerSpec::Unpool { pool: 2 },
        LayerSpec::Deconv { channels: 1, kernel: 3 },
    ];
    (vec![6, 6, 1], specs)
}

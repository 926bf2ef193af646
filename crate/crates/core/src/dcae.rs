//! Two scale-specific convolutional autoencoders and the fusion denoising
//! autoencoder that produces the per-superpixel feature vector `z`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{mix_seed, mse, mse_grad, Grads, LayerSpec, Mode, Network, Rng, Sgd, Tensor};
use crate::patches::{PatchDataset, PatchPair, Preset};

/// Layer sizes for one preset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub side: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    pub code: usize,
    pub fusion: usize,
}

impl Architecture {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                side: 32,
                filters: 512,
                kernel: 9,
                pool: 3,
                hidden: 2048,
                code: 512,
                fusion: 256,
            },
            Preset::Desk => Self {
                side: 16,
                filters: 32,
                kernel: 5,
                pool: 2,
                hidden: 128,
                code: 64,
                fusion: 32,
            },
        }
    }

    fn pooled(&self) -> usize {
        (self.side - self.kernel + 1) / self.pool
    }

    /// Encoder then mirrored decoder, with dropout after every activation.
    pub fn scale_specs(&self, dropout: f64) -> Vec<LayerSpec> {
        let elu = LayerSpec::Elu { alpha: 1.0 };
        let drop = LayerSpec::Dropout { rate: dropout };
        let p = self.pooled();
        vec![
            LayerSpec::Conv {
                filters: self.filters,
                kernel: self.kernel,
            },
            elu.clone(),
            drop.clone(),
            LayerSpec::MaxPool { pool: self.pool },
            LayerSpec::Dense {
                units: self.hidden,
                reshape: None,
            },
            elu.clone(),
            drop.clone(),
            LayerSpec::Dense {
                units: self.code,
                reshape: None,
            },
            elu.clone(),
            drop.clone(),
            LayerSpec::Dense {
                units: self.hidden,
                reshape: None,
            },
            elu.clone(),
            drop.clone(),
            LayerSpec::Dense {
                units: p * p * self.filters,
                reshape: Some(vec![p, p, self.filters]),
            },
            elu,
            drop,
            LayerSpec::Unpool { pool: self.pool },
            LayerSpec::Deconv {
                channels: 1,
                kernel: self.kernel,
            },
        ]
    }

    /// Number of leading layers forming the encoder (through the code activation).
    pub const ENCODER_LAYERS: usize = 9;

    pub fn fusion_specs(&self, elu_hidden: bool) -> Vec<LayerSpec> {
        let mut specs = vec![LayerSpec::Dense {
            units: self.fusion,
            reshape: None,
        }];
        if elu_hidden {
            specs.push(LayerSpec::Elu { alpha: 1.0 });
        }
        specs.push(LayerSpec::Dense {
            units: 2 * self.code,
            reshape: None,
        });
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Samples per gradient chunk; chunks are reduced in a fixed order.
    pub chunk: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 8,
            max_steps: None,
            batch_size: 64,
            lr: 0.5,
            momentum: 0.9,
            chunk: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Probability of zeroing each input coordinate.
    pub corruption: f64,
    pub elu_hidden: bool,
}

impl Default for FusionHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.02,
            momentum: 0.9,
            corruption: 0.2,
            elu_hidden: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean loss per epoch.
    pub epochs: Vec<f64>,
    /// Batch loss per optimizer step.
    pub steps: Vec<f64>,
}

impl TrainingLog {
    pub fn push_epoch(&mut self, mean: f64) {
        self.epochs.push(mean);
    }
}

#[derive(Clone, Debug)]
pub struct DcaeModel {
    pub preset: Preset,
    pub arch: Architecture,
    pub scale1: Network<f32>,
    pub scale2: Network<f32>,
    pub fusion: Network<f32>,
    pub scales_trained: bool,
    pub fusion_trained: bool,
    pub scale_log: TrainingLog,
    pub fusion_log: TrainingLog,
}

pub fn build_model(preset: Preset, dropout: f64, fusion_elu: bool, rng: &mut Rng) -> Result<DcaeModel> {
    let arch = Architecture::for_preset(preset);
    let input = [arch.side, arch.side, 1];
    let specs = arch.scale_specs(dropout);
    let scale1 = Network::build(&input, &specs, &mut rng.derive(1))?;
    let scale2 = Network::build(&input, &specs, &mut rng.derive(2))?;
    let fusion = Network::build(&[2 * arch.code], &arch.fusion_specs(fusion_elu), &mut rng.derive(3))?;
    Ok(DcaeModel {
        preset,
        arch,
        scale1,
        scale2,
        fusion,
        scales_trained: false,
        fusion_trained: false,
        scale_log: TrainingLog::default(),
        fusion_log: TrainingLog::default(),
    })
}

fn patch_tensor(values: &[f32], side: usize) -> Tensor<f32> {
    Tensor::new(vec![side, side, 1], values.to_vec()).expect("patch size matches preset")
}

struct Partial {
    g1: Grads<f32>,
    g2: Grads<f32>,
    loss: f64,
}

fn batch_gradients(
    model: &DcaeModel,
    dataset: &PatchDataset,
    batch: &[usize],
    chunk: usize,
    seed: u64,
) -> Result<Partial> {
    let side = model.arch.side;
    let parts: Vec<Result<Partial>> = batch
        .par_chunks(chunk.max(1))
        .map(|idx| {
            let mut p = Partial {
                g1: model.scale1.zero_grads(),
                g2: model.scale2.zero_grads(),
                loss: 0.0,
            };
            for &i in idx {
                let pair = &dataset.pairs[i];
                let mut rng = Rng::new(mix_seed(seed, i as u64));
                for (net, patch, grads) in [
                    (&model.scale1, &pair.scale1, &mut p.g1),
                    (&model.scale2, &pair.scale2, &mut p.g2),
                ] {
                    let x = patch_tensor(patch, side);
                    let (y, tape) = net.forward(&x, &mut Mode::Train(&mut rng))?;
                    p.loss += mse(&x, &y)?;
                    net.backward_into(&tape, &mse_grad(&x, &y)?, grads)?;
                }
            }
            Ok(p)
        })
        .collect();
    let mut total: Option<Partial> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => {
                t.g1.add(&part.g1)?;
                t.g2.add(&part.g2)?;
                t.loss += part.loss;
            }
        }
    }
    let mut t = total.ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f32;
    t.g1.scale(inv);
    t.g2.scale(inv);
    t.loss /= batch.len() as f64;
    Ok(t)
}

/// Jointly trains both scale autoencoders on the pairs; each optimizer step updates both.
/// The logged loss is the sum of the two per-scale MSEs.
pub fn train_dcae(model: &mut DcaeModel, dataset: &PatchDataset, hyper: &TrainHyper, rng: &mut Rng) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::param("batch size must be >= 1"));
    }
    let mut opt1 = Sgd::new(&model.scale1, hyper.lr, hyper.momentum)?;
    let mut opt2 = Sgd::new(&model.scale2, hyper.lr, hyper.momentum)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = model.scale_log.steps.len();
    let budget = hyper.max_steps.unwrap_or(usize::MAX);
    let mut done = 0usize;
    'epochs: for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            if done >= budget {
                if count > 0 {
                    model.scale_log.push_epoch(sum / count as f64);
                }
                break 'epochs;
            }
            let seed = mix_seed(rng.seed(), step as u64);
            let part = batch_gradients(model, dataset, batch, hyper.chunk, seed)?;
            if !part.loss.is_finite() || !part.g1.is_finite() || !part.g2.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {b} (loss {})",
                    part.loss
                )));
            }
            opt1.step(&mut model.scale1, &part.g1)?;
            opt2.step(&mut model.scale2, &part.g2)?;
            model.scale_log.steps.push(part.loss);
            sum += part.loss * batch.len() as f64;
            count += batch.len();
            step += 1;
            done += 1;
        }
        model.scale_log.push_epoch(sum / count as f64);
        log::info!("dcae epoch {epoch}: mean loss {:.6}", sum / count as f64);
    }
    model.scales_trained = true;
    Ok(())
}

impl DcaeModel {
    fn encode_scales(&self, pair: &PatchPair) -> Result<Vec<f32>> {
        let side = self.arch.side;
        let mut code = self
            .scale1
            .predict_prefix(&patch_tensor(&pair.scale1, side), Architecture::ENCODER_LAYERS)?
            .into_data();
        code.extend(
            self.scale2
                .predict_prefix(&patch_tensor(&pair.scale2, side), Architecture::ENCODER_LAYERS)?
                .into_data(),
        );
        Ok(code)
    }

    /// Concatenated scale encodings (dropout off) used as fusion input.
    pub fn concat_codes(&self, pair: &PatchPair) -> Result<Vec<f32>> {
        if !self.scales_trained {
            return Err(Error::Usage("scale autoencoders are not trained".into()));
        }
        self.encode_scales(pair)
    }

    fn fusion_hidden_layers(&self) -> usize {
        self.fusion.len() - 1
    }

    /// Fusion hidden activation of the concatenated scale encodings.
    pub fn extract_features(&self, pair: &PatchPair) -> Result<Vec<f32>> {
        if !self.scales_trained || !self.fusion_trained {
            return Err(Error::Usage("model is not fully trained".into()));
        }
        let code = Tensor::vector(self.encode_scales(pair)?);
        Ok(self.fusion.predict_prefix(&code, self.fusion_hidden_layers())?.into_data())
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.fusion
    }
}

/// Trains the fusion autoencoder to reconstruct clean concatenated codes from masked ones.
pub fn train_fusion(model: &mut DcaeModel, dataset: &PatchDataset, hyper: &FusionHyper, rng: &mut Rng) -> Result<()> {
    if !(0.0..1.0).contains(&hyper.corruption) {
        return Err(Error::param(format!("corruption {} outside [0, 1)", hyper.corruption)));
    }
    if hyper.batch_size == 0 {
        return Err(Error::param("batch size must be >= 1"));
    }
    let codes: Vec<Tensor<f32>> = dataset
        .pairs
        .par_iter()
        .map(|p| model.concat_codes(p).map(Tensor::vector))
        .collect::<Result<_>>()?;
    if codes.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    let mut opt = Sgd::new(&model.fusion, hyper.lr, hyper.momentum)?;
    let mut order: Vec<usize> = (0..codes.len()).collect();
    let mut step = 0u64;
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut noise = Rng::new(mix_seed(rng.seed(), step));
            let mut grads = model.fusion.zero_grads();
            let mut loss = 0.0;
            for &i in batch {
                let clean = &codes[i];
                let mut noisy = clean.clone();
                corrupt(noisy.data_mut(), hyper.corruption, &mut noise);
                let (y, tape) = model.fusion.forward(&noisy, &mut Mode::Infer)?;
                loss += mse(clean, &y)?;
                model.fusion.backward_into(&tape, &mse_grad(clean, &y)?, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            loss /= batch.len() as f64;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite fusion loss at epoch {epoch}, batch {b} (loss {loss})"
                )));
            }
            opt.step(&mut model.fusion, &grads)?;
            model.fusion_log.steps.push(loss);
            sum += loss * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        model.fusion_log.push_epoch(sum / count as f64);
        log::info!("fusion epoch {epoch}: mean loss {:.6}", sum / count as f64);
    }
    model.fusion_trained = true;
    Ok(())
}

/// Masking noise: each coordinate is zeroed independently with probability `p`.
pub fn corrupt(values: &mut [f32], p: f64, rng: &mut Rng) {
    if p <= 0.0 {
        return;
    }
    for v in values.iter_mut() {
        if rng.bernoulli(p) {
            *v = 0.0;
        }
    }
}

//! Optimization loop over the adapter with frozen embedding and generator
//! backends.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterConfig, CvaeAdapter, EncoderMode};
use crate::autodiff::Tape;
use crate::checkpoint::save_checkpoint;
use crate::embedding::{DifferentiableImageEmbedder, Embedding};
use crate::error::{Error, Result};
use crate::generator::DifferentiableGenerator;
use crate::losses::{clip_cycle_node, kl_node, w_norm_node, LossComponents, LossWeights, PerceptualMetric};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::toyworld::gaussian;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_mode: EncoderMode,
    pub variational: bool,
    /// Iterations between periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// Linear ramp of the KL weight from zero to its configured value over
    /// this many iterations; keeps the variational channel from collapsing
    /// before the decoder learns to read it. Zero applies the full weight
    /// from the first step.
    pub kl_warmup_iterations: usize,
    /// Keep the conv branch at its initialization (encoder MLP and decoder
    /// still train).
    pub freeze_conv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            weights: LossWeights::default(),
            iterations: 2000,
            batch_size: 16,
            seed: 0,
            encoder_mode: EncoderMode::Full,
            variational: true,
            checkpoint_every: 500,
            kl_warmup_iterations: 300,
            freeze_conv: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.weights.validate()
    }

    /// KL weight actually applied: forced to zero when non-variational.
    pub fn effective_kl_weight(&self) -> f64 {
        if self.variational {
            self.weights.kl
        } else {
            0.0
        }
    }
}

/// One prepared training sample: the image, its embedding context, the f64
/// unit embedding used as the cycle-loss reference, and cached perceptual
/// reference features.
pub struct TrainItem {
    pub image: Tensor,
    pub context: Embedding,
    pub cycle_reference: Vec<f64>,
    pub perceptual_features: Vec<Tensor>,
}

/// Embed and feature-cache a set of training images.
pub fn prepare_items(
    images: &[Tensor],
    embedder: &dyn DifferentiableImageEmbedder,
    perceptual: &dyn PerceptualMetric,
) -> Result<Vec<TrainItem>> {
    images
        .iter()
        .map(|img| {
            let context = embedder.embed_image(img)?;
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let node = embedder.embed_image_node(&mut tape, x);
            let cycle_reference = tape.value(node).data().to_vec();
            let perceptual_features = perceptual.features(img)?;
            Ok(TrainItem {
                image: img.clone(),
                context,
                cycle_reference,
                perceptual_features,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub iteration: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub wall_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub iterations_run: usize,
}

impl TrainReport {
    pub fn first_total(&self) -> Option<f64> {
        self.records.first().map(|r| r.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.records.last().map(|r| r.total)
    }
}

/// Train an adapter from scratch.
///
/// Only adapter parameters change: the embedder and generator digests are
/// asserted identical before and after. Fully reproducible for a given seed
/// on one platform. On a non-finite loss the run aborts, reporting the last
/// good checkpoint.
pub fn train(
    adapter_config: &AdapterConfig,
    config: &TrainConfig,
    items: &[TrainItem],
    embedder: &dyn DifferentiableImageEmbedder,
    generator: &dyn DifferentiableGenerator,
    perceptual: &dyn PerceptualMetric,
    out_dir: Option<&Path>,
) -> Result<(CvaeAdapter, TrainReport)> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    let embedder_digest = embedder.param_digest();
    let generator_digest = generator.param_digest();

    let adapter_config = AdapterConfig {
        encoder_mode: config.encoder_mode,
        variational: config.variational,
        ..adapter_config.clone()
    };
    let mut adapter = CvaeAdapter::new(adapter_config)?;
    let mut adam = Adam::new(config.learning_rate, adapter.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let conv_ids = adapter.conv_param_ids();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut records = Vec::with_capacity(config.iterations);
    let started = Instant::now();

    for iteration in 0..config.iterations {
        let kl_weight = if config.kl_warmup_iterations > 0 {
            let ramp = ((iteration + 1) as f64 / config.kl_warmup_iterations as f64).min(1.0);
            config.effective_kl_weight() * ramp
        } else {
            config.effective_kl_weight()
        };
        let latent_dim = adapter.config().latent_dim;
        let mut grads = adapter.zero_grads();
        let mut sums = LossComponents::zero();

        for _ in 0..config.batch_size {
            let item = &items[rng.gen_range(0..items.len())];
            let noise: Vec<f64> = if config.variational {
                (0..latent_dim).map(|_| gaussian(&mut rng)).collect()
            } else {
                vec![0.0; latent_dim]
            };

            let mut tape = Tape::with_params(adapter.params());
            let img = tape.constant(item.image.clone());
            let ctx = tape.constant(Tensor::vector(item.context.to_f64()));
            let eps = tape.constant(Tensor::vector(noise));
            let fwd = adapter.forward_train_node(&mut tape, generator, img, ctx, eps);

            let percep = perceptual.loss_node_vs_features(&mut tape, &item.perceptual_features, fwd.image_out);
            let cycle = clip_cycle_node(&mut tape, embedder, &item.cycle_reference, fwd.image_out);
            let wn = w_norm_node(&mut tape, fwd.offset);
            let kl = kl_node(&mut tape, fwd.mu, fwd.logvar);

            let mut total = tape.scale(percep, config.weights.perceptual);
            let c = tape.scale(cycle, config.weights.clip_cycle);
            total = tape.add(total, c);
            let n = tape.scale(wn, config.weights.w_norm);
            total = tape.add(total, n);
            let k = tape.scale(kl, kl_weight);
            total = tape.add(total, k);

            tape.backward(total, Some(&mut grads));

            sums.perceptual += tape.value(percep).item();
            sums.clip_cycle += tape.value(cycle).item();
            sums.w_norm += tape.value(wn).item();
            sums.kl += tape.value(kl).item();
        }

        let inv = 1.0 / config.batch_size as f64;
        let components = LossComponents {
            perceptual: sums.perceptual * inv,
            clip_cycle: sums.clip_cycle * inv,
            w_norm: sums.w_norm * inv,
            kl: sums.kl * inv,
        };
        let total = components.perceptual * config.weights.perceptual
            + components.clip_cycle * config.weights.clip_cycle
            + components.w_norm * config.weights.w_norm
            + components.kl * kl_weight;

        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::TrainAborted {
                iteration,
                message: format!("non-finite loss ({total})"),
                last_checkpoint,
            });
        }

        grads.scale(inv);
        if config.freeze_conv {
            for id in &conv_ids {
                for v in grads.get_mut(*id).data_mut() {
                    *v = 0.0;
                }
            }
        }
        adam.step(adapter.params_mut(), &grads);
        records.push(LossRecord { iteration, components, total });

        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (iteration + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_{:06}.cvck", iteration + 1));
                save_checkpoint(&path, &adapter)?;
                last_checkpoint = Some(path);
            }
        }
    }

    let final_checkpoint = if let Some(dir) = out_dir {
        let path = dir.join("final.cvck");
        save_checkpoint(&path, &adapter)?;
        Some(path)
    } else {
        None
    };

    if embedder.param_digest() != embedder_digest {
        return Err(Error::numeric("embedding backend parameters changed during training"));
    }
    if generator.param_digest() != generator_digest {
        return Err(Error::numeric("generator parameters changed during training"));
    }

    Ok((
        adapter,
        TrainReport {
            records,
            wall_seconds: started.elapsed().as_secs_f64(),
            final_checkpoint,
            iterations_run: config.iterations,
        },
    ))
}

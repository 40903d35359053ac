//! Prompt training: SGD with momentum and cosine learning-rate decay over
//! the combined objective, updating only the soft context vectors and the
//! visual prompt stack.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use mpaf_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::crossmodal::{argmax_rows, image_text_loss, logits, total_loss};
use crate::data::{Dataset, SplitData};
use crate::encoder::{FrozenWeights, ImageFeatures, VisualPromptStack};
use crate::eval::{encode_all, feature_logits};
use crate::prompts::descriptions::{fetch_descriptions, DescriptionProvider};
use crate::prompts::{
    build_tokenizer, prompt_level_alignment_loss, textual_alignment_loss,
    token_level_alignment_loss, HardPromptSet, SoftPromptSet, Temperature, Template,
};
use crate::prototype::{compute_prototypes, stack_images, visual_alignment_loss, PrototypeTable};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,l_total,l_vt,l_ta,l_pa,l_v,train_acc,val_acc,seconds";

/// Cosine decay from `base` at step 0 towards 0 at `total_steps`.
pub fn cosine_lr(base: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps == 0 {
        return base;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (0.5 * base as f64 * (1.0 + (PI * t).cos())) as f32
}

/// Heavy-ball SGD: `v = mu * v + g + wd * p`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, param: &mut [f32], grad: &[f32], lr: f32) {
        for ((p, v), g) in param.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_vt: f64,
    pub l_ta: f64,
    pub l_pa: f64,
    pub l_v: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.3}",
            self.epoch,
            self.l_total,
            self.l_vt,
            self.l_ta,
            self.l_pa,
            self.l_v,
            self.train_acc,
            self.val_acc,
            self.seconds
        )
    }
}

/// Metrics file: the config as `#` comment lines, the header, one row per
/// epoch.
pub fn metrics_csv(config: &TrainConfig, records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for line in config.to_text().lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(s, "{METRICS_HEADER}");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Frozen encoder, prompts and prototypes for one run, before training.
pub struct RunSetup {
    pub weights: FrozenWeights,
    pub hard: HardPromptSet,
    pub soft: SoftPromptSet,
    pub visual: Option<VisualPromptStack>,
    pub prototypes: PrototypeTable,
}

impl RunSetup {
    /// Builds everything from the config: descriptions come from the
    /// fixtures file only.
    pub fn new(config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let shape = dataset.image_shape().unwrap_or(&[]);
        let e = &config.encoder;
        if shape != [e.image_size, e.image_size, e.image_channels] {
            return Err(Error::Config(format!(
                "dataset images {shape:?} do not match the encoder geometry"
            )));
        }
        let weights = FrozenWeights::init(e, config.weight_seed)?;
        let provider = DescriptionProvider::fixtures(&config.fixtures);
        let descriptions = fetch_descriptions(&provider, &dataset.classes)?;
        let tokenizer = build_tokenizer(&descriptions, e.vocab_size, e.max_text_len);
        let template = Template::from_index(config.template)?;
        let hard = HardPromptSet::build(&descriptions, template, &tokenizer, &weights)?;
        let soft = SoftPromptSet::init(
            &dataset.classes,
            config.context_len,
            &tokenizer,
            &weights,
            config.prompt_seed,
        )?;
        let visual = if config.visual_prompts {
            Some(VisualPromptStack::init(
                e,
                config.n_prompts,
                config.prompt_seed.wrapping_add(1),
            )?)
        } else {
            None
        };
        let prototypes = compute_prototypes(
            &weights,
            &dataset.train.images,
            &dataset.train.labels,
            &dataset.classes,
            config.subset_size,
            config.prototype_seed,
        )?;
        Ok(Self {
            weights,
            hard,
            soft,
            visual,
            prototypes,
        })
    }

    /// Number of trainable scalars.
    pub fn trainable_parameters(&self) -> usize {
        self.soft.context.numel() + self.visual.as_ref().map_or(0, |v| v.prompts.numel())
    }

    pub fn checkpoint(&self, config: &TrainConfig, dataset_hash: &str, epoch: usize) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            classes: self.soft.class_names.clone(),
            class_token_ids: self.soft.class_token_ids().to_vec(),
            dataset_hash: dataset_hash.to_string(),
            frozen_checksum: self.weights.checksum(),
            epoch,
            context: self.soft.context.clone(),
            visual_prompts: self.visual.as_ref().map(|v| v.prompts.clone()),
            prototypes: self.prototypes.prototypes.clone(),
        }
    }
}

pub struct TrainResult {
    pub initial: Checkpoint,
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    pub setup: RunSetup,
}

fn flip_horizontal(image: &Tensor) -> Tensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), i / c % w, i % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    })
    .expect("same shape")
}

/// Frozen image features when the visual prompts are off; both
/// orientations are kept when flipping is enabled.
struct FeatureCache {
    plain: Vec<ImageFeatures>,
    flipped: Vec<ImageFeatures>,
}

#[derive(Default)]
struct Sums {
    total: f64,
    vt: f64,
    ta: f64,
    pa: f64,
    v: f64,
    correct: usize,
    seen: usize,
    steps: usize,
}

/// Trains prompts on `dataset.train`, selecting the best epoch on
/// `dataset.val`. With `out`, writes `config.txt`, `metrics.csv`,
/// `init.ckpt`, `best.ckpt` and `final.ckpt` there.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut setup: RunSetup,
    out: Option<&Path>,
) -> Result<TrainResult> {
    config.validate()?;
    let start = Instant::now();
    let dataset_hash = dataset.hash();
    let train = &dataset.train;
    if train.is_empty() {
        return Err(Error::Invalid("empty training split".into()));
    }
    let tau = Temperature::new(config.tau)?;
    let weights = &setup.weights;
    let hard_pooled = setup.hard.pooled()?;
    let hard_features = setup.hard.features()?;
    let k = config.alignment().effective_k(config.encoder.num_patches());

    let cache = if setup.visual.is_none() {
        let flipped = if config.flip_prob > 0.0 {
            let f: Vec<Tensor> = train.images.iter().map(flip_horizontal).collect();
            encode_all(weights, None, &f)?
        } else {
            Vec::new()
        };
        Some(FeatureCache {
            plain: encode_all(weights, None, &train.images)?,
            flipped,
        })
    } else {
        None
    };
    let val_cache = match &setup.visual {
        None => Some(encode_all(weights, None, &dataset.val.images)?),
        Some(_) => None,
    };

    let initial = setup.checkpoint(config, &dataset_hash, 0);
    let mut ctx_opt = Sgd::new(setup.soft.context.numel(), config.momentum, config.weight_decay);
    let mut vis_opt = setup
        .visual
        .as_ref()
        .map(|v| Sgd::new(v.prompts.numel(), config.momentum, config.weight_decay));

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.data_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut global_step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| config.flip_prob > 0.0 && rng.random::<f32>() < config.flip_prob)
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let soft = setup.soft.forward(&tape, weights)?;
            let l_ta = token_level_alignment_loss(soft.pooled, tape.constant(hard_pooled.clone()), tau)?;
            let l_pa =
                prompt_level_alignment_loss(soft.features, tape.constant(hard_features.clone()), tau)?;
            let l_t = textual_alignment_loss(l_ta, l_pa)?;

            let (global, locals, prompts) = match (&cache, &setup.visual) {
                (Some(cache), _) => {
                    let pick = |i: usize, f: bool| {
                        if f {
                            &cache.flipped[i]
                        } else {
                            &cache.plain[i]
                        }
                    };
                    let feats: Vec<&ImageFeatures> =
                        batch.iter().zip(&flips).map(|(&i, &f)| pick(i, f)).collect();
                    let g = tape.constant(stack_images(feats.iter().map(|f| &f.global))?);
                    let l = tape.constant(stack_images(feats.iter().map(|f| &f.locals))?);
                    (g, l, None)
                }
                (None, Some(visual)) => {
                    let flipped: Vec<Tensor>;
                    let images = if flips.iter().any(|&f| f) {
                        flipped = batch
                            .iter()
                            .zip(&flips)
                            .map(|(&i, &f)| {
                                if f {
                                    flip_horizontal(&train.images[i])
                                } else {
                                    train.images[i].clone()
                                }
                            })
                            .collect();
                        stack_images(&flipped)?
                    } else {
                        stack_images(batch.iter().map(|&i| &train.images[i]))?
                    };
                    let prompts = tape.param(&visual.prompts);
                    let (feats, _) =
                        weights.image_encode_batch(&tape, tape.constant(images), Some(prompts))?;
                    (feats.global, feats.locals, Some(prompts))
                }
                (None, None) => unreachable!("cache exists without visual prompts"),
            };
            let local = config.local_alignment.then_some(locals);
            let logit = logits(global, local, soft.features, k)?;
            let l_vt = image_text_loss(logit, &labels, config.tau_logits)?;
            let l_v = visual_alignment_loss(&tape, global, &labels, &setup.prototypes, config.metric)?;
            let l_total = total_loss(l_vt, l_t, l_v, config.beta, config.gamma)?;

            let values = [l_total, l_vt, l_ta, l_pa, l_v].map(|v| v.item().unwrap_or(f32::NAN));
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "l_total={} l_vt={} l_ta={} l_pa={} l_v={}",
                        values[0], values[1], values[2], values[3], values[4]
                    ),
                });
            }
            let preds = argmax_rows(logit.value().data(), dataset.classes.len());
            sums.correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            sums.seen += labels.len();
            sums.total += values[0] as f64;
            sums.vt += values[1] as f64;
            sums.ta += values[2] as f64;
            sums.pa += values[3] as f64;
            sums.v += values[4] as f64;
            sums.steps += 1;

            let grads = tape.backward(l_total)?;
            let lr = cosine_lr(config.lr, global_step, total_steps);
            let zero_ctx;
            let g_ctx = match grads.get(soft.context) {
                Some(g) => g,
                None => {
                    zero_ctx = vec![0.0; setup.soft.context.numel()];
                    &zero_ctx
                }
            };
            ctx_opt.step(setup.soft.context.data_mut(), g_ctx, lr);
            if let (Some(p), Some(visual), Some(opt)) = (prompts, setup.visual.as_mut(), vis_opt.as_mut()) {
                if let Some(g) = grads.get(p) {
                    opt.step(visual.prompts.data_mut(), g, lr);
                }
            }
            global_step += 1;
        }

        let text = setup.soft.features(weights)?;
        let val_feats = match &val_cache {
            Some(f) => f.clone(),
            None => encode_all(weights, setup.visual.as_ref(), &dataset.val.images)?,
        };
        let val_acc = accuracy(&val_feats, &text, k, config.local_alignment, &dataset.val)?;
        let n = sums.steps.max(1) as f64;
        let record = MetricsRecord {
            epoch,
            l_total: sums.total / n,
            l_vt: sums.vt / n,
            l_ta: sums.ta / n,
            l_pa: sums.pa / n,
            l_v: sums.v / n,
            train_acc: sums.correct as f64 / sums.seen.max(1) as f64,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        metrics.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, setup.checkpoint(config, &dataset_hash, epoch)));
        }
        if let Some(dir) = out {
            write_file(&dir.join("metrics.csv"), &metrics_csv(config, &metrics))?;
        }
    }

    let last = setup.checkpoint(config, &dataset_hash, config.epochs);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    if let Some(dir) = out {
        write_file(&dir.join("config.txt"), &config.to_text())?;
        initial.save(&dir.join("init.ckpt"))?;
        best.save(&dir.join("best.ckpt"))?;
        last.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainResult {
        initial,
        last,
        best,
        metrics,
        setup,
    })
}

fn accuracy(
    features: &[ImageFeatures],
    text: &Tensor,
    k: usize,
    local: bool,
    split: &SplitData,
) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let preds = argmax_rows(&feature_logits(features, text, k, local)?, text.shape()[0]);
    let correct = preds.iter().zip(&split.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / split.len() as f64)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

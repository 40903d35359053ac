//! Miniature frozen text and image transformer encoders.
//!
//! Both encoders are pre-LN transformers whose parameters are drawn once from
//! a seed and never updated. The image encoder optionally appends a set of
//! learnable prompt tokens before every layer and drops their outputs after
//! it; the text encoder consumes raw token embeddings so that learnable
//! context vectors and embedded hard-prompt tokens share one code path.

use mpaf_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::EncoderConfig;
use crate::{Error, Result};

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub qkv: Tensor,
    pub qkv_bias: Tensor,
    pub out: Tensor,
    pub out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextWeights {
    pub token_embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_final_gain: Tensor,
    pub ln_final_bias: Tensor,
    pub projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageWeights {
    pub patch_embedding: Tensor,
    pub class_token: Tensor,
    pub positional: Tensor,
    pub ln_pre_gain: Tensor,
    pub ln_pre_bias: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_post_gain: Tensor,
    pub ln_post_bias: Tensor,
    pub projection: Tensor,
}

/// All frozen dual-encoder parameters, generated from `(config, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    pub config: EncoderConfig,
    pub seed: u64,
    pub text: TextWeights,
    pub image: ImageWeights,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn gaussian(&mut self, shape: &[usize], std: f32) -> Tensor {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng)).expect("init shape")
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.gaussian(&[fan_in, fan_out], (fan_in as f32).powf(-0.5))
    }

    fn ones(&self, n: usize) -> Tensor {
        Tensor::full(&[n], 1.0).expect("init shape")
    }

    fn zeros(&self, n: usize) -> Tensor {
        Tensor::zeros(&[n]).expect("init shape")
    }

    fn block(&mut self, d: usize, mlp_ratio: usize) -> BlockWeights {
        let hidden = d * mlp_ratio;
        BlockWeights {
            ln1_gain: self.ones(d),
            ln1_bias: self.zeros(d),
            qkv: self.linear(d, 3 * d),
            qkv_bias: self.gaussian(&[3 * d], 0.02),
            out: self.linear(d, d),
            out_bias: self.gaussian(&[d], 0.02),
            ln2_gain: self.ones(d),
            ln2_bias: self.zeros(d),
            fc1: self.linear(d, hidden),
            fc1_bias: self.gaussian(&[hidden], 0.02),
            fc2: self.linear(hidden, d),
            fc2_bias: self.gaussian(&[d], 0.02),
        }
    }
}

impl FrozenWeights {
    /// Deterministic pseudo-pretrained weights. Linear maps are Gaussian with
    /// std `fan_in^-1/2`; layer-norm gains start at one.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let text = TextWeights {
            token_embedding: init.gaussian(&[config.vocab_size, d], 0.02),
            positional: init.gaussian(&[config.max_text_len, d], 0.01),
            blocks: (0..config.num_layers)
                .map(|_| init.block(d, config.mlp_ratio))
                .collect(),
            ln_final_gain: init.ones(d),
            ln_final_bias: init.zeros(d),
            projection: init.linear(d, config.projection_dim),
        };
        let scale = (d as f32).powf(-0.5);
        let image = ImageWeights {
            patch_embedding: init.linear(config.patch_dim(), d),
            class_token: init.gaussian(&[d], scale),
            positional: init.gaussian(&[config.num_patches() + 1, d], scale),
            ln_pre_gain: init.ones(d),
            ln_pre_bias: init.zeros(d),
            blocks: (0..config.num_layers)
                .map(|_| init.block(d, config.mlp_ratio))
                .collect(),
            ln_post_gain: init.ones(d),
            ln_post_bias: init.zeros(d),
            projection: init.linear(d, config.projection_dim),
        };
        Ok(Self {
            config: config.clone(),
            seed,
            text,
            image,
        })
    }

    /// Every parameter with a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn blocks<'a>(prefix: &str, bs: &'a [BlockWeights], out: &mut Vec<(String, &'a Tensor)>) {
            for (i, b) in bs.iter().enumerate() {
                let items = [
                    ("ln1_gain", &b.ln1_gain),
                    ("ln1_bias", &b.ln1_bias),
                    ("qkv", &b.qkv),
                    ("qkv_bias", &b.qkv_bias),
                    ("out", &b.out),
                    ("out_bias", &b.out_bias),
                    ("ln2_gain", &b.ln2_gain),
                    ("ln2_bias", &b.ln2_bias),
                    ("fc1", &b.fc1),
                    ("fc1_bias", &b.fc1_bias),
                    ("fc2", &b.fc2),
                    ("fc2_bias", &b.fc2_bias),
                ];
                for (n, t) in items {
                    out.push((format!("{prefix}.blocks.{i}.{n}"), t));
                }
            }
        }
        let t = &self.text;
        let im = &self.image;
        let mut out = vec![
            ("text.token_embedding".to_string(), &t.token_embedding),
            ("text.positional".to_string(), &t.positional),
        ];
        blocks("text", &t.blocks, &mut out);
        out.push(("text.ln_final_gain".into(), &t.ln_final_gain));
        out.push(("text.ln_final_bias".into(), &t.ln_final_bias));
        out.push(("text.projection".into(), &t.projection));
        out.push(("image.patch_embedding".into(), &im.patch_embedding));
        out.push(("image.class_token".into(), &im.class_token));
        out.push(("image.positional".into(), &im.positional));
        out.push(("image.ln_pre_gain".into(), &im.ln_pre_gain));
        out.push(("image.ln_pre_bias".into(), &im.ln_pre_bias));
        blocks("image", &im.blocks, &mut out);
        out.push(("image.ln_post_gain".into(), &im.ln_post_gain));
        out.push(("image.ln_post_bias".into(), &im.ln_post_bias));
        out.push(("image.projection".into(), &im.projection));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over every parameter's name, shape and raw bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Frozen embedding rows for `ids`, shape `[len, embed_dim]`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let table = &self.text.token_embedding;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(Tensor::new(&[ids.len(), d], data)?)
    }
}

/// Learnable per-layer visual prompt tokens, shape `[K, N_p, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptStack {
    pub prompts: Tensor,
}

impl VisualPromptStack {
    /// Gaussian(0, 0.02) initialization.
    pub fn init(config: &EncoderConfig, n_prompts: usize, seed: u64) -> Result<Self> {
        if n_prompts == 0 {
            return Err(Error::Invalid("at least one visual prompt is required".into()));
        }
        let dist = Normal::new(0.0f32, 0.02).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [config.num_layers, n_prompts, config.embed_dim];
        let prompts = Tensor::from_fn(&shape, |_| dist.sample(&mut rng))?.with_requires_grad(true);
        Ok(Self { prompts })
    }

    /// All-zero prompts (still trainable).
    pub fn zeros(config: &EncoderConfig, n_prompts: usize) -> Result<Self> {
        let shape = [config.num_layers, n_prompts, config.embed_dim];
        Ok(Self {
            prompts: Tensor::zeros(&shape)?.with_requires_grad(true),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.prompts.shape()[0]
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.shape()[1]
    }
}

/// Plain (off-tape) image features: L2-normalized global and local rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// z^g, `[projection_dim]`.
    pub global: Tensor,
    /// Z^l, `[N_l, projection_dim]`.
    pub locals: Tensor,
}

/// On-tape batch image features.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatureVars<'t> {
    /// `[B, projection_dim]`
    pub global: Var<'t>,
    /// `[B, N_l, projection_dim]`
    pub locals: Var<'t>,
}

struct BlockVars<'t> {
    ln1: (Var<'t>, Var<'t>),
    qkv: (Var<'t>, Var<'t>),
    out: (Var<'t>, Var<'t>),
    ln2: (Var<'t>, Var<'t>),
    fc1: (Var<'t>, Var<'t>),
    fc2: (Var<'t>, Var<'t>),
}

impl<'t> BlockVars<'t> {
    fn new(tape: &'t Tape, b: &BlockWeights) -> Self {
        let c = |t: &Tensor| tape.constant(t.clone());
        Self {
            ln1: (c(&b.ln1_gain), c(&b.ln1_bias)),
            qkv: (c(&b.qkv), c(&b.qkv_bias)),
            out: (c(&b.out), c(&b.out_bias)),
            ln2: (c(&b.ln2_gain), c(&b.ln2_bias)),
            fc1: (c(&b.fc1), c(&b.fc1_bias)),
            fc2: (c(&b.fc2), c(&b.fc2_bias)),
        }
    }

    /// Pre-LN residual block over `[B, T, D]`.
    fn forward(&self, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let h = x
            .layer_norm(&self.ln1.0, &self.ln1.1)?
            .matmul(&self.qkv.0)?
            .add_bcast(&self.qkv.1)?
            .attention(heads)?
            .matmul(&self.out.0)?
            .add_bcast(&self.out.1)?;
        let x = x.add(&h)?;
        let h = x
            .layer_norm(&self.ln2.0, &self.ln2.1)?
            .matmul(&self.fc1.0)?
            .add_bcast(&self.fc1.1)?
            .gelu()
            .matmul(&self.fc2.0)?
            .add_bcast(&self.fc2.1)?;
        Ok(x.add(&h)?)
    }
}

/// Flat indices mapping `[B, H, W, C]` pixels to `[B, N_l, patch_dim]` patches.
pub fn patch_index(config: &EncoderConfig, batch: usize) -> Vec<usize> {
    let (s, p, c, g) = (
        config.image_size,
        config.patch_size,
        config.image_channels,
        config.grid(),
    );
    let mut idx = Vec::with_capacity(batch * s * s * c);
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let (y, x) = (gy * p + py, gx * p + px);
                            idx.push(((b * s + y) * s + x) * c + ch);
                        }
                    }
                }
            }
        }
    }
    idx
}

impl FrozenWeights {
    /// Encodes a `[T, embed_dim]` sequence of raw token embeddings to an
    /// L2-normalized `[projection_dim]` feature taken at the last (EOS)
    /// position. Attention is bidirectional.
    pub fn text_encode<'t>(&self, tape: &'t Tape, embeddings: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[1] != cfg.embed_dim {
            return Err(Error::Invalid(format!(
                "text embeddings must be [T, {}], got {shape:?}",
                cfg.embed_dim
            )));
        }
        let len = shape[0];
        if !(2..=cfg.max_text_len).contains(&len) {
            return Err(Error::Invalid(format!(
                "text sequence length {len} outside [2, {}]",
                cfg.max_text_len
            )));
        }
        let w = &self.text;
        let pos = tape.constant(w.positional.clone()).slice(0, 0, len)?;
        let mut x = embeddings.add(&pos)?.reshape(&[1, len, cfg.embed_dim])?;
        for b in &w.blocks {
            x = BlockVars::new(tape, b).forward(x, cfg.num_heads)?;
        }
        let gain = tape.constant(w.ln_final_gain.clone());
        let bias = tape.constant(w.ln_final_bias.clone());
        let eos = x
            .slice(1, len - 1, 1)?
            .reshape(&[1, cfg.embed_dim])?
            .layer_norm(&gain, &bias)?;
        let proj = tape.constant(w.projection.clone());
        Ok(eos
            .matmul(&proj)?
            .l2_normalize()
            .reshape(&[cfg.projection_dim])?)
    }

    /// Off-tape text feature of a token-id sequence.
    pub fn encode_token_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let tape = Tape::new();
        let emb = tape.constant(self.embed_tokens(ids)?);
        Ok(self.text_encode(&tape, emb)?.to_tensor())
    }

    /// Encodes a `[B, H, W, C]` image batch. With `prompts`, layer `l`
    /// sees `[z^{l-1}, p^l]` and its prompt-position outputs are dropped.
    /// Returns the features and the sequence length leaving every layer.
    pub fn image_encode_batch<'t>(
        &self,
        tape: &'t Tape,
        images: Var<'t>,
        prompts: Option<Var<'t>>,
    ) -> Result<(ImageFeatureVars<'t>, Vec<usize>)> {
        let cfg = &self.config;
        let shape = images.shape();
        let expected = [cfg.image_size, cfg.image_size, cfg.image_channels];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Invalid(format!(
                "image batch must be [B, {}, {}, {}], got {shape:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        let batch = shape[0];
        let (n, d) = (cfg.num_patches(), cfg.embed_dim);
        if let Some(p) = prompts {
            let ps = p.shape();
            if ps.len() != 3 || ps[0] != cfg.num_layers || ps[2] != d {
                return Err(Error::Invalid(format!(
                    "visual prompts must be [{}, N_p, {d}], got {ps:?}",
                    cfg.num_layers
                )));
            }
        }
        let w = &self.image;
        let patches = images.gather(patch_index(cfg, batch), &[batch, n, cfg.patch_dim()])?;
        let tokens = patches.matmul(&tape.constant(w.patch_embedding.clone()))?;
        let cls = tape
            .constant(w.class_token.clone().reshape(&[1, d])?)
            .repeat(batch)?;
        let mut x = tape
            .concat(&[cls, tokens], 1)?
            .add_bcast(&tape.constant(w.positional.clone()))?
            .layer_norm(
                &tape.constant(w.ln_pre_gain.clone()),
                &tape.constant(w.ln_pre_bias.clone()),
            )?;
        let mut lengths = Vec::with_capacity(w.blocks.len());
        for (l, b) in w.blocks.iter().enumerate() {
            let block = BlockVars::new(tape, b);
            x = match prompts {
                Some(p) => {
                    let np = p.shape()[1];
                    let layer = p.slice(0, l, 1)?.reshape(&[np, d])?.repeat(batch)?;
                    let joined = tape.concat(&[x, layer], 1)?;
                    block.forward(joined, cfg.num_heads)?.slice(1, 0, n + 1)?
                }
                None => block.forward(x, cfg.num_heads)?,
            };
            lengths.push(x.shape()[1]);
        }
        let x = x.layer_norm(
            &tape.constant(w.ln_post_gain.clone()),
            &tape.constant(w.ln_post_bias.clone()),
        )?;
        let proj = tape.constant(w.projection.clone());
        let global = x
            .slice(1, 0, 1)?
            .reshape(&[batch, d])?
            .matmul(&proj)?
            .l2_normalize();
        let locals = x.slice(1, 1, n)?.matmul(&proj)?.l2_normalize();
        Ok((ImageFeatureVars { global, locals }, lengths))
    }

    /// Off-tape encoding of a single `[H, W, C]` image.
    pub fn image_encode(
        &self,
        image: &Tensor,
        prompts: Option<&VisualPromptStack>,
    ) -> Result<ImageFeatures> {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().with_requires_grad(false).reshape(&shape)?;
        Ok(self.encode_images(&[batch], prompts)?.remove(0))
    }

    /// Off-tape encoding of image batches (each `[B, H, W, C]`), one
    /// [`ImageFeatures`] per image in input order.
    pub fn encode_images(
        &self,
        batches: &[Tensor],
        prompts: Option<&VisualPromptStack>,
    ) -> Result<Vec<ImageFeatures>> {
        let cfg = &self.config;
        let (n, p) = (cfg.num_patches(), cfg.projection_dim);
        let mut out = Vec::new();
        for batch in batches {
            let tape = Tape::new();
            let images = tape.constant(batch.clone());
            let prompts = prompts.map(|s| tape.constant(s.prompts.clone()));
            let (feats, _) = self.image_encode_batch(&tape, images, prompts)?;
            let g = feats.global.to_tensor();
            let l = feats.locals.to_tensor();
            for b in 0..batch.shape()[0] {
                out.push(ImageFeatures {
                    global: Tensor::new(&[p], g.data()[b * p..(b + 1) * p].to_vec())?,
                    locals: Tensor::new(&[n, p], l.data()[b * n * p..(b + 1) * n * p].to_vec())?,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            image_size: 8,
            image_channels: 1,
            patch_size: 4,
            vocab_size: 32,
            max_text_len: 12,
            projection_dim: 8,
        }
    }

    fn random_image(cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::from_fn(&[s, s, cfg.image_channels], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small();
        let a = FrozenWeights::init(&cfg, 7).unwrap();
        assert_eq!(a, FrozenWeights::init(&cfg, 7).unwrap());
        assert_ne!(a.checksum(), FrozenWeights::init(&cfg, 8).unwrap().checksum());
        assert!(a.named_tensors().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn distinct_images_give_distinct_features() {
        let cfg = EncoderConfig::default();
        for seed in 0..3 {
            let w = FrozenWeights::init(&cfg, seed).unwrap();
            let a = w.image_encode(&random_image(&cfg, 100 + seed), None).unwrap();
            let b = w.image_encode(&random_image(&cfg, 200 + seed), None).unwrap();
            let cos: f32 = a.global.data().iter().zip(b.global.data()).map(|(x, y)| x * y).sum();
            assert!(cos < 1.0 - 1e-4, "seed {seed}: cos {cos}");
        }
    }

    #[test]
    fn default_geometry_has_sixteen_locals() {
        let cfg = EncoderConfig::default();
        let w = FrozenWeights::init(&cfg, 0).unwrap();
        let f = w.image_encode(&random_image(&cfg, 1), None).unwrap();
        assert_eq!(f.locals.shape(), &[16, 64]);
        assert_eq!(f.global.shape(), &[64]);
    }

    #[test]
    fn frozen_path_is_bitwise_stable() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let img = random_image(&cfg, 9);
        assert_eq!(w.image_encode(&img, None).unwrap(), w.image_encode(&img, None).unwrap());
    }

    #[test]
    fn zero_prompts_still_change_features() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let img = random_image(&cfg, 9);
        let zeros = VisualPromptStack::zeros(&cfg, 4).unwrap();
        let plain = w.image_encode(&img, None).unwrap();
        let prompted = w.image_encode(&img, Some(&zeros)).unwrap();
        assert_ne!(plain.global, prompted.global);
    }

    #[test]
    fn prompt_outputs_are_discarded_every_layer() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let images = tape.constant(random_image(&cfg, 1).reshape(&[1, 8, 8, 1]).unwrap());
        let stack = VisualPromptStack::init(&cfg, 3, 0).unwrap();
        let p = tape.param(&stack.prompts);
        let (_, lengths) = w.image_encode_batch(&tape, images, Some(p)).unwrap();
        assert_eq!(lengths, vec![cfg.num_patches() + 1; cfg.num_layers]);
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let bad = Tensor::zeros(&[6, 8, 1]).unwrap();
        assert!(w.image_encode(&bad, None).is_err());
    }

    #[test]
    fn text_feature_is_unit_norm_and_deterministic() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let a = w.encode_token_ids(&[2, 5, 6, 3]).unwrap();
        assert_eq!(a, w.encode_token_ids(&[2, 5, 6, 3]).unwrap());
        let norm: f32 = a.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn text_length_limits() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        assert!(w.encode_token_ids(&[2; 13]).is_err());
        assert!(w.encode_token_ids(&[2]).is_err());
        assert!(w.encode_token_ids(&[2; 12]).is_ok());
    }

    #[test]
    fn text_gradient_reaches_inputs_not_weights() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let frozen = tape.constant(w.embed_tokens(&[2, 5]).unwrap());
        let ctx = tape.param(&Tensor::from_fn(&[3, 16], |i| (i as f32 * 0.37).sin() * 0.02).unwrap());
        let eos = tape.constant(w.embed_tokens(&[3]).unwrap());
        let seq = tape.concat(&[frozen, ctx, eos], 0).unwrap();
        let feat = w.text_encode(&tape, seq).unwrap();
        let target = tape.constant(Tensor::from_fn(&[8], |i| i as f32 - 3.0).unwrap());
        let loss = feat.mul(&target).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(ctx).unwrap().iter().any(|&g| g != 0.0));
        assert!(grads.get(frozen).is_none() && grads.get(eos).is_none());
        // Only the context leaf and nodes derived from it carry gradients.
        let derived = grads.count();
        assert!(derived > 1);
    }
}

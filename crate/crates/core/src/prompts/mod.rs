//! Hard (template + class + description) and soft (learnable context)
//! prompts, and the soft-hard alignment losses.

pub mod descriptions;

use mpaf_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::FrozenWeights;
use crate::tokenizer::{Tokenizer, BOS, EOS};
use crate::{Error, Result};

pub use descriptions::{
    fetch_descriptions, ClassDescription, DescriptionProvider, DescriptionSource, HttpGenerator,
    RemoteConfig, TextGenerator,
};

/// Hard-prompt template variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// "a photo of [class]"
    Generic,
    /// "a photo of a person making a facial expression of [class]"
    Expression,
    /// The expression template followed by the class description.
    ExpressionWithDescription,
}

impl Template {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Template::Generic),
            2 => Ok(Template::Expression),
            3 => Ok(Template::ExpressionWithDescription),
            _ => Err(Error::Config(format!("template must be 1, 2 or 3, got {i}"))),
        }
    }

    pub fn render(&self, class_name: &str, description: &str) -> String {
        match self {
            Template::Generic => format!("a photo of {class_name}"),
            Template::Expression => {
                format!("a photo of a person making a facial expression of {class_name}")
            }
            Template::ExpressionWithDescription => format!(
                "a photo of a person making a facial expression of {class_name}, {description}"
            ),
        }
    }
}

/// Builds the tokenizer vocabulary from every text the prompts can contain.
pub fn build_tokenizer(
    descriptions: &[ClassDescription],
    vocab_size: usize,
    max_len: usize,
) -> Tokenizer {
    let mut corpus: Vec<String> = Vec::new();
    for d in descriptions {
        corpus.push(Template::ExpressionWithDescription.render(&d.class_name, &d.description));
        corpus.push(Template::Generic.render(&d.class_name, ""));
    }
    Tokenizer::from_corpus(corpus.iter().map(String::as_str), vocab_size, max_len)
}

/// Positive, fixed softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f32);

impl Temperature {
    pub fn new(tau: f32) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(&self) -> f32 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardPrompt {
    pub class_name: String,
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Frozen token embeddings t*, `[T, embed_dim]`.
    pub embeddings: Tensor,
    /// Mean of the token embeddings, `[embed_dim]`.
    pub pooled: Tensor,
    /// Encoded feature θ(t*), L2-normalized, `[projection_dim]`.
    pub feature: Tensor,
}

/// Immutable per-class hard prompts with precomputed features.
#[derive(Clone, Debug, PartialEq)]
pub struct HardPromptSet {
    pub template: Template,
    pub prompts: Vec<HardPrompt>,
}

fn mean_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f32; cols];
    for r in 0..rows {
        out.iter_mut().zip(t.row(r)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= rows as f32);
    Tensor::new(&[cols], out).expect("mean shape")
}

fn stack(rows: &[&Tensor]) -> Result<Tensor> {
    let cols = rows.first().map(|t| t.numel()).unwrap_or(0);
    let data = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(&[rows.len(), cols], data)?)
}

impl HardPromptSet {
    pub fn build(
        descriptions: &[ClassDescription],
        template: Template,
        tokenizer: &Tokenizer,
        weights: &FrozenWeights,
    ) -> Result<Self> {
        let prompts = descriptions
            .iter()
            .map(|d| {
                let text = template.render(&d.class_name, &d.description);
                let token_ids = tokenizer.tokenize(&text);
                let embeddings = weights.embed_tokens(&token_ids)?;
                let pooled = mean_rows(&embeddings);
                let feature = weights.encode_token_ids(&token_ids)?;
                Ok(HardPrompt {
                    class_name: d.class_name.clone(),
                    text,
                    token_ids,
                    embeddings,
                    pooled,
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { template, prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// `[C, embed_dim]` pooled token embeddings.
    pub fn pooled(&self) -> Result<Tensor> {
        stack(&self.prompts.iter().map(|p| &p.pooled).collect::<Vec<_>>())
    }

    /// `[C, projection_dim]` encoded features.
    pub fn features(&self) -> Result<Tensor> {
        stack(&self.prompts.iter().map(|p| &p.feature).collect::<Vec<_>>())
    }
}

/// Shared learnable context vectors plus frozen per-class name embeddings.
/// The sequence for class c is `[BOS, context.., class tokens.., EOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPromptSet {
    /// `[context_len, embed_dim]`, trainable.
    pub context: Tensor,
    pub class_names: Vec<String>,
    class_ids: Vec<Vec<u32>>,
    class_embeddings: Vec<Tensor>,
    bos: Tensor,
    eos: Tensor,
}

/// On-tape soft prompt outputs for every class.
pub struct SoftPromptVars<'t> {
    pub context: Var<'t>,
    /// Mean token embedding per class, `[C, embed_dim]`.
    pub pooled: Var<'t>,
    /// θ(t_c), `[C, projection_dim]`.
    pub features: Var<'t>,
}

impl SoftPromptSet {
    /// Gaussian(0, 0.02) context initialization.
    pub fn init(
        class_names: &[String],
        context_len: usize,
        tokenizer: &Tokenizer,
        weights: &FrozenWeights,
        seed: u64,
    ) -> Result<Self> {
        let d = weights.config.embed_dim;
        let dist = Normal::new(0.0f32, 0.02).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = Tensor::from_fn(&[context_len, d], |_| dist.sample(&mut rng))?;
        Self::with_context(class_names, context, tokenizer, weights)
    }

    pub fn with_context(
        class_names: &[String],
        context: Tensor,
        tokenizer: &Tokenizer,
        weights: &FrozenWeights,
    ) -> Result<Self> {
        let ids = class_names.iter().map(|c| tokenizer.ids(c)).collect();
        Self::from_token_ids(class_names, ids, context, weights)
    }

    /// Rebuilds a prompt set from stored class-name token ids.
    pub fn from_token_ids(
        class_names: &[String],
        class_ids: Vec<Vec<u32>>,
        context: Tensor,
        weights: &FrozenWeights,
    ) -> Result<Self> {
        let d = weights.config.embed_dim;
        if context.rank() != 2 || context.shape()[1] != d {
            return Err(Error::Invalid(format!(
                "context must be [context_len, {d}], got {:?}",
                context.shape()
            )));
        }
        if class_ids.len() != class_names.len() {
            return Err(Error::Invalid("one token sequence per class is required".into()));
        }
        let class_embeddings = class_names
            .iter()
            .zip(&class_ids)
            .map(|(c, ids)| {
                let len = context.shape()[0] + ids.len() + 2;
                if ids.is_empty() || len > weights.config.max_text_len {
                    return Err(Error::Invalid(format!(
                        "class name {c:?} yields a soft sequence of length {len}"
                    )));
                }
                weights.embed_tokens(ids)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            context: context.with_requires_grad(true),
            class_names: class_names.to_vec(),
            class_ids,
            class_embeddings,
            bos: weights.embed_tokens(&[BOS])?,
            eos: weights.embed_tokens(&[EOS])?,
        })
    }

    /// Token ids of every class name, in class order.
    pub fn class_token_ids(&self) -> &[Vec<u32>] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    /// Assembles and encodes every class prompt. The context enters the tape
    /// as one trainable leaf shared by all classes.
    pub fn forward<'t>(&self, tape: &'t Tape, weights: &FrozenWeights) -> Result<SoftPromptVars<'t>> {
        let context = tape.param(&self.context);
        let bos = tape.constant(self.bos.clone());
        let eos = tape.constant(self.eos.clone());
        let mut pooled = Vec::with_capacity(self.len());
        let mut features = Vec::with_capacity(self.len());
        let (d, p) = (weights.config.embed_dim, weights.config.projection_dim);
        for class in &self.class_embeddings {
            let name = tape.constant(class.clone());
            let seq = tape.concat(&[bos, context, name, eos], 0)?;
            pooled.push(seq.mean_axis(0)?.reshape(&[1, d])?);
            features.push(weights.text_encode(tape, seq)?.reshape(&[1, p])?);
        }
        Ok(SoftPromptVars {
            context,
            pooled: tape.concat(&pooled, 0)?,
            features: tape.concat(&features, 0)?,
        })
    }

    /// Off-tape `[C, projection_dim]` text features.
    pub fn features(&self, weights: &FrozenWeights) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, weights)?.features.to_tensor())
    }
}

/// Contrastive soft-to-hard classification: for every hard anchor d the
/// softmax over soft prompts c of `cos(soft_c, hard_d) / tau` must pick
/// c = d. Returns the mean cross-entropy over the C anchors.
pub fn contrastive_alignment<'t>(soft: Var<'t>, hard: Var<'t>, tau: Temperature) -> Result<Var<'t>> {
    let (s, h) = (soft.shape(), hard.shape());
    if s.len() != 2 || h.len() != 2 || s[0] != h[0] {
        return Err(Error::Invalid(format!(
            "class-count mismatch between soft {s:?} and hard {h:?}"
        )));
    }
    if s[1] != h[1] {
        return Err(Error::Invalid(format!("feature size mismatch {s:?} vs {h:?}")));
    }
    let c = s[0];
    let sims = hard.l2_normalize().matmul_t(&soft.l2_normalize())?;
    let targets: Vec<usize> = (0..c).collect();
    Ok(sims.scale(1.0 / tau.get()).cross_entropy(&targets)?)
}

/// Token-level alignment over mean-pooled token embeddings, `[C, embed_dim]`.
pub fn token_level_alignment_loss<'t>(
    soft_pooled: Var<'t>,
    hard_pooled: Var<'t>,
    tau: Temperature,
) -> Result<Var<'t>> {
    contrastive_alignment(soft_pooled, hard_pooled, tau)
}

/// Prompt-level alignment over encoded text features, `[C, projection_dim]`.
pub fn prompt_level_alignment_loss<'t>(
    soft_features: Var<'t>,
    hard_features: Var<'t>,
    tau: Temperature,
) -> Result<Var<'t>> {
    contrastive_alignment(soft_features, hard_features, tau)
}

pub fn textual_alignment_loss<'t>(token_level: Var<'t>, prompt_level: Var<'t>) -> Result<Var<'t>> {
    Ok(token_level.add(&prompt_level)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderConfig;

    fn descs() -> Vec<ClassDescription> {
        ["anger", "happiness", "surprise"]
            .iter()
            .map(|c| ClassDescription {
                class_name: c.to_string(),
                description: format!("distinct cues of {c} around the eyes and mouth"),
                source: DescriptionSource::FixtureFile,
            })
            .collect()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            image_size: 8,
            image_channels: 1,
            patch_size: 4,
            vocab_size: 128,
            max_text_len: 40,
            projection_dim: 8,
        }
    }

    #[test]
    fn templates_render() {
        assert_eq!(Template::Generic.render("anger", "x"), "a photo of anger");
        let t3 = Template::ExpressionWithDescription.render("anger", "tight lips");
        assert!(t3.contains("anger") && t3.contains("tight lips"));
        assert!(Template::from_index(4).is_err());
    }

    #[test]
    fn hard_prompts_are_deterministic() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 1).unwrap();
        let tok = build_tokenizer(&descs(), cfg.vocab_size, cfg.max_text_len);
        let a = HardPromptSet::build(&descs(), Template::ExpressionWithDescription, &tok, &w).unwrap();
        let b = HardPromptSet::build(&descs(), Template::ExpressionWithDescription, &tok, &w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for p in &a.prompts {
            let n: f32 = p.feature.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(!p.embeddings.requires_grad());
        }
    }

    #[test]
    fn soft_prompts_train_only_context() {
        let cfg = small();
        let w = FrozenWeights::init(&cfg, 1).unwrap();
        let tok = build_tokenizer(&descs(), cfg.vocab_size, cfg.max_text_len);
        let names: Vec<String> = descs().iter().map(|d| d.class_name.clone()).collect();
        let soft = SoftPromptSet::init(&names, 4, &tok, &w, 0).unwrap();
        let hard = HardPromptSet::build(&descs(), Template::ExpressionWithDescription, &tok, &w).unwrap();
        let tape = Tape::new();
        let vars = soft.forward(&tape, &w).unwrap();
        let hp = tape.constant(hard.pooled().unwrap());
        let hf = tape.constant(hard.features().unwrap());
        let tau = Temperature::default();
        let l = textual_alignment_loss(
            token_level_alignment_loss(vars.pooled, hp, tau).unwrap(),
            prompt_level_alignment_loss(vars.features, hf, tau).unwrap(),
        )
        .unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(vars.context).is_some());
        assert!(g.get(hp).is_none() && g.get(hf).is_none());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(contrastive_alignment(a, b, Temperature::default()).is_err());
    }

    #[test]
    fn single_class_loss_is_zero() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 3], vec![0.2, 0.1, -0.5]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.3]).unwrap());
        let l = contrastive_alignment(a, b, Temperature::default()).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert_eq!(Temperature::new(0.5).unwrap().get(), 0.5);
    }
}

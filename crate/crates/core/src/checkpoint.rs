//! Checkpoints: trainable prompts, prototypes and the metadata needed to
//! rebuild the frozen encoder, stored in the named-tensor file format.

use std::path::Path;

use mpaf_tensor::Tensor;

use crate::config::TrainConfig;
use crate::encoder::{FrozenWeights, VisualPromptStack};
use crate::prompts::SoftPromptSet;
use crate::tensorfile::{self, tensor_text, text_tensor};
use crate::{Error, Result};

pub const CONTEXT: &str = "soft.context";
pub const VISUAL_PROMPTS: &str = "visual.prompts";
pub const PROTOTYPES: &str = "prototypes";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub classes: Vec<String>,
    /// Token ids of each class name as used by the soft prompts.
    pub class_token_ids: Vec<Vec<u32>>,
    pub dataset_hash: String,
    pub frozen_checksum: String,
    /// 0 for the initialization snapshot.
    pub epoch: usize,
    pub context: Tensor,
    pub visual_prompts: Option<Tensor>,
    pub prototypes: Tensor,
}

fn ids_text(ids: &[Vec<u32>]) -> String {
    ids.iter()
        .map(|row| {
            row.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" ")
                + "\n"
        })
        .collect()
}

impl Checkpoint {
    /// Entries in fixed order; the byte encoding is a function of the values.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut e = vec![
            ("meta.config".to_string(), text_tensor(&self.config.to_text())),
            ("meta.classes".to_string(), text_tensor(&(self.classes.join("\n") + "\n"))),
            ("meta.class_token_ids".to_string(), text_tensor(&ids_text(&self.class_token_ids))),
            ("meta.dataset_hash".to_string(), text_tensor(&self.dataset_hash)),
            ("meta.frozen_checksum".to_string(), text_tensor(&self.frozen_checksum)),
            ("meta.epoch".to_string(), Tensor::scalar(self.epoch as f32)),
            (CONTEXT.to_string(), plain(&self.context)),
        ];
        if let Some(p) = &self.visual_prompts {
            e.push((VISUAL_PROMPTS.to_string(), plain(p)));
        }
        e.push((PROTOTYPES.to_string(), plain(&self.prototypes)));
        e
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
        };
        let text = |name: &str| tensor_text(&get(name)?);
        let config = TrainConfig::parse(&text("meta.config")?)?;
        let classes: Vec<String> = text("meta.classes")?.lines().map(String::from).collect();
        let class_token_ids = text("meta.class_token_ids")?
            .lines()
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Checkpoint(format!("bad token id {t:?}"))))
                    .collect::<Result<Vec<u32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if class_token_ids.len() != classes.len() {
            return Err(Error::Checkpoint("class token ids do not match classes".into()));
        }
        let visual_prompts = entries
            .iter()
            .find(|(n, _)| n == VISUAL_PROMPTS)
            .map(|(_, t)| t.clone());
        if visual_prompts.is_some() != config.visual_prompts {
            return Err(Error::Checkpoint(
                "visual prompt entry disagrees with the stored config".into(),
            ));
        }
        Ok(Self {
            epoch: get("meta.epoch")?.item()? as usize,
            dataset_hash: text("meta.dataset_hash")?,
            frozen_checksum: text("meta.frozen_checksum")?,
            context: get(CONTEXT)?,
            prototypes: get(PROTOTYPES)?,
            visual_prompts,
            class_token_ids,
            classes,
            config,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        tensorfile::encode(&self.to_entries())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensorfile::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(tensorfile::load(path)?)
    }

    /// Refuses a dataset whose class list or geometry differs from training.
    pub fn check_dataset(&self, dataset_hash: &str) -> Result<()> {
        if self.dataset_hash != dataset_hash {
            return Err(Error::HashMismatch {
                checkpoint: self.dataset_hash.clone(),
                dataset: dataset_hash.to_string(),
            });
        }
        Ok(())
    }

    /// Rebuilds the frozen encoder and prompts for inference. Fails if the
    /// regenerated weights do not match the stored checksum.
    pub fn model(&self) -> Result<Model> {
        let weights = FrozenWeights::init(&self.config.encoder, self.config.weight_seed)?;
        let checksum = weights.checksum();
        if checksum != self.frozen_checksum {
            return Err(Error::Checkpoint(format!(
                "frozen weights regenerate to {checksum}, checkpoint expects {}",
                self.frozen_checksum
            )));
        }
        let soft = SoftPromptSet::from_token_ids(
            &self.classes,
            self.class_token_ids.clone(),
            self.context.clone(),
            &weights,
        )?;
        let text_features = soft.features(&weights)?;
        let visual = self
            .visual_prompts
            .clone()
            .map(|p| VisualPromptStack { prompts: p });
        Ok(Model {
            weights,
            text_features,
            visual,
            k: self.config.k,
            local_alignment: self.config.local_alignment,
        })
    }
}

fn plain(t: &Tensor) -> Tensor {
    t.clone().with_requires_grad(false)
}

/// Everything inference needs: frozen weights, fixed class text features
/// and the (optional) visual prompts.
pub struct Model {
    pub weights: FrozenWeights,
    /// `[C, projection_dim]`
    pub text_features: Tensor,
    pub visual: Option<VisualPromptStack>,
    pub k: usize,
    pub local_alignment: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip_bytes() {
        let ck = Checkpoint {
            config: TrainConfig::default(),
            classes: vec!["a".into(), "b".into()],
            class_token_ids: vec![vec![4], vec![5, 6]],
            dataset_hash: "abc".into(),
            frozen_checksum: "def".into(),
            epoch: 3,
            context: Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            visual_prompts: Some(Tensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap()),
            prototypes: Tensor::new(&[2, 2], vec![0.5; 4]).unwrap(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_entries(tensorfile::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn hash_mismatch_names_both() {
        let ck = Checkpoint {
            config: TrainConfig::default(),
            classes: vec![],
            class_token_ids: vec![],
            dataset_hash: "aaa".into(),
            frozen_checksum: String::new(),
            epoch: 0,
            context: Tensor::scalar(0.0),
            visual_prompts: None,
            prototypes: Tensor::scalar(0.0),
        };
        let msg = ck.check_dataset("bbb").unwrap_err().to_string();
        assert!(msg.contains("aaa") && msg.contains("bbb"));
    }
}

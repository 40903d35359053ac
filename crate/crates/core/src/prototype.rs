//! Frozen class prototypes and the prototype-guided visual alignment loss.

use mpaf_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Metric;
use crate::encoder::FrozenWeights;
use crate::{Error, Result};

/// Per-class mean of frozen global image features.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    /// `[C, projection_dim]`
    pub prototypes: Tensor,
    /// Images per class requested; `None` means the full class.
    pub subset_size: Option<usize>,
    pub subset_seed: u64,
    /// Images actually averaged per class.
    pub counts: Vec<usize>,
}

impl PrototypeTable {
    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        self.prototypes.row(class)
    }
}

/// Seeded uniform sampling without replacement of up to `subset_size`
/// samples per class. Returns sorted sample indices per class.
pub fn select_subset(
    labels: &[usize],
    class_names: &[String],
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(name.clone()));
        }
        if let Some(n) = subset_size {
            if n < members.len() {
                members.shuffle(&mut rng);
                members.truncate(n);
                members.sort_unstable();
            }
        }
        out.push(members);
    }
    Ok(out)
}

/// Averages the given `[projection_dim]` features per class subset, reducing
/// in subset order.
pub fn mean_features(
    features: &[Tensor],
    subsets: &[Vec<usize>],
    subset_size: Option<usize>,
    subset_seed: u64,
) -> Result<PrototypeTable> {
    let dim = features
        .first()
        .map(|f| f.numel())
        .ok_or_else(|| Error::Invalid("no features to average".into()))?;
    let mut data = Vec::with_capacity(subsets.len() * dim);
    for subset in subsets {
        let mut acc = vec![0.0f32; dim];
        for &i in subset {
            let f = features
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
            acc.iter_mut().zip(f.data()).for_each(|(a, v)| *a += v);
        }
        let n = subset.len() as f32;
        data.extend(acc.into_iter().map(|a| a / n));
    }
    Ok(PrototypeTable {
        prototypes: Tensor::new(&[subsets.len(), dim], data)?,
        subset_size,
        subset_seed,
        counts: subsets.iter().map(Vec::len).collect(),
    })
}

/// Encodes the selected images on the frozen path (no prompts) and averages
/// their global features per class. Only the selected images are encoded.
pub fn compute_prototypes(
    weights: &FrozenWeights,
    images: &[Tensor],
    labels: &[usize],
    class_names: &[String],
    subset_size: Option<usize>,
    subset_seed: u64,
) -> Result<PrototypeTable> {
    if images.len() != labels.len() {
        return Err(Error::Invalid("images and labels differ in length".into()));
    }
    let subsets = select_subset(labels, class_names, subset_size, subset_seed)?;
    let mut needed: Vec<usize> = subsets.iter().flatten().copied().collect();
    needed.sort_unstable();
    let mut globals: Vec<Option<Tensor>> = vec![None; images.len()];
    for chunk in needed.chunks(64) {
        let batch = stack_images(chunk.iter().map(|&i| &images[i]))?;
        let feats = weights.encode_images(&[batch], None)?;
        for (&i, f) in chunk.iter().zip(feats) {
            globals[i] = Some(f.global);
        }
    }
    let placeholder = Tensor::zeros(&[weights.config.projection_dim])?;
    let features: Vec<Tensor> = globals
        .into_iter()
        .map(|g| g.unwrap_or_else(|| placeholder.clone()))
        .collect();
    mean_features(&features, &subsets, subset_size, subset_seed)
}

/// Stacks `[H, W, C]` images into one `[B, H, W, C]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s != img.shape() => {
                return Err(Error::Invalid(format!(
                    "image shapes differ: {s:?} vs {:?}",
                    img.shape()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        count += 1;
    }
    let mut full = vec![count];
    full.extend(shape.ok_or_else(|| Error::Invalid("empty image batch".into()))?);
    Ok(Tensor::new(&full, data)?)
}

/// Mean over the batch of `M(z_i, p_{y_i})` where `M` is cosine distance
/// (`1 - cos`) or mean absolute difference.
pub fn visual_alignment_loss<'t>(
    tape: &'t Tape,
    global: Var<'t>,
    labels: &[usize],
    prototypes: &PrototypeTable,
    metric: Metric,
) -> Result<Var<'t>> {
    let shape = global.shape();
    let dim = prototypes.prototypes.shape()[1];
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != dim {
        return Err(Error::Invalid(format!(
            "global features {shape:?} do not match {} labels of dim {dim}",
            labels.len()
        )));
    }
    let mut targets = Vec::with_capacity(labels.len() * dim);
    for &y in labels {
        if y >= prototypes.num_classes() {
            return Err(Error::Invalid(format!("label {y} has no prototype")));
        }
        targets.extend_from_slice(prototypes.prototype(y));
    }
    let targets = tape.constant(Tensor::new(&shape, targets)?);
    let loss = match metric {
        Metric::CosineDistance => {
            let cos = global
                .l2_normalize()
                .mul(&targets.l2_normalize())?
                .sum_axis(1)?
                .mean();
            let one = tape.constant(Tensor::scalar(1.0));
            one.sub(&cos)?
        }
        Metric::L1 => global.sub(&targets)?.abs().mean(),
    };
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn subset_is_capped_and_deterministic() {
        let labels = [0, 1, 0, 0, 1, 0, 0];
        let a = select_subset(&labels, &names(2), Some(3), 5).unwrap();
        assert_eq!(a[0].len(), 3);
        assert_eq!(a[1], vec![1, 4]);
        assert_eq!(a, select_subset(&labels, &names(2), Some(3), 5).unwrap());
        assert!(a[0].iter().all(|&i| labels[i] == 0));
    }

    #[test]
    fn empty_class_is_named() {
        let err = select_subset(&[0, 0], &names(2), None, 0).unwrap_err();
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn mean_of_one_is_the_sample() {
        let f = vec![Tensor::vector(vec![0.5, -0.25]).unwrap()];
        let t = mean_features(&f, &[vec![0]], Some(1), 0).unwrap();
        assert_eq!(t.prototype(0), &[0.5, -0.25]);
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::new();
        let protos = PrototypeTable {
            prototypes: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            subset_size: None,
            subset_seed: 0,
            counts: vec![1, 1],
        };
        let same = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let l = visual_alignment_loss(&tape, same, &[0], &protos, Metric::CosineDistance).unwrap();
        assert!(l.item().unwrap().abs() < 1e-6);
        let l = visual_alignment_loss(&tape, same, &[0], &protos, Metric::L1).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
        let l = visual_alignment_loss(&tape, same, &[1], &protos, Metric::CosineDistance).unwrap();
        assert!((l.item().unwrap() - 1.0).abs() < 1e-6);
        assert!(visual_alignment_loss(&tape, same, &[2], &protos, Metric::L1).is_err());
    }
}

//! Input-gradient saliency maps and a PCA projection of prompted global
//! features, written as files for external inspection.

use std::fmt::Write as _;
use std::path::Path;

use mpaf_tensor::{Tape, Tensor};

use crate::checkpoint::{Checkpoint, Model};
use crate::crossmodal::{argmax_rows, logits};
use crate::data::{Dataset, Split};
use crate::eval::EVAL_BATCH;
use crate::prototype::stack_images;
use crate::{tensorfile, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    /// `|d logit_pred / d pixel|` summed over channels, `[H, W]`.
    pub raw: Tensor,
    /// `raw` min-max scaled to `[0, 1]`; all zeros when `raw` is constant.
    pub normalized: Tensor,
    pub predicted: usize,
}

fn min_max(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / range).collect()
}

impl Model {
    /// Gradient of each image's predicted-class logit with respect to its
    /// pixels. Images in a batch do not interact, so one backward pass over
    /// the summed selected logits yields every per-image gradient.
    pub fn saliency(&self, images: &[Tensor]) -> Result<Vec<Saliency>> {
        let classes = self.text_features.shape()[0];
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let tape = Tape::new();
            let input = tape.leaf(stack_images(chunk)?.with_requires_grad(true));
            let prompts = self.visual.as_ref().map(|v| tape.constant(v.prompts.clone()));
            let (feats, _) = self.weights.image_encode_batch(&tape, input, prompts)?;
            let locals = self.local_alignment.then_some(feats.locals);
            let text = tape.constant(self.text_features.clone());
            let lg = logits(feats.global, locals, text, self.k)?;
            let preds = argmax_rows(lg.value().data(), classes);
            let mut mask = vec![0.0f32; chunk.len() * classes];
            for (b, &p) in preds.iter().enumerate() {
                mask[b * classes + p] = 1.0;
            }
            let selected = lg
                .mul(&tape.constant(Tensor::new(&[chunk.len(), classes], mask)?))?
                .sum();
            let grads = tape.backward(selected)?;
            let g = grads
                .get(input)
                .ok_or_else(|| Error::Invalid("image gradient missing".into()))?;
            let shape = chunk[0].shape();
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            for (b, &pred) in preds.iter().enumerate() {
                let img = &g[b * h * w * c..(b + 1) * h * w * c];
                let raw: Vec<f32> = img.chunks(c).map(|px| px.iter().map(|v| v.abs()).sum()).collect();
                out.push(Saliency {
                    normalized: Tensor::new(&[h, w], min_max(&raw))?,
                    raw: Tensor::new(&[h, w], raw)?,
                    predicted: pred,
                });
            }
        }
        Ok(out)
    }
}

/// Mean of `values` inside and outside `mask`.
pub fn region_means(values: &[f32], mask: &[bool]) -> (f64, f64) {
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            si += v as f64;
            ni += 1;
        } else {
            so += v as f64;
            no += 1;
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

fn pgm(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes `saliency.csv` (one row per image: path, label, prediction and the
/// normalized grid in row-major order), plus `NNNNN.mpaf` and `NNNNN.pgm`
/// per image. Returns the maps in split order.
pub fn export_saliency(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    limit: Option<usize>,
    out: &Path,
) -> Result<Vec<Saliency>> {
    checkpoint.check_dataset(&dataset.hash())?;
    let model = checkpoint.model()?;
    let data = dataset.split(split);
    let n = limit.unwrap_or(data.len()).min(data.len());
    let maps = model.saliency(&data.images[..n])?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("path,label,predicted,saliency\n");
    for (i, s) in maps.iter().enumerate() {
        let _ = write!(csv, "{},{},{}", data.paths[i], data.labels[i], s.predicted);
        let cells: Vec<String> = s.normalized.data().iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(csv, ",{}", cells.join(" "));
        let stem = out.join(format!("{i:05}"));
        tensorfile::save(
            &stem.with_extension("mpaf"),
            &[("saliency".into(), s.normalized.clone()), ("raw".into(), s.raw.clone())],
        )?;
        let p = stem.with_extension("pgm");
        std::fs::write(&p, pgm(&s.normalized)).map_err(|e| Error::io(&p, e))?;
    }
    let p = out.join("saliency.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    Ok(maps)
}

/// Top-`components` principal axes of row-major `[n, d]` data by power
/// iteration with deflation. Each axis is sign-fixed so its largest-magnitude
/// entry is positive.
pub fn principal_axes(data: &[f64], n: usize, d: usize, components: usize) -> Vec<Vec<f64>> {
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row: Vec<f64> = (0..d).map(|j| data[i * d + j] - mean[j]).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..components.min(d) {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
        for _ in 0..500 {
            let mut next: Vec<f64> = (0..d).map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum()).collect();
            for ax in &axes {
                let p: f64 = next.iter().zip(ax).map(|(x, y)| x * y).sum();
                next.iter_mut().zip(ax).for_each(|(x, y)| *x -= p * y);
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            next.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            if delta < 1e-12 {
                break;
            }
        }
        let pivot = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    axes
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub labels: Vec<usize>,
    /// `(pc1, pc2)` per sample.
    pub coords: Vec<(f64, f64)>,
}

impl Projection {
    pub fn csv(&self) -> String {
        let mut s = String::from("index,label,pc1,pc2\n");
        for (i, (l, (a, b))) in self.labels.iter().zip(&self.coords).enumerate() {
            let _ = writeln!(s, "{i},{l},{a:.6},{b:.6}");
        }
        s
    }
}

/// Projects row-major `[n, d]` features onto their top two principal axes.
pub fn project(features: &[f64], n: usize, d: usize, labels: Vec<usize>) -> Projection {
    let axes = principal_axes(features, n, d, 2);
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| features[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let coord = |i: usize, ax: Option<&Vec<f64>>| {
        ax.map_or(0.0, |ax| (0..d).map(|j| (features[i * d + j] - mean[j]) * ax[j]).sum())
    };
    let coords = (0..n).map(|i| (coord(i, axes.first()), coord(i, axes.get(1)))).collect();
    Projection { labels, coords }
}

/// Prompted global features of one split, row-major `[n, projection_dim]`.
pub fn global_features(model: &Model, images: &[Tensor]) -> Result<Vec<f64>> {
    Ok(model
        .encode(images)?
        .iter()
        .flat_map(|f| f.global.data().iter().map(|&v| v as f64))
        .collect())
}

pub fn export_projection(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    out: &Path,
) -> Result<Projection> {
    checkpoint.check_dataset(&dataset.hash())?;
    let model = checkpoint.model()?;
    let data = dataset.split(split);
    let feats = global_features(&model, &data.images)?;
    let d = model.weights.config.projection_dim;
    let proj = project(&feats, data.len(), d, data.labels.clone());
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out, proj.csv()).map_err(|e| Error::io(out, e))?;
    Ok(proj)
}

/// Mean silhouette coefficient with Euclidean distances over row-major
/// `[n, d]` points.
pub fn silhouette(points: &[f64], d: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let dist = |a: usize, b: usize| {
        (0..d)
            .map(|j| (points[a * d + j] - points[b * d + j]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes];
        let mut counts = vec![0usize; classes];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_normalizes_to_zero() {
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn pca_finds_dominant_axis() {
        let pts: Vec<f64> = (0..20)
            .flat_map(|i| {
                let t = i as f64 - 10.0;
                [3.0 * t, 0.1 * ((i % 3) as f64), 0.0]
            })
            .collect();
        let axes = principal_axes(&pts, 20, 3, 2);
        // The second coordinate correlates weakly with the first, so the
        // leading axis is close to, not exactly, e0.
        assert!(axes[0][0] > 1.0 - 1e-6, "{:?}", axes[0]);
        let dot: f64 = axes[0].iter().zip(&axes[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9);
        assert!(axes[1][1].abs() > 0.99, "{:?}", axes[1]);
        let p = project(&pts, 20, 3, vec![0; 20]);
        assert_eq!(p.coords.len(), 20);
        assert_eq!(p.csv().lines().count(), 21);
    }

    #[test]
    fn silhouette_of_separated_clusters_is_high() {
        let pts = [0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 10.1, 0.0];
        let s = silhouette(&pts, 2, &[0, 0, 1, 1]);
        assert!(s > 0.95);
        assert!(silhouette(&pts, 2, &[0, 1, 0, 1]) < 0.0);
    }

    #[test]
    fn region_means_split() {
        assert_eq!(region_means(&[1.0, 3.0, 5.0], &[true, false, false]), (1.0, 4.0));
    }
}

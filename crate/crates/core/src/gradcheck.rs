//! Finite-difference verification of the training losses.
//!
//! Analytic gradients come from the tape (f32). Numeric gradients are
//! central differences of independent f64 re-implementations of each loss,
//! which keeps round-off out of the comparison.

use mpaf_tensor::{compare_gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Metric;
use crate::crossmodal::{image_text_loss, logits, total_loss};
use crate::prompts::{
    prompt_level_alignment_loss, textual_alignment_loss, token_level_alignment_loss, Temperature,
};
use crate::prototype::{visual_alignment_loss, PrototypeTable};
use crate::Result;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-5;
const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    TokenAlignment,
    PromptAlignment,
    VisualCosine,
    VisualL1,
    ImageText,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::TokenAlignment,
        LossKind::PromptAlignment,
        LossKind::VisualCosine,
        LossKind::VisualL1,
        LossKind::ImageText,
        LossKind::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::TokenAlignment => "l_ta",
            LossKind::PromptAlignment => "l_pa",
            LossKind::VisualCosine => "l_v_cosine",
            LossKind::VisualL1 => "l_v_l1",
            LossKind::ImageText => "l_vt",
            LossKind::Total => "l_total",
        }
    }
}

/// One random problem. Matrices are row-major.
#[derive(Clone, Debug)]
pub struct Instance {
    pub classes: usize,
    pub dim: usize,
    pub batch: usize,
    pub locals: usize,
    pub k: usize,
    pub tau: f32,
    pub tau_logits: f32,
    pub beta: f32,
    pub gamma: f32,
    pub labels: Vec<usize>,
    pub soft_pooled: Vec<f32>,
    pub hard_pooled: Vec<f32>,
    pub soft_features: Vec<f32>,
    pub hard_features: Vec<f32>,
    pub global: Vec<f32>,
    pub local: Vec<f32>,
    pub prototypes: Vec<f32>,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    for r in v.chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-3);
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Instance {
    /// Dimensions at most 16. Top-k boundaries keep a margin so a finite
    /// difference step never reorders the selection.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let classes = rng.random_range(2..=8);
            let dim = rng.random_range(2..=16);
            let batch = rng.random_range(1..=6);
            let locals = rng.random_range(2..=16);
            let k = rng.random_range(1..=locals);
            let inst = Self {
                classes,
                dim,
                batch,
                locals,
                k,
                tau: [0.07, 0.2, 0.5, 1.0][rng.random_range(0..4)],
                tau_logits: [0.07, 0.5][rng.random_range(0..2)],
                beta: rng.random_range(0.0..2.0),
                gamma: rng.random_range(0.0..2.0),
                labels: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
                soft_pooled: unit_rows(&mut rng, classes, dim),
                hard_pooled: unit_rows(&mut rng, classes, dim),
                soft_features: unit_rows(&mut rng, classes, dim),
                hard_features: unit_rows(&mut rng, classes, dim),
                global: unit_rows(&mut rng, batch, dim),
                local: unit_rows(&mut rng, batch * locals, dim),
                prototypes: unit_rows(&mut rng, classes, dim).iter().map(|x| 0.8 * x).collect(),
            };
            if inst.topk_margin() > 1e-3 {
                return inst;
            }
        }
    }

    fn topk_margin(&self) -> f64 {
        let (d, n) = (self.dim, self.locals);
        if self.k == n {
            return f64::INFINITY;
        }
        let mut margin = f64::INFINITY;
        let text = to64(&self.soft_features);
        let local = to64(&self.local);
        for b in 0..self.batch {
            for c in 0..self.classes {
                let mut s: Vec<f64> = (0..n)
                    .map(|i| dot(&local[(b * n + i) * d..(b * n + i + 1) * d], &text[c * d..(c + 1) * d]))
                    .collect();
                s.sort_by(|x, y| y.total_cmp(x));
                margin = margin.min(s[self.k - 1] - s[self.k]);
            }
        }
        margin
    }

    /// Names of the inputs each loss is differentiated against.
    fn inputs(&self, kind: LossKind) -> &'static [&'static str] {
        match kind {
            LossKind::TokenAlignment => &["soft_pooled"],
            LossKind::PromptAlignment => &["soft_features"],
            LossKind::VisualCosine | LossKind::VisualL1 => &["global"],
            LossKind::ImageText => &["global", "local", "soft_features"],
            LossKind::Total => &["soft_pooled", "soft_features", "global", "local"],
        }
    }

    fn field(&self, name: &str) -> &Vec<f32> {
        match name {
            "soft_pooled" => &self.soft_pooled,
            "soft_features" => &self.soft_features,
            "global" => &self.global,
            "local" => &self.local,
            _ => unreachable!("unknown input {name}"),
        }
    }
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// f64 inputs for the reference losses.
struct Ref {
    soft_pooled: Vec<f64>,
    soft_features: Vec<f64>,
    global: Vec<f64>,
    local: Vec<f64>,
}

fn ref_contrastive(soft: &[f64], hard: &[f64], c: usize, d: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..c {
        let s: Vec<f64> = (0..c)
            .map(|j| cos(&hard[a * d..(a + 1) * d], &soft[j * d..(j + 1) * d]) / tau)
            .collect();
        total += log_sum_exp(&s) - s[a];
    }
    total / c as f64
}

fn ref_visual(inst: &Instance, global: &[f64], metric: Metric) -> f64 {
    let d = inst.dim;
    let protos = to64(&inst.prototypes);
    let mut total = 0.0;
    for (b, &y) in inst.labels.iter().enumerate() {
        let z = &global[b * d..(b + 1) * d];
        let p = &protos[y * d..(y + 1) * d];
        total += match metric {
            Metric::CosineDistance => 1.0 - cos(z, p),
            Metric::L1 => z.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / d as f64,
        };
    }
    total / inst.batch as f64
}

fn ref_image_text(inst: &Instance, r: &Ref) -> f64 {
    let (d, n, c) = (inst.dim, inst.locals, inst.classes);
    let mut total = 0.0;
    for (b, &y) in inst.labels.iter().enumerate() {
        let z = &r.global[b * d..(b + 1) * d];
        let row: Vec<f64> = (0..c)
            .map(|j| {
                let t = &r.soft_features[j * d..(j + 1) * d];
                let mut s: Vec<f64> = (0..n)
                    .map(|i| dot(&r.local[(b * n + i) * d..(b * n + i + 1) * d], t))
                    .collect();
                s.sort_by(|x, y| y.total_cmp(x));
                let local = s[..inst.k].iter().sum::<f64>() / inst.k as f64;
                (dot(z, t) + local) / inst.tau_logits as f64
            })
            .collect();
        total += log_sum_exp(&row) - row[y];
    }
    total / inst.batch as f64
}

fn reference_loss(kind: LossKind, inst: &Instance, r: &Ref) -> f64 {
    let (c, d, tau) = (inst.classes, inst.dim, inst.tau as f64);
    let ta = || ref_contrastive(&r.soft_pooled, &to64(&inst.hard_pooled), c, d, tau);
    let pa = || ref_contrastive(&r.soft_features, &to64(&inst.hard_features), c, d, tau);
    match kind {
        LossKind::TokenAlignment => ta(),
        LossKind::PromptAlignment => pa(),
        LossKind::VisualCosine => ref_visual(inst, &r.global, Metric::CosineDistance),
        LossKind::VisualL1 => ref_visual(inst, &r.global, Metric::L1),
        LossKind::ImageText => ref_image_text(inst, r),
        LossKind::Total => {
            ref_image_text(inst, r)
                + inst.beta as f64 * (ta() + pa())
                + inst.gamma as f64 * ref_visual(inst, &r.global, Metric::CosineDistance)
        }
    }
}

fn reference(inst: &Instance) -> Ref {
    Ref {
        soft_pooled: to64(&inst.soft_pooled),
        soft_features: to64(&inst.soft_features),
        global: to64(&inst.global),
        local: to64(&inst.local),
    }
}

/// Central differences of the f64 reference loss, per input, in input
/// order.
pub fn numeric_gradients(kind: LossKind, inst: &Instance) -> Vec<Vec<f32>> {
    let base = reference(inst);
    inst.inputs(kind)
        .iter()
        .map(|&name| {
            let len = inst.field(name).len();
            (0..len)
                .map(|i| {
                    let eval = |delta: f64| {
                        let mut r = Ref {
                            soft_pooled: base.soft_pooled.clone(),
                            soft_features: base.soft_features.clone(),
                            global: base.global.clone(),
                            local: base.local.clone(),
                        };
                        let v = match name {
                            "soft_pooled" => &mut r.soft_pooled,
                            "soft_features" => &mut r.soft_features,
                            "global" => &mut r.global,
                            _ => &mut r.local,
                        };
                        v[i] += delta;
                        reference_loss(kind, inst, &r)
                    };
                    ((eval(STEP) - eval(-STEP)) / (2.0 * STEP)) as f32
                })
                .collect()
        })
        .collect()
}

/// Tape loss value and gradients, per input, in input order.
pub fn analytic_gradients(kind: LossKind, inst: &Instance) -> Result<(f32, Vec<Vec<f32>>)> {
    let tape = Tape::new();
    let (c, d, b, n) = (inst.classes, inst.dim, inst.batch, inst.locals);
    let names = inst.inputs(kind);
    let leaf = |name: &str, shape: &[usize]| -> Result<Var> {
        let t = Tensor::new(shape, inst.field(name).clone())?;
        Ok(if names.contains(&name) {
            tape.leaf(t.with_requires_grad(true))
        } else {
            tape.constant(t)
        })
    };
    let soft_pooled = leaf("soft_pooled", &[c, d])?;
    let soft_features = leaf("soft_features", &[c, d])?;
    let global = leaf("global", &[b, d])?;
    let local = leaf("local", &[b, n, d])?;
    let hard_pooled = tape.constant(Tensor::new(&[c, d], inst.hard_pooled.clone())?);
    let hard_features = tape.constant(Tensor::new(&[c, d], inst.hard_features.clone())?);
    let protos = PrototypeTable {
        prototypes: Tensor::new(&[c, d], inst.prototypes.clone())?,
        subset_size: None,
        subset_seed: 0,
        counts: vec![1; c],
    };
    let tau = Temperature::new(inst.tau)?;
    let l_vt = || -> Result<Var> {
        let lg = logits(global, Some(local), soft_features, inst.k)?;
        image_text_loss(lg, &inst.labels, inst.tau_logits)
    };
    let loss = match kind {
        LossKind::TokenAlignment => token_level_alignment_loss(soft_pooled, hard_pooled, tau)?,
        LossKind::PromptAlignment => prompt_level_alignment_loss(soft_features, hard_features, tau)?,
        LossKind::VisualCosine => {
            visual_alignment_loss(&tape, global, &inst.labels, &protos, Metric::CosineDistance)?
        }
        LossKind::VisualL1 => visual_alignment_loss(&tape, global, &inst.labels, &protos, Metric::L1)?,
        LossKind::ImageText => l_vt()?,
        LossKind::Total => {
            let l_t = textual_alignment_loss(
                token_level_alignment_loss(soft_pooled, hard_pooled, tau)?,
                prompt_level_alignment_loss(soft_features, hard_features, tau)?,
            )?;
            let l_v = visual_alignment_loss(&tape, global, &inst.labels, &protos, Metric::CosineDistance)?;
            total_loss(l_vt()?, l_t, l_v, inst.beta, inst.gamma)?
        }
    };
    let value = loss.item()?;
    let grads = tape.backward(loss)?;
    let vars = [
        ("soft_pooled", soft_pooled),
        ("soft_features", soft_features),
        ("global", global),
        ("local", local),
    ];
    let out = names
        .iter()
        .map(|name| {
            let var = vars.iter().find(|(n, _)| n == name).expect("known input").1;
            grads
                .get(var)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inst.field(name).len()])
        })
        .collect();
    Ok((value, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub kind: LossKind,
    pub trials: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Seed of the first failing instance.
    pub first_failure: Option<u64>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks one instance; also verifies the reference and tape loss values
/// agree.
pub fn check_instance(kind: LossKind, inst: &Instance) -> Result<(bool, f64, f64)> {
    let (value, analytic) = analytic_gradients(kind, inst)?;
    let numeric = numeric_gradients(kind, inst);
    let reference = reference_loss(kind, inst, &reference(inst));
    let mut ok = (value as f64 - reference).abs() <= 1e-4 * reference.abs().max(1.0);
    let (mut rel, mut abs) = (0.0f64, 0.0f64);
    for (a, n) in analytic.iter().zip(&numeric) {
        let cmp = compare_gradients(a, n, REL_TOL, ABS_FLOOR);
        ok &= cmp.passed();
        rel = rel.max(cmp.max_rel_err);
        abs = abs.max(cmp.max_abs_err);
    }
    Ok((ok, rel, abs))
}

/// `trials` seeded instances per loss; instance seeds are `seed + i`.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseReport>> {
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let mut report = CaseReport {
                kind,
                trials,
                failures: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                first_failure: None,
            };
            for i in 0..trials as u64 {
                let s = seed.wrapping_add(i);
                let (ok, rel, abs) = check_instance(kind, &Instance::random(s))?;
                report.max_rel_err = report.max_rel_err.max(rel);
                report.max_abs_err = report.max_abs_err.max(abs);
                if !ok {
                    report.failures += 1;
                    report.first_failure.get_or_insert(s);
                }
            }
            Ok(report)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_instances_pass() {
        for kind in LossKind::ALL {
            for s in 0..3 {
                let (ok, rel, _) = check_instance(kind, &Instance::random(s)).unwrap();
                assert!(ok, "{} seed {s}: rel {rel}", kind.name());
            }
        }
    }

    #[test]
    fn instances_are_reproducible() {
        let (a, b) = (Instance::random(7), Instance::random(7));
        assert_eq!(a.global, b.global);
        assert_eq!(a.labels, b.labels);
    }
}

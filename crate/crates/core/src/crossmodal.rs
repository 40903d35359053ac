//! Global-local cross-modal alignment: top-k sparse local similarity,
//! combined logits, the image-text loss and the total objective.

use mpaf_tensor::Var;

use crate::{Error, Result};

/// Mean of the `k` largest `<z_i, text>` over local rows `[N_l, D]`
/// (ties to the lower index). `k` is capped at `N_l`.
pub fn topk_sparse_similarity<'t>(locals: Var<'t>, text: Var<'t>, k: usize) -> Result<Var<'t>> {
    let (ls, ts) = (locals.shape(), text.shape());
    if ls.len() != 2 || ts.len() != 1 || ls[1] != ts[0] {
        return Err(Error::Invalid(format!(
            "locals {ls:?} and text feature {ts:?} do not conform"
        )));
    }
    let k = k.min(ls[0]).max(1);
    let sims = locals.matmul(&text.reshape(&[ts[0], 1])?)?;
    Ok(sims.topk_mean(0, k)?.reshape(&[])?)
}

/// Per-sample, per-class logits `[B, C]`:
/// `<z^g, θ(t_d)> + topk_mean_i <z_i, θ(t_d)>`, with top-k chosen
/// independently for every class. `locals` is `None` when the local term is
/// ablated.
pub fn logits<'t>(
    global: Var<'t>,
    locals: Option<Var<'t>>,
    text: Var<'t>,
    k: usize,
) -> Result<Var<'t>> {
    let (gs, ts) = (global.shape(), text.shape());
    if gs.len() != 2 || ts.len() != 2 || gs[1] != ts[1] {
        return Err(Error::Invalid(format!(
            "global {gs:?} and text {ts:?} features do not conform"
        )));
    }
    let global_sim = global.matmul_t(&text)?;
    match locals {
        None => Ok(global_sim),
        Some(l) => {
            let s = l.shape();
            if s.len() != 3 || s[0] != gs[0] || s[2] != gs[1] {
                return Err(Error::Invalid(format!("locals {s:?} do not match global {gs:?}")));
            }
            let k = k.min(s[1]).max(1);
            let local_sim = l.matmul_t(&text)?.topk_mean(1, k)?;
            Ok(global_sim.add(&local_sim)?)
        }
    }
}

/// Mean cross-entropy of `logits / tau_logits` against `labels`.
pub fn image_text_loss<'t>(logits: Var<'t>, labels: &[usize], tau_logits: f32) -> Result<Var<'t>> {
    if tau_logits <= 0.0 {
        return Err(Error::Config(format!("tau_logits must be positive, got {tau_logits}")));
    }
    Ok(logits.scale(1.0 / tau_logits).cross_entropy(labels)?)
}

/// `L_vt + beta * L_t + gamma * L_v`.
pub fn total_loss<'t>(
    image_text: Var<'t>,
    textual: Var<'t>,
    visual: Var<'t>,
    beta: f32,
    gamma: f32,
) -> Result<Var<'t>> {
    Ok(image_text
        .add(&textual.scale(beta))?
        .add(&visual.scale(gamma))?)
}

/// Index of the largest logit in each row (first on ties).
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpaf_tensor::{Tape, Tensor};

    #[test]
    fn k_equal_to_rows_is_plain_mean() {
        let tape = Tape::new();
        let locals = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap());
        let text = tape.constant(Tensor::vector(vec![0.6, 0.8]).unwrap());
        let all = topk_sparse_similarity(locals, text, 3).unwrap().item().unwrap();
        assert!((all - (0.6 + 0.8 + 1.0) / 3.0).abs() < 1e-6);
        let one = topk_sparse_similarity(locals, text, 1).unwrap().item().unwrap();
        assert!((one - 1.0).abs() < 1e-6);
        let capped = topk_sparse_similarity(locals, text, 16).unwrap().item().unwrap();
        assert_eq!(capped, all);
    }

    #[test]
    fn degenerate_locals_double_the_global_term() {
        let tape = Tape::new();
        let g = Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap();
        let global = tape.constant(g.clone());
        let locals = tape.constant(Tensor::new(&[1, 4, 2], g.data().repeat(4)).unwrap());
        let text = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = logits(global, Some(locals), text, 2).unwrap().to_tensor();
        assert!((out.data()[0] - 1.2).abs() < 1e-6 && (out.data()[1] - 1.6).abs() < 1e-6);
    }

    #[test]
    fn total_loss_limits() {
        let tape = Tape::new();
        let s = |v: f32| tape.constant(Tensor::scalar(v));
        let t = total_loss(s(0.5), s(0.3), s(0.2), 1.0, 1.0).unwrap().item().unwrap();
        assert!((t - 1.0).abs() < 1e-6);
        let t = total_loss(s(0.5), s(0.3), s(0.2), 0.0, 0.0).unwrap().item().unwrap();
        assert_eq!(t, 0.5);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 7]).unwrap());
        let loss = image_text_loss(l, &[0, 6], 0.07).unwrap().item().unwrap();
        assert!((loss - 7f32.ln()).abs() < 1e-5);
        assert!(image_text_loss(l, &[7, 0], 0.07).is_err());
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_rows(&[0.1, 0.5, 0.5, 2.0, 1.0, -1.0], 3), vec![1, 0]);
    }
}

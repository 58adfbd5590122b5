//! The combined training objective for one batch and its parameter gradients,
//! plus the finite-difference harness that checks them.

use crate::encoder::{accumulate_gradients, encode_and_classify, EncoderParams, ForwardTrace, Upstream};
use crate::error::{DatError, Result};
use crate::losses::{
    ce_clamped, contrastive_loss, supervised_loss, total_loss, unlabeled_loss, LossBreakdown, LossConfig, LossParts,
};
use crate::pseudo::{assemble_triplets, build_batch_triplets, BatchTriplets, LabeledView, PseudoLabel, UnlabeledView, ViewSource};

/// Augmented views for one step plus the class text features.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub labeled: Vec<LabeledView>,
    pub unlabeled: Vec<UnlabeledView>,
    pub class_text_feats: Vec<Vec<f64>>,
}

/// Coefficients of the scalar that is differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub x: f64,
    pub u: f64,
    pub con: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        LossWeights { x: 1.0, u: cfg.eta, con: cfg.lambda }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// `x * L_x + u * L_u + con * L_con` for the requested weights.
    pub objective: f64,
    pub grads: EncoderParams,
    pub pseudo: Vec<PseudoLabel>,
    pub triplets: BatchTriplets,
}

fn onehot_residual(probs: &[f64], y: usize, scale: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| (p - if c == y { 1.0 } else { 0.0 }) * scale)
        .collect()
}

fn forward_all(params: &EncoderParams, views: impl Iterator<Item = (usize, Vec<f64>)>) -> Result<Vec<ForwardTrace>> {
    views
        .map(|(_, x)| encode_and_classify(params, &x))
        .collect()
}

/// Evaluates the objective. `fixed_pseudo` freezes the pseudo-labels (the
/// finite-difference harness needs a fixed confident set); otherwise they are
/// taken from the weak views under `params`.
pub fn evaluate(
    params: &EncoderParams,
    inputs: &StepInputs,
    loss_cfg: &LossConfig,
    t_thresh: f64,
    weights: LossWeights,
    fixed_pseudo: Option<&[PseudoLabel]>,
) -> Result<Evaluation> {
    let b = inputs.labeled.len();
    let mu_b = inputs.unlabeled.len();
    let labeled = forward_all(params, inputs.labeled.iter().map(|l| (l.sample_id, l.weak.clone())))?;
    let weak = forward_all(params, inputs.unlabeled.iter().map(|u| (u.record_id, u.weak.clone())))?;
    let strong = forward_all(params, inputs.unlabeled.iter().map(|u| (u.record_id, u.strong.clone())))?;

    let (triplets, pseudo) = match fixed_pseudo {
        Some(fixed) => {
            let t = assemble_triplets(&inputs.labeled, &inputs.unlabeled, fixed, &inputs.class_text_feats)?;
            (t, fixed.to_vec())
        }
        None => {
            let weak_probs: Vec<Vec<f64>> = weak.iter().map(|t| t.probs.clone()).collect();
            build_batch_triplets(&inputs.labeled, &inputs.unlabeled, &weak_probs, &inputs.class_text_feats, t_thresh)?
        }
    };

    let labels: Vec<usize> = inputs.labeled.iter().map(|l| l.label).collect();
    let labeled_probs: Vec<Vec<f64>> = labeled.iter().map(|t| t.probs.clone()).collect();
    let strong_probs: Vec<Vec<f64>> = strong.iter().map(|t| t.probs.clone()).collect();
    let loss_x = if b > 0 { supervised_loss(&labels, &labeled_probs)? } else { 0.0 };
    let loss_u = unlabeled_loss(&pseudo, &strong_probs, mu_b)?;
    let n_confident = pseudo.iter().filter(|p| p.confident).count();
    let n_clamped = labels.iter().zip(&labeled_probs).filter(|(&y, p)| ce_clamped(y, p)).count()
        + pseudo
            .iter()
            .zip(&strong_probs)
            .filter(|(pl, p)| pl.confident && ce_clamped(pl.q_hat, p))
            .count();

    let trace_of = |s: ViewSource| match s {
        ViewSource::Labeled(i) => &labeled[i],
        ViewSource::UnlabeledWeak(j) => &weak[j],
        ViewSource::UnlabeledStrong(j) => &strong[j],
    };
    let contrastive = if triplets.len() >= 2 {
        let images: Vec<Vec<f64>> = triplets.triplets.iter().map(|t| trace_of(t.source).normalized.clone()).collect();
        let texts: Vec<Vec<f64>> = triplets.triplets.iter().map(|t| t.text_feat.clone()).collect();
        Some(contrastive_loss(&images, &texts, &triplets.labels(), loss_cfg)?)
    } else {
        None
    };
    let (loss_i2t, loss_t2i) = contrastive.as_ref().map_or((0.0, 0.0), |c| (c.loss_i2t, c.loss_t2i));
    let breakdown = total_loss(
        LossParts { loss_x, loss_u, loss_i2t, loss_t2i, n_confident, n_clamped },
        loss_cfg,
    );
    for (name, v) in [("loss_x", loss_x), ("loss_u", loss_u), ("loss_con", breakdown.loss_con)] {
        if !v.is_finite() {
            return Err(DatError::Numeric(format!("{name} = {v}")));
        }
    }
    let objective = weights.x * loss_x + weights.u * loss_u + weights.con * breakdown.loss_con;

    // upstream gradients, one per trace, in the order labeled, weak, strong
    let mut up_labeled = vec![Upstream::default(); b];
    let mut up_weak = vec![Upstream::default(); mu_b];
    let mut up_strong = vec![Upstream::default(); mu_b];
    if weights.x != 0.0 && b > 0 {
        let scale = weights.x / b as f64;
        for ((u, t), &y) in up_labeled.iter_mut().zip(&labeled).zip(&labels) {
            u.d_logits = Some(onehot_residual(&t.probs, y, scale));
        }
    }
    if weights.u != 0.0 && mu_b > 0 {
        let scale = weights.u / mu_b as f64;
        for ((u, t), pl) in up_strong.iter_mut().zip(&strong).zip(&pseudo) {
            if pl.confident {
                u.d_logits = Some(onehot_residual(&t.probs, pl.q_hat, scale));
            }
        }
    }
    if weights.con != 0.0 {
        if let Some(c) = &contrastive {
            for (t, g) in triplets.triplets.iter().zip(&c.grad_images) {
                let scaled: Vec<f64> = g.iter().map(|v| v * weights.con).collect();
                let slot = match t.source {
                    ViewSource::Labeled(i) => &mut up_labeled[i],
                    ViewSource::UnlabeledWeak(j) => &mut up_weak[j],
                    ViewSource::UnlabeledStrong(j) => &mut up_strong[j],
                };
                slot.d_normalized = Some(scaled);
            }
        }
    }
    let mut grads = params.zeros_like();
    accumulate_gradients(params, &labeled, &up_labeled, &mut grads)?;
    accumulate_gradients(params, &weak, &up_weak, &mut grads)?;
    accumulate_gradients(params, &strong, &up_strong, &mut grads)?;

    Ok(Evaluation {
        breakdown,
        objective,
        grads,
        pseudo,
        triplets,
    })
}

/// Maximum over parameters of `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`,
/// with central differences of width `2 * step` and pseudo-labels frozen at
/// their value under `params`.
pub fn finite_diff_check(
    params: &EncoderParams,
    inputs: &StepInputs,
    loss_cfg: &LossConfig,
    t_thresh: f64,
    weights: LossWeights,
    step: f64,
) -> Result<f64> {
    let base = evaluate(params, inputs, loss_cfg, t_thresh, weights, None)?;
    let pseudo = base.pseudo.clone();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.num_params() {
        let orig = params.get(i);
        probe.set(i, orig + step);
        let plus = evaluate(&probe, inputs, loss_cfg, t_thresh, weights, Some(&pseudo))?.objective;
        probe.set(i, orig - step);
        let minus = evaluate(&probe, inputs, loss_cfg, t_thresh, weights, Some(&pseudo))?.objective;
        probe.set(i, orig);
        let fd = (plus - minus) / (2.0 * step);
        let ga = base.grads.get(i);
        worst = worst.max((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
    }
    Ok(worst)
}

/// A small deterministic batch for gradient checks.
pub fn gradcheck_fixture(
    seed: u64,
    input_dim: usize,
    hidden: usize,
    embed: usize,
    classes: usize,
    labeled: usize,
    unlabeled: usize,
) -> Result<(EncoderParams, StepInputs)> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut params = crate::encoder::init_params(seed, input_dim, hidden, embed, classes)?;
    // sharper head so some unlabeled views clear a moderate threshold
    for w in &mut params.head.weight {
        *w *= 4.0;
    }
    let mut r = crate::rng::stream(&[crate::rng::domain::FIXTURE, seed]);
    let vec_of = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
    };
    let unit = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..embed).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let n = crate::encoder::l2(&v);
        v.into_iter().map(|x| x / n).collect()
    };
    let class_text_feats: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut r)).collect();
    let labeled = (0..labeled)
        .map(|i| LabeledView { sample_id: i, weak: vec_of(input_dim, &mut r), label: r.gen_range(0..classes) })
        .collect();
    let unlabeled = (0..unlabeled)
        .map(|j| {
            let weak = vec_of(input_dim, &mut r);
            let strong = vec_of(input_dim, &mut r);
            UnlabeledView { record_id: j, weak, strong, caption_feat: Some(unit(&mut r)) }
        })
        .collect();
    Ok((params, StepInputs { labeled, unlabeled, class_text_feats }))
}

/// The loss terms a gradient fixture isolates.
pub const GRADCHECK_MODES: [(&str, LossWeights); 4] = [
    ("loss_x", LossWeights { x: 1.0, u: 0.0, con: 0.0 }),
    ("loss_u", LossWeights { x: 0.0, u: 1.0, con: 0.0 }),
    ("loss_con", LossWeights { x: 0.0, u: 0.0, con: 1.0 }),
    ("total", LossWeights { x: 1.0, u: 1.0, con: 1.0 }),
];

/// Finite-difference errors of every mode on the fixture of `seed`
/// (at most 10 triplets, d = 4, C = 3, default temperature).
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let (params, inputs) = gradcheck_fixture(seed, 6, 5, 4, 3, 3, 3)?;
    let cfg = LossConfig::default();
    // threshold between the two least confident weak views, so the mask
    // keeps some views and drops others
    let mut conf = inputs
        .unlabeled
        .iter()
        .map(|u| Ok(encode_and_classify(&params, &u.weak)?.probs.into_iter().fold(0.0, f64::max)))
        .collect::<Result<Vec<f64>>>()?;
    conf.sort_by(f64::total_cmp);
    let t = 0.5 * (conf[0] + conf[1]);
    GRADCHECK_MODES
        .iter()
        .map(|&(name, w)| Ok((name, finite_diff_check(&params, &inputs, &cfg, t, w, 1e-5)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_parameter_has_zero_error() {
        let (mut params, inputs) = gradcheck_fixture(0, 4, 3, 3, 2, 3, 0).unwrap();
        // a class never predicted still couples through softmax, so instead
        // check a loss that ignores the head bias: contrastive only
        params.head.bias.iter_mut().for_each(|b| *b = 0.0);
        let w = LossWeights { x: 0.0, u: 0.0, con: 1.0 };
        let cfg = LossConfig::default();
        let base = evaluate(&params, &inputs, &cfg, 0.95, w, None).unwrap();
        assert!(base.grads.head.bias.iter().all(|&g| g == 0.0));
        let err = finite_diff_check(&params, &inputs, &cfg, 0.95, w, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn full_objective_seed_zero() {
        let (params, inputs) = gradcheck_fixture(0, 5, 4, 4, 3, 3, 4).unwrap();
        let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
        let err = finite_diff_check(&params, &inputs, &cfg, 0.5, LossWeights::from_config(&cfg), 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn linear_head_cross_entropy_is_tight() {
        let (params, inputs) = gradcheck_fixture(1, 4, 3, 3, 3, 4, 0).unwrap();
        let w = LossWeights { x: 1.0, u: 0.0, con: 0.0 };
        let cfg = LossConfig::default();
        let base = evaluate(&params, &inputs, &cfg, 0.95, w, None).unwrap();
        // head-only central differences
        let offset = params.num_params() - params.head.weight.len() - params.head.bias.len();
        let mut worst: f64 = 0.0;
        for i in offset..params.num_params() {
            let mut p = params.clone();
            p.set(i, params.get(i) + 1e-5);
            let plus = evaluate(&p, &inputs, &cfg, 0.95, w, None).unwrap().objective;
            p.set(i, params.get(i) - 1e-5);
            let minus = evaluate(&p, &inputs, &cfg, 0.95, w, None).unwrap().objective;
            let fd = (plus - minus) / 2e-5;
            let ga = base.grads.get(i);
            worst = worst.max((ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8));
        }
        assert!(worst <= 1e-8, "{worst}");
    }

    #[test]
    fn breakdown_identity() {
        let (params, inputs) = gradcheck_fixture(2, 5, 4, 4, 3, 3, 5).unwrap();
        let cfg = LossConfig { eta: 0.7, lambda: 0.3, ..LossConfig::default() };
        let e = evaluate(&params, &inputs, &cfg, 0.4, LossWeights::from_config(&cfg), None).unwrap();
        let b = e.breakdown;
        assert!((b.loss_total - (b.loss_x + 0.7 * b.loss_u + 0.3 * b.loss_con)).abs() <= 1e-12);
        assert!(b.loss_x >= 0.0 && b.loss_u >= 0.0 && b.loss_con >= 0.0);
        assert_eq!(e.triplets.len(), 3 + 5 + b.n_confident);
    }
}

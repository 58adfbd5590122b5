//! Confidence-thresholded pseudo-labels and the unified image-text-label
//! triplet space built from one training batch.

use crate::error::{DatError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub sample_id: usize,
    pub q_hat: usize,
    pub confidence: f64,
    pub confident: bool,
}

/// Argmax (lowest index on ties) with an inclusive `>=` threshold on the
/// maximum probability.
pub fn pseudo_label(sample_id: usize, probs: &[f64], t_thresh: f64) -> Result<PseudoLabel> {
    if probs.is_empty() {
        return Err(DatError::Shape("empty probability vector".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
        return Err(DatError::Numeric(format!("pseudo-label probabilities contain {bad}")));
    }
    let mut q_hat = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[q_hat] {
            q_hat = c;
        }
    }
    let confidence = probs[q_hat];
    Ok(PseudoLabel {
        sample_id,
        q_hat,
        confidence,
        confident: confidence >= t_thresh,
    })
}

/// Label of the `j`-th (1-based) strong view in a batch: `j + max_yl`.
pub fn strong_label(j: usize, max_yl: usize) -> usize {
    debug_assert!(j >= 1, "strong-view index is 1-based");
    j + max_yl
}

/// Prompt used for the downstream and pseudo-labeled text side.
pub fn class_template(name: &str, description: &str) -> String {
    format!("a photo of {name}. {description}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Downstream,
    WeakPretrain,
    StrongPretrain,
}

/// Which forward pass produced a triplet's image embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    Labeled(usize),
    UnlabeledWeak(usize),
    UnlabeledStrong(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image: Vec<f64>,
    pub text_feat: Vec<f64>,
    pub label: usize,
    pub origin: Origin,
    pub source: ViewSource,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchTriplets {
    pub triplets: Vec<Triplet>,
}

impl BatchTriplets {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.label).collect()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.triplets.iter().filter(|t| t.origin == origin).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub sample_id: usize,
    pub weak: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledView {
    pub record_id: usize,
    pub weak: Vec<f64>,
    pub strong: Vec<f64>,
    pub caption_feat: Option<Vec<f64>>,
}

/// Emits downstream triplets for every labeled sample, weak triplets for
/// confident unlabeled samples, and strong triplets for every unlabeled
/// sample. Also returns the pseudo-labels in unlabeled order.
pub fn build_batch_triplets(
    labeled: &[LabeledView],
    unlabeled: &[UnlabeledView],
    weak_probs: &[Vec<f64>],
    class_text_feats: &[Vec<f64>],
    t_thresh: f64,
) -> Result<(BatchTriplets, Vec<PseudoLabel>)> {
    if weak_probs.len() != unlabeled.len() {
        return Err(DatError::Shape(format!(
            "{} unlabeled views but {} probability rows",
            unlabeled.len(),
            weak_probs.len()
        )));
    }
    let pseudo = unlabeled
        .iter()
        .zip(weak_probs)
        .map(|(u, p)| pseudo_label(u.record_id, p, t_thresh))
        .collect::<Result<Vec<_>>>()?;
    let triplets = assemble_triplets(labeled, unlabeled, &pseudo, class_text_feats)?;
    Ok((triplets, pseudo))
}

/// Triplet assembly from already-decided pseudo-labels.
pub fn assemble_triplets(
    labeled: &[LabeledView],
    unlabeled: &[UnlabeledView],
    pseudo: &[PseudoLabel],
    class_text_feats: &[Vec<f64>],
) -> Result<BatchTriplets> {
    if pseudo.len() != unlabeled.len() {
        return Err(DatError::Shape("one pseudo-label per unlabeled view required".into()));
    }
    let classes = class_text_feats.len();
    if classes == 0 {
        return Err(DatError::Shape("no class text features".into()));
    }
    let max_yl = classes - 1;
    let mut triplets = Vec::with_capacity(labeled.len() + 2 * unlabeled.len());
    for (i, l) in labeled.iter().enumerate() {
        if l.label >= classes {
            return Err(DatError::Shape(format!("label {} outside {classes} classes", l.label)));
        }
        triplets.push(Triplet {
            image: l.weak.clone(),
            text_feat: class_text_feats[l.label].clone(),
            label: l.label,
            origin: Origin::Downstream,
            source: ViewSource::Labeled(i),
        });
    }
    for (j, (u, pl)) in unlabeled.iter().zip(pseudo).enumerate() {
        if pl.confident {
            if pl.q_hat >= classes {
                return Err(DatError::Shape(format!("pseudo-label {} outside {classes} classes", pl.q_hat)));
            }
            triplets.push(Triplet {
                image: u.weak.clone(),
                text_feat: class_text_feats[pl.q_hat].clone(),
                label: pl.q_hat,
                origin: Origin::WeakPretrain,
                source: ViewSource::UnlabeledWeak(j),
            });
        }
    }
    for (j, u) in unlabeled.iter().enumerate() {
        let caption = u
            .caption_feat
            .as_ref()
            .ok_or_else(|| DatError::Shape(format!("record {} has no caption feature", u.record_id)))?;
        triplets.push(Triplet {
            image: u.strong.clone(),
            text_feat: caption.clone(),
            label: strong_label(j + 1, max_yl),
            origin: Origin::StrongPretrain,
            source: ViewSource::UnlabeledStrong(j),
        });
    }
    Ok(BatchTriplets { triplets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_label_examples() {
        let a = pseudo_label(0, &[0.96, 0.04], 0.95).unwrap();
        assert_eq!((a.q_hat, a.confident), (0, true));
        assert!(!pseudo_label(0, &[0.5, 0.5], 0.95).unwrap().confident);
        let b = pseudo_label(0, &[0.2, 0.3, 0.5], 0.5).unwrap();
        assert_eq!((b.q_hat, b.confident), (2, true));
        assert_eq!(pseudo_label(0, &[0.5, 0.5], 0.4).unwrap().q_hat, 0);
        assert!(pseudo_label(0, &[f64::NAN, 1.0], 0.5).is_err());
    }

    #[test]
    fn strong_label_examples() {
        assert_eq!(strong_label(1, 9), 10);
        assert_eq!(strong_label(3, 9), 12);
        assert_eq!(strong_label(1, 0), 1);
    }

    fn views(nl: usize, nu: usize) -> (Vec<LabeledView>, Vec<UnlabeledView>, Vec<Vec<f64>>) {
        let labeled = (0..nl)
            .map(|i| LabeledView { sample_id: i, weak: vec![i as f64, 1.0], label: i % 2 })
            .collect();
        let unlabeled = (0..nu)
            .map(|j| UnlabeledView {
                record_id: 100 + j,
                weak: vec![1.0, j as f64],
                strong: vec![0.0, j as f64],
                caption_feat: Some(vec![0.6, 0.8]),
            })
            .collect();
        (labeled, unlabeled, vec![vec![1.0, 0.0], vec![0.0, 1.0]])
    }

    #[test]
    fn counting_without_confident() {
        let (l, u, f) = views(2, 4);
        let probs = vec![vec![0.5, 0.5]; 4];
        let (b, _) = build_batch_triplets(&l, &u, &probs, &f, 0.95).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.count(Origin::WeakPretrain), 0);
    }

    #[test]
    fn counting_all_confident() {
        let (l, u, f) = views(2, 4);
        let probs = vec![vec![0.01, 0.99]; 4];
        let (b, pl) = build_batch_triplets(&l, &u, &probs, &f, 0.95).unwrap();
        assert_eq!(b.len(), 10);
        assert!(pl.iter().all(|p| p.confident));
        for t in &b.triplets {
            match t.origin {
                Origin::StrongPretrain => assert!(t.label >= 2),
                _ => assert!(t.label < 2),
            }
        }
    }

    #[test]
    fn weak_triplet_uses_class_template_feature() {
        let (l, u, f) = views(1, 2);
        let probs = vec![vec![0.5, 0.5], vec![0.02, 0.98]];
        let (b, _) = build_batch_triplets(&l, &u, &probs, &f, 0.95).unwrap();
        let weak: Vec<&Triplet> = b.triplets.iter().filter(|t| t.origin == Origin::WeakPretrain).collect();
        assert_eq!(weak.len(), 1);
        assert_eq!(weak[0].label, 1);
        assert_eq!(weak[0].text_feat, f[1]);
        assert_eq!(weak[0].source, ViewSource::UnlabeledWeak(1));
    }

    #[test]
    fn missing_caption_is_error() {
        let (l, mut u, f) = views(1, 1);
        u[0].caption_feat = None;
        assert!(build_batch_triplets(&l, &u, &[vec![0.5, 0.5]], &f, 0.95).is_err());
    }
}

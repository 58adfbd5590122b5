//! Supervised, pseudo-label and bidirectional image-text contrastive losses.

use crate::encoder::dot;
use crate::error::{DatError, Result};
use crate::pseudo::PseudoLabel;

/// Floor applied to probabilities before taking a log.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorReduction {
    Sum,
    Mean,
}

impl AnchorReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorReduction::Sum => "sum",
            AnchorReduction::Mean => "mean",
        }
    }
}

impl std::str::FromStr for AnchorReduction {
    type Err = DatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(AnchorReduction::Sum),
            "mean" => Ok(AnchorReduction::Mean),
            other => Err(DatError::Config(format!("anchor_reduction must be sum or mean, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub eta: f64,
    pub lambda: f64,
    pub anchor_reduction: AnchorReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            eta: 1.0,
            lambda: 1.0,
            anchor_reduction: AnchorReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(DatError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.eta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(DatError::Config("eta and lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub n_confident: usize,
    /// Cross-entropy terms whose probability hit [`PROB_EPSILON`].
    pub n_clamped: usize,
}

/// `-ln p[y]`, with `p[y]` floored at [`PROB_EPSILON`].
pub fn cross_entropy(y: usize, p: &[f64]) -> f64 {
    -p[y].max(PROB_EPSILON).ln()
}

pub(crate) fn ce_clamped(y: usize, p: &[f64]) -> bool {
    p[y] < PROB_EPSILON
}

/// Mean cross-entropy over the labeled batch.
pub fn supervised_loss(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64> {
    if labels.is_empty() {
        return Err(DatError::Shape("supervised loss needs at least one sample".into()));
    }
    if labels.len() != probs.len() {
        return Err(DatError::Shape(format!("{} labels but {} probability rows", labels.len(), probs.len())));
    }
    for (&y, p) in labels.iter().zip(probs) {
        if y >= p.len() {
            return Err(DatError::Shape(format!("label {y} outside {} classes", p.len())));
        }
    }
    let sum: f64 = labels.iter().zip(probs).map(|(&y, p)| cross_entropy(y, p)).sum();
    Ok(sum / labels.len() as f64)
}

/// Masked cross-entropy on strong views, divided by the full unlabeled
/// count `mu_b` rather than by the confident count.
pub fn unlabeled_loss(pseudo: &[PseudoLabel], strong_probs: &[Vec<f64>], mu_b: usize) -> Result<f64> {
    if mu_b == 0 {
        return Ok(0.0);
    }
    if pseudo.len() != mu_b || strong_probs.len() != mu_b {
        return Err(DatError::Shape(format!(
            "expected {mu_b} pseudo-labels and strong rows, got {} and {}",
            pseudo.len(),
            strong_probs.len()
        )));
    }
    let sum: f64 = pseudo
        .iter()
        .zip(strong_probs)
        .filter(|(pl, _)| pl.confident)
        .map(|(pl, p)| cross_entropy(pl.q_hat, p))
        .fold(0.0, |a, b| a + b);
    Ok(sum / mu_b as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub loss_con: f64,
    /// Per-anchor terms, text anchors for i2t and image anchors for t2i.
    pub i2t_terms: Vec<f64>,
    pub t2i_terms: Vec<f64>,
    /// `d loss_con / d v_i`; text features receive none.
    pub grad_images: Vec<Vec<f64>>,
}

fn check_unit(kind: &str, rows: &[Vec<f64>]) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let n = dot(r, r).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(DatError::Degenerate(format!("{kind} {i} has norm {n}, expected unit")));
        }
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Bidirectional supervised InfoNCE over `N` image-text pairs whose positive
/// sets are defined by equal labels. Logits are `v_i . t_j / tau`.
pub fn contrastive_loss(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<ContrastiveOutput> {
    let n = images.len();
    if n < 2 {
        return Err(DatError::Shape(format!("contrastive loss needs N >= 2, got {n}")));
    }
    if texts.len() != n || labels.len() != n {
        return Err(DatError::Shape("images, texts and labels must have equal length".into()));
    }
    cfg.validate()?;
    check_unit("image embedding", images)?;
    check_unit("text feature", texts)?;

    // z[i * n + j] = v_i . t_j / tau
    let z: Vec<f64> = images
        .iter()
        .flat_map(|v| texts.iter().map(move |t| dot(v, t) / cfg.tau))
        .collect();
    let positives: Vec<Vec<usize>> = labels
        .iter()
        .map(|&y| (0..n).filter(|&k| labels[k] == y).collect())
        .collect();
    let scale = match cfg.anchor_reduction {
        AnchorReduction::Sum => 1.0,
        AnchorReduction::Mean => 1.0 / n as f64,
    };
    // d loss / d z, same layout as z
    let mut gz = vec![0.0; n * n];

    // text anchor i: softmax over images j of z[j][i]
    let mut i2t_terms = Vec::with_capacity(n);
    for i in 0..n {
        let col = (0..n).map(|j| z[j * n + i]);
        let lse = log_sum_exp(col);
        let pos = &positives[i];
        let inv = 1.0 / pos.len() as f64;
        let mean_pos: f64 = pos.iter().map(|&k| z[k * n + i]).sum::<f64>() * inv;
        i2t_terms.push(lse - mean_pos);
        for j in 0..n {
            gz[j * n + i] += scale * (z[j * n + i] - lse).exp();
        }
        for &k in pos {
            gz[k * n + i] -= scale * inv;
        }
    }

    // image anchor j: softmax over texts k of z[j][k]
    let mut t2i_terms = Vec::with_capacity(n);
    for j in 0..n {
        let row = &z[j * n..(j + 1) * n];
        let lse = log_sum_exp(row.iter().copied());
        let pos = &positives[j];
        let inv = 1.0 / pos.len() as f64;
        let mean_pos: f64 = pos.iter().map(|&k| row[k]).sum::<f64>() * inv;
        t2i_terms.push(lse - mean_pos);
        for k in 0..n {
            gz[j * n + k] += scale * (row[k] - lse).exp();
        }
        for &k in pos {
            gz[j * n + k] -= scale * inv;
        }
    }

    let d = images[0].len();
    let grad_images = (0..n)
        .map(|j| {
            let mut g = vec![0.0; d];
            for (k, t) in texts.iter().enumerate() {
                let w = gz[j * n + k] / cfg.tau;
                for (gi, &tv) in g.iter_mut().zip(t) {
                    *gi += w * tv;
                }
            }
            g
        })
        .collect();
    let loss_i2t = scale * i2t_terms.iter().sum::<f64>();
    let loss_t2i = scale * t2i_terms.iter().sum::<f64>();
    Ok(ContrastiveOutput {
        loss_i2t,
        loss_t2i,
        loss_con: loss_i2t + loss_t2i,
        i2t_terms,
        t2i_terms,
        grad_images,
    })
}

/// Components that feed [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_i2t: f64,
    pub loss_t2i: f64,
    pub n_confident: usize,
    pub n_clamped: usize,
}

pub fn total_loss(parts: LossParts, cfg: &LossConfig) -> LossBreakdown {
    let loss_con = parts.loss_i2t + parts.loss_t2i;
    LossBreakdown {
        loss_x: parts.loss_x,
        loss_u: parts.loss_u,
        loss_i2t: parts.loss_i2t,
        loss_t2i: parts.loss_t2i,
        loss_con,
        loss_total: parts.loss_x + cfg.eta * parts.loss_u + cfg.lambda * loss_con,
        n_confident: parts.n_confident,
        n_clamped: parts.n_clamped,
    }
}

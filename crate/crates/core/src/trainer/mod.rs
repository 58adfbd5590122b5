//! Batch composition, the optimization loop, evaluation and checkpoints.

pub mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::augment::{augment_view, AugmentConfig, View};
use crate::embank::{DownstreamDataset, EmbeddingBank};
use crate::encoder::{encode_and_classify, init_params, warm_start_params, EncoderParams, FrozenEmbedder};
use crate::error::{DatError, Result};
use crate::losses::{LossBreakdown, LossConfig};
use crate::objective::{self, LossWeights, StepInputs};
use crate::pseudo::{LabeledView, UnlabeledView};
use crate::rng::{self, domain};

/// Augmentation ids of unlabeled records are offset so they never collide
/// with labeled sample ids.
const UNLABELED_ID_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Unlabeled samples per labeled sample in a batch.
    pub mu: usize,
    pub t_thresh: f64,
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: AugmentConfig,
    pub warm_start: bool,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            mu: 4,
            t_thresh: 0.95,
            loss: LossConfig::default(),
            epochs: 12,
            lr: 0.05,
            momentum: 0.9,
            augment: AugmentConfig::default(),
            warm_start: false,
            hidden_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DatError::Config("batch_size must be >= 1".into()));
        }
        if !(self.t_thresh > 0.0 && self.t_thresh <= 1.0) {
            return Err(DatError::Config(format!("t_thresh {} must lie in (0, 1]", self.t_thresh)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(DatError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DatError::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.hidden_dim == 0 {
            return Err(DatError::Config("hidden_dim must be >= 1".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    pub fn unlabeled_per_step(&self) -> usize {
        self.mu * self.batch_size
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss_x: f64,
    pub loss_u: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub n_confident: usize,
    pub grad_norm: f64,
    /// Set on the last step of each epoch.
    pub acc_eval: Option<f64>,
}

impl StepMetrics {
    fn from_breakdown(step: usize, epoch: usize, b: &LossBreakdown, grad_norm: f64) -> Self {
        StepMetrics {
            step,
            epoch,
            loss_x: b.loss_x,
            loss_u: b.loss_u,
            loss_con: b.loss_con,
            loss_total: b.loss_total,
            n_confident: b.n_confident,
            grad_norm,
            acc_eval: None,
        }
    }
}

/// Indices into the dataset and into the selected bank records for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

fn permutation(len: usize, parts: &[u64]) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng::stream(parts));
    p
}

/// Labeled samples come from a per-epoch shuffle (wrapping within the epoch
/// for the last partial batch); unlabeled samples come from a global stream
/// over the selection that is reshuffled every time it wraps.
pub fn compose_batch(n: usize, selected: usize, cfg: &TrainConfig, epoch: usize, step: usize) -> Result<BatchIndices> {
    let b = cfg.batch_size;
    if b == 0 || b > n {
        return Err(DatError::Config(format!("batch_size {b} must lie in [1, n = {n}]")));
    }
    let mu_b = cfg.unlabeled_per_step();
    if mu_b > 0 && selected == 0 {
        return Err(DatError::Config("mu > 0 needs a non-empty bank selection".into()));
    }
    let order = permutation(n, &[domain::LABELED_ORDER, cfg.seed, epoch as u64]);
    let labeled = (0..b).map(|t| order[(step * b + t) % n]).collect();

    let mut unlabeled = Vec::with_capacity(mu_b);
    if mu_b > 0 {
        let start = (epoch * cfg.steps_per_epoch(n) + step) * mu_b;
        let mut cycle = usize::MAX;
        let mut perm = Vec::new();
        for pos in start..start + mu_b {
            if pos / selected != cycle {
                cycle = pos / selected;
                perm = permutation(selected, &[domain::UNLABELED_ORDER, cfg.seed, cycle as u64]);
            }
            unlabeled.push(perm[pos % selected]);
        }
    }
    Ok(BatchIndices { labeled, unlabeled })
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

fn unit_f64(x: &[f32]) -> Vec<f64> {
    let v = to_f64(x);
    let n = crate::encoder::l2(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// What the loop trains on: the labeled set, the bank and the selected
/// record ids, with text features widened to f64.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub dataset: &'a DownstreamDataset,
    pub bank: Option<&'a EmbeddingBank>,
    pub selected: &'a [usize],
    class_text_feats: Vec<Vec<f64>>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a DownstreamDataset, bank: Option<&'a EmbeddingBank>, selected: &'a [usize]) -> Result<Self> {
        if let Some(bank) = bank {
            if bank.image_dim != dataset.image_dim || bank.feat_dim != dataset.feat_dim {
                return Err(DatError::Shape("bank and dataset dims differ".into()));
            }
            if let Some(&bad) = selected.iter().find(|&&id| id >= bank.len()) {
                return Err(DatError::Shape(format!("selected id {bad} outside bank of {}", bank.len())));
            }
        } else if !selected.is_empty() {
            return Err(DatError::Config("selection given without a bank".into()));
        }
        let class_text_feats = (0..dataset.num_classes()).map(|c| unit_f64(dataset.class_text_feat(c))).collect();
        Ok(TrainData { dataset, bank, selected, class_text_feats })
    }

    pub fn class_text_feats(&self) -> &[Vec<f64>] {
        &self.class_text_feats
    }

    /// Augmented views for a composed batch.
    pub fn step_inputs(&self, idx: &BatchIndices, cfg: &TrainConfig, epoch: usize) -> StepInputs {
        let e = epoch as u64;
        let labeled = idx
            .labeled
            .iter()
            .map(|&i| LabeledView {
                sample_id: i,
                weak: augment_view(&to_f64(self.dataset.image(i)), View::Weak, &cfg.augment, cfg.seed, e, i as u64),
                label: self.dataset.labels[i] as usize,
            })
            .collect();
        let unlabeled = match self.bank {
            Some(bank) => idx
                .unlabeled
                .iter()
                .map(|&pos| {
                    let id = self.selected[pos];
                    let x = to_f64(bank.image(id));
                    let aug_id = UNLABELED_ID_OFFSET + id as u64;
                    UnlabeledView {
                        record_id: id,
                        weak: augment_view(&x, View::Weak, &cfg.augment, cfg.seed, e, aug_id),
                        strong: augment_view(&x, View::Strong, &cfg.augment, cfg.seed, e, aug_id),
                        caption_feat: Some(unit_f64(bank.caption_feat(id))),
                    }
                })
                .collect(),
            None => Vec::new(),
        };
        StepInputs {
            labeled,
            unlabeled,
            class_text_feats: self.class_text_feats.clone(),
        }
    }
}

/// SGD with heavy-ball momentum: `buf = momentum * buf + g; p -= lr * buf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: EncoderParams,
}

impl Sgd {
    pub fn new(params: &EncoderParams, lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: params.zeros_like() }
    }

    pub fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        let (lr, m) = (self.lr, self.momentum);
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = m * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// One optimization step on already-augmented inputs.
pub fn train_step(
    params: &mut EncoderParams,
    opt: &mut Sgd,
    inputs: &StepInputs,
    cfg: &TrainConfig,
    step: usize,
    epoch: usize,
) -> Result<StepMetrics> {
    if !params.is_finite() {
        return Err(DatError::Numeric("parameters before step".into()));
    }
    let eval = objective::evaluate(params, inputs, &cfg.loss, cfg.t_thresh, LossWeights::from_config(&cfg.loss), None)?;
    if !eval.breakdown.loss_total.is_finite() {
        return Err(DatError::Numeric(format!("loss_total = {}", eval.breakdown.loss_total)));
    }
    let grad_norm = eval.grads.norm();
    opt.update(params, &eval.grads);
    Ok(StepMetrics::from_breakdown(step, epoch, &eval.breakdown, grad_norm))
}

/// Initial parameters: cold seeded init, or warm start from the frozen
/// image projection.
pub fn initial_params(cfg: &TrainConfig, ds: &DownstreamDataset, frozen: Option<&FrozenEmbedder>) -> Result<EncoderParams> {
    if cfg.warm_start {
        let frozen = frozen.ok_or_else(|| DatError::Config("warm_start needs the frozen image projection".into()))?;
        warm_start_params(cfg.seed, frozen, cfg.hidden_dim, ds.num_classes())
    } else {
        init_params(cfg.seed, ds.image_dim, cfg.hidden_dim, ds.feat_dim, ds.num_classes())
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub params: EncoderParams,
    pub metrics: Vec<StepMetrics>,
}

pub fn fit(
    data: &TrainData<'_>,
    initial: EncoderParams,
    cfg: &TrainConfig,
    eval_set: Option<&DownstreamDataset>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let n = data.dataset.len();
    let steps = cfg.steps_per_epoch(n);
    let mut params = initial;
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut metrics = Vec::with_capacity(cfg.epochs * steps);
    let selected = if cfg.mu > 0 { data.selected.len() } else { 0 };
    for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let idx = compose_batch(n, selected, cfg, epoch, step)?;
            let inputs = data.step_inputs(&idx, cfg, epoch);
            let m = train_step(&mut params, &mut opt, &inputs, cfg, epoch * steps + step, epoch)?;
            metrics.push(m);
        }
        if let Some(last) = metrics.last_mut() {
            last.acc_eval = Some(evaluate(&params, eval_set.unwrap_or(data.dataset))?);
        }
    }
    Ok(FitOutput { params, metrics })
}

pub fn predict(params: &EncoderParams, x: &[f32]) -> Result<usize> {
    let t = encode_and_classify(params, &to_f64(x))?;
    let mut best = 0;
    for (c, &p) in t.probs.iter().enumerate() {
        if p > t.probs[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn evaluate(params: &EncoderParams, ds: &DownstreamDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(DatError::Degenerate("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        if predict(params, ds.image(i))? == ds.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub const METRICS_HEADER: &str = "step,epoch,loss_x,loss_u,loss_con,loss_total,n_confident,grad_norm,acc_eval";

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},",
            m.step, m.epoch, m.loss_x, m.loss_u, m.loss_con, m.loss_total, m.n_confident, m.grad_norm
        );
        if let Some(a) = m.acc_eval {
            let _ = write!(s, "{a}");
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(metrics)).map_err(|e| DatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_downstream, generate_pretrain_bank, SynthSpec};

    fn world() -> (DownstreamDataset, EmbeddingBank) {
        let spec = SynthSpec {
            num_classes: 3,
            n_per_class: 6,
            bank_size: 60,
            image_dim: 8,
            feat_dim: 4,
            num_distractors: 3,
            ..SynthSpec::default()
        };
        let ds = generate_downstream(&spec).unwrap();
        let bank = generate_pretrain_bank(&spec, &ds).unwrap().bank;
        (ds, bank)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, mu: 2, epochs: 2, hidden_dim: 6, ..TrainConfig::default() }
    }

    #[test]
    fn batch_sizes_follow_mu() {
        let cfg = TrainConfig { batch_size: 4, mu: 4, ..TrainConfig::default() };
        let idx = compose_batch(20, 50, &cfg, 0, 0).unwrap();
        assert_eq!(idx.labeled.len(), 4);
        assert_eq!(idx.unlabeled.len(), 16);
        let cfg0 = TrainConfig { mu: 0, ..cfg.clone() };
        assert!(compose_batch(20, 0, &cfg0, 0, 0).unwrap().unlabeled.is_empty());
        assert_eq!(compose_batch(20, 50, &cfg, 3, 2).unwrap(), compose_batch(20, 50, &cfg, 3, 2).unwrap());
        assert!(compose_batch(3, 50, &cfg, 0, 0).is_err());
    }

    #[test]
    fn labeled_epoch_covers_dataset() {
        let cfg = TrainConfig { batch_size: 3, mu: 0, ..TrainConfig::default() };
        let mut seen: Vec<usize> = (0..cfg.steps_per_epoch(10))
            .flat_map(|s| compose_batch(10, 0, &cfg, 1, s).unwrap().labeled)
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn unlabeled_stream_cycles() {
        let cfg = TrainConfig { batch_size: 2, mu: 3, ..TrainConfig::default() };
        let idx = compose_batch(10, 4, &cfg, 0, 0).unwrap();
        assert_eq!(idx.unlabeled.len(), 6);
        let mut first: Vec<usize> = idx.unlabeled[..4].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (ds, bank) = world();
        let sel: Vec<usize> = (0..bank.len()).collect();
        let data = TrainData::new(&ds, Some(&bank), &sel).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let init = initial_params(&cfg, &ds, None).unwrap();
        let out = fit(&data, init.clone(), &cfg, None).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (ds, bank) = world();
        let sel: Vec<usize> = (0..bank.len()).collect();
        let data = TrainData::new(&ds, Some(&bank), &sel).unwrap();
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        let init = initial_params(&cfg, &ds, None).unwrap();
        let out = fit(&data, init.clone(), &cfg, None).unwrap();
        assert_eq!(out.params, init);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn step_descends_on_same_batch() {
        let (ds, bank) = world();
        let sel: Vec<usize> = (0..bank.len()).collect();
        let data = TrainData::new(&ds, Some(&bank), &sel).unwrap();
        let cfg = TrainConfig { lr: 1e-3, t_thresh: 0.4, ..small_cfg() };
        let mut params = initial_params(&cfg, &ds, None).unwrap();
        let idx = compose_batch(ds.len(), sel.len(), &cfg, 0, 0).unwrap();
        let inputs = data.step_inputs(&idx, &cfg, 0);
        let w = LossWeights::from_config(&cfg.loss);
        let before = objective::evaluate(&params, &inputs, &cfg.loss, cfg.t_thresh, w, None).unwrap();
        let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
        train_step(&mut params, &mut opt, &inputs, &cfg, 0, 0).unwrap();
        let after = objective::evaluate(&params, &inputs, &cfg.loss, cfg.t_thresh, w, Some(&before.pseudo)).unwrap();
        assert!(after.objective < before.objective, "{} -> {}", before.objective, after.objective);
    }

    #[test]
    fn fit_is_deterministic() {
        let (ds, bank) = world();
        let sel: Vec<usize> = (0..bank.len()).collect();
        let data = TrainData::new(&ds, Some(&bank), &sel).unwrap();
        let cfg = small_cfg();
        let a = fit(&data, initial_params(&cfg, &ds, None).unwrap(), &cfg, None).unwrap();
        let b = fit(&data, initial_params(&cfg, &ds, None).unwrap(), &cfg, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics.len(), 2 * cfg.steps_per_epoch(ds.len()));
        assert!(a.metrics.iter().filter(|m| m.acc_eval.is_some()).count() == 2);
    }

    #[test]
    fn accuracy_examples() {
        let (ds, _) = world();
        let mut p = init_params(0, ds.image_dim, 4, ds.feat_dim, ds.num_classes()).unwrap();
        p.head.weight.iter_mut().for_each(|w| *w = 0.0);
        p.head.bias = vec![0.0, 0.0, 0.0];
        // all-tie logits predict class 0
        let acc = evaluate(&p, &ds).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        p.head.bias = vec![0.0, 1.0, 0.0];
        assert!((evaluate(&p, &ds).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_layout() {
        let m = StepMetrics {
            step: 0,
            epoch: 0,
            loss_x: 1.5,
            loss_u: 0.0,
            loss_con: 2.0,
            loss_total: 3.5,
            n_confident: 3,
            grad_norm: 0.25,
            acc_eval: None,
        };
        let s = metrics_csv(&[m.clone(), StepMetrics { acc_eval: Some(0.5), step: 1, ..m }]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,0,1.5,0,2,3.5,3,0.25,");
        assert_eq!(lines[2], "1,0,1.5,0,2,3.5,3,0.25,0.5");
    }
}

//! End-to-end runs on synthetic data: generate, sample, adapt, score.

use crate::embank::{DownstreamDataset, EmbeddingBank};
use crate::error::{DatError, Result};
use crate::losses::AnchorReduction;
use crate::sampler::{default_k1, default_k2, sampler_precision, stage1_sample, stage2_sample, SampleResult, SimilarityChunkPlan};
use crate::synth::{generate_downstream, generate_holdout, generate_pretrain_bank, SynthSpec};
use crate::trainer::{evaluate, fit, initial_params, FitOutput, TrainConfig, TrainData};

/// Which loss terms are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Supervised cross-entropy only.
    Baseline,
    /// Plus pseudo-label consistency.
    Unlabeled,
    /// Plus the triplet contrastive term.
    Contrastive,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Unlabeled, Variant::Contrastive, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Unlabeled => "s+u",
            Variant::Contrastive => "s+c",
            Variant::Full => "full",
        }
    }

    /// Zeroes the switched-off weights; the baseline also drops unlabeled data.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Variant::Baseline => {
                out.loss.eta = 0.0;
                out.loss.lambda = 0.0;
                out.mu = 0;
            }
            Variant::Unlabeled => out.loss.lambda = 0.0,
            Variant::Contrastive => out.loss.eta = 0.0,
            Variant::Full => {}
        }
        out
    }
}

/// Training defaults for the synthetic benchmark: mean over anchors, tau = 0.2.
pub fn benchmark_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.loss.anchor_reduction = AnchorReduction::Mean;
    cfg.loss.tau = 0.2;
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub stage1_multiplier: f64,
    pub stage2_keep: f64,
    pub plan: SimilarityChunkPlan,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            stage1_multiplier: 8.0,
            stage2_keep: 0.5,
            plan: SimilarityChunkPlan::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStage {
    pub label_bank: SampleResult,
    pub selection: SampleResult,
}

pub fn two_stage_sample(bank: &EmbeddingBank, ds: &DownstreamDataset, spec: &SynthSpec, s: &SamplerSettings) -> Result<TwoStage> {
    two_stage_sample_with(bank, ds, &spec.frozen_image(), s)
}

pub fn two_stage_sample_with(
    bank: &EmbeddingBank,
    ds: &DownstreamDataset,
    image_encoder: &crate::encoder::FrozenEmbedder,
    s: &SamplerSettings,
) -> Result<TwoStage> {
    if !(s.stage1_multiplier > 0.0) || !(s.stage2_keep > 0.0) {
        return Err(DatError::Config("sampler multipliers must be positive".into()));
    }
    let k1 = default_k1(ds.len(), ds.num_classes(), s.stage1_multiplier);
    let label_bank = stage1_sample(bank, ds, k1, &s.plan)?;
    let k2 = default_k2(label_bank.len(), ds.len(), s.stage2_keep);
    let selection = stage2_sample(&label_bank, bank, ds, image_encoder, k2, &s.plan)?;
    Ok(TwoStage { label_bank, selection })
}

/// Everything generated for one seed, shared by all variants.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: SynthSpec,
    pub dataset: DownstreamDataset,
    pub holdout: DownstreamDataset,
    pub bank: EmbeddingBank,
    pub sampled: TwoStage,
    pub precision: f64,
}

impl World {
    pub fn build(spec: &SynthSpec, holdout_per_class: usize, sampler: &SamplerSettings) -> Result<World> {
        let dataset = generate_downstream(spec)?;
        let holdout = generate_holdout(spec, holdout_per_class)?;
        let bank = generate_pretrain_bank(spec, &dataset)?.bank;
        let sampled = two_stage_sample(&bank, &dataset, spec, sampler)?;
        let precision = sampler_precision(&sampled.selection, &bank, spec.num_classes)?;
        Ok(World { spec: spec.clone(), dataset, holdout, bank, sampled, precision })
    }

    pub fn train(&self, cfg: &TrainConfig) -> Result<FitOutput> {
        let data = TrainData::new(&self.dataset, Some(&self.bank), &self.sampled.selection.selected_ids)?;
        let frozen = self.spec.frozen_image();
        let init = initial_params(cfg, &self.dataset, Some(&frozen))?;
        fit(&data, init, cfg, Some(&self.holdout))
    }

    pub fn holdout_accuracy(&self, cfg: &TrainConfig) -> Result<f64> {
        let out = self.train(cfg)?;
        evaluate(&out.params, &self.holdout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub variant: Variant,
    pub accuracy: f64,
    pub precision: f64,
}

/// Runs every requested variant on every seed; the seed overrides both the
/// synthetic spec seed and the training seed.
pub fn benchmark(
    spec: &SynthSpec,
    cfg: &TrainConfig,
    sampler: &SamplerSettings,
    holdout_per_class: usize,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<BenchmarkRow>> {
    let mut rows = Vec::with_capacity(seeds.len() * variants.len());
    for &seed in seeds {
        let world = World::build(&SynthSpec { seed, ..spec.clone() }, holdout_per_class, sampler)?;
        for &v in variants {
            let run_cfg = TrainConfig { seed, ..v.apply(cfg) };
            rows.push(BenchmarkRow {
                seed,
                variant: v,
                accuracy: world.holdout_accuracy(&run_cfg)?,
                precision: world.precision,
            });
        }
    }
    Ok(rows)
}

pub fn mean_accuracy(rows: &[BenchmarkRow], variant: Variant) -> Option<f64> {
    let accs: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_switch_weights() {
        let cfg = TrainConfig::default();
        let b = Variant::Baseline.apply(&cfg);
        assert_eq!((b.loss.eta, b.loss.lambda, b.mu), (0.0, 0.0, 0));
        let u = Variant::Unlabeled.apply(&cfg);
        assert_eq!((u.loss.eta, u.loss.lambda, u.mu), (1.0, 0.0, cfg.mu));
        let c = Variant::Contrastive.apply(&cfg);
        assert_eq!((c.loss.eta, c.loss.lambda), (0.0, 1.0));
        assert_eq!(Variant::Full.apply(&cfg), cfg);
    }

    #[test]
    fn small_world_runs() {
        let spec = SynthSpec {
            num_classes: 3,
            n_per_class: 4,
            bank_size: 300,
            image_dim: 8,
            feat_dim: 4,
            num_distractors: 3,
            ..SynthSpec::default()
        };
        let world = World::build(&spec, 5, &SamplerSettings::default()).unwrap();
        assert!(!world.sampled.selection.is_empty());
        let cfg = TrainConfig { batch_size: 4, epochs: 1, hidden_dim: 8, ..TrainConfig::default() };
        let acc = world.holdout_accuracy(&cfg).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

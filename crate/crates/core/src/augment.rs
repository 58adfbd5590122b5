//! Weak and strong views of vector images.
//!
//! Weak: additive Gaussian noise. Strong: larger noise followed by zeroing a
//! fixed number of coordinates chosen without replacement. Every view draws
//! from its own stream keyed by `(seed, epoch, sample_id, view)`.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DatError, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

impl View {
    fn tag(self) -> u64 {
        match self {
            View::Weak => 1,
            View::Strong => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    /// Fraction of coordinates zeroed in strong views, in [0, 1).
    pub mask_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma_weak: 0.1,
            sigma_strong: 0.5,
            mask_frac: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_weak >= 0.0) || !(self.sigma_strong >= 0.0) {
            return Err(DatError::Config("augmentation sigmas must be >= 0".into()));
        }
        if self.sigma_weak > self.sigma_strong {
            return Err(DatError::Config(format!(
                "sigma_weak {} exceeds sigma_strong {}",
                self.sigma_weak, self.sigma_strong
            )));
        }
        if !(0.0..1.0).contains(&self.mask_frac) {
            return Err(DatError::Config(format!("mask_frac {} must lie in [0, 1)", self.mask_frac)));
        }
        Ok(())
    }

    pub fn masked_count(&self, dim: usize) -> usize {
        (self.mask_frac * dim as f64).floor() as usize
    }
}

pub fn augment_view(x: &[f64], view: View, cfg: &AugmentConfig, seed: u64, epoch: u64, sample_id: u64) -> Vec<f64> {
    let mut r = rng::stream(&[domain::AUGMENT, seed, epoch, sample_id, view.tag()]);
    let sigma = match view {
        View::Weak => cfg.sigma_weak,
        View::Strong => cfg.sigma_strong,
    };
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| v + sigma * r.sample::<f64, _>(StandardNormal))
        .collect();
    if view == View::Strong {
        let k = cfg.masked_count(x.len());
        for i in index::sample(&mut r, x.len(), k) {
            out[i] = 0.0;
        }
    }
    out
}

//! Synthetic downstream datasets and pre-training banks with a controlled
//! in-distribution fraction and weak-pairing rate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embank::{DownstreamDataset, EmbeddingBank};
use crate::encoder::FrozenEmbedder;
use crate::error::{DatError, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub bank_size: usize,
    pub image_dim: usize,
    pub feat_dim: usize,
    /// Distance between two class prototypes.
    pub class_sep: f64,
    /// Fraction of bank records drawn from downstream classes.
    pub rho_in: f64,
    /// Probability that a record's caption is swapped for a distractor caption.
    pub p_weak: f64,
    pub noise_sigma: f64,
    /// Out-of-distribution prototypes; at least `num_classes`.
    pub num_distractors: usize,
    /// Seed of the frozen image/text projections, shared across experiments.
    pub frozen_seed: u64,
    /// Relative perturbation separating the text projection from the image one.
    pub modality_gap: f64,
    /// Text templates averaged per class; template 0 is the exact prototype.
    pub num_templates: usize,
    pub template_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            num_classes: 10,
            n_per_class: 20,
            bank_size: 8000,
            image_dim: 32,
            feat_dim: 16,
            class_sep: 4.0,
            rho_in: 0.5,
            p_weak: 0.3,
            noise_sigma: 1.0,
            num_distractors: 10,
            frozen_seed: 0,
            modality_gap: 0.2,
            num_templates: 1,
            template_jitter: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("n_per_class", self.n_per_class),
            ("bank_size", self.bank_size),
            ("image_dim", self.image_dim),
            ("feat_dim", self.feat_dim),
            ("num_templates", self.num_templates),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.num_distractors < self.num_classes {
            errs.push(format!(
                "num_distractors {} must be >= num_classes {}",
                self.num_distractors, self.num_classes
            ));
        }
        if !(self.class_sep > 0.0) {
            errs.push(format!("class_sep {} must be > 0", self.class_sep));
        }
        if !(self.noise_sigma >= 0.0) {
            errs.push(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        for (name, v) in [("rho_in", self.rho_in), ("p_weak", self.p_weak)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} {v} must lie in [0, 1]"));
            }
        }
        if self.modality_gap < 0.0 || self.template_jitter < 0.0 {
            errs.push("modality_gap and template_jitter must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DatError::Validation(errs))
        }
    }

    pub fn frozen_image(&self) -> FrozenEmbedder {
        FrozenEmbedder::image(self.frozen_seed, self.image_dim, self.feat_dim)
    }

    pub fn frozen_text(&self) -> FrozenEmbedder {
        FrozenEmbedder::text(self.frozen_seed, self.image_dim, self.feat_dim, self.modality_gap)
    }

    pub fn in_distribution_count(&self) -> usize {
        (self.rho_in * self.bank_size as f64).floor() as usize
    }
}

fn gaussian(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

/// Class prototypes first, then distractors. Orthogonal (Gram-Schmidt) while
/// the dimension allows, random directions afterwards; all with norm
/// `class_sep / sqrt(2)` so orthogonal pairs sit exactly `class_sep` apart.
pub fn prototypes(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut r = rng::stream(&[domain::PROTOTYPES, spec.seed]);
    let total = spec.num_classes + spec.num_distractors;
    let radius = spec.class_sep / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
    while basis.len() < total {
        let mut v = gaussian(&mut r, spec.image_dim);
        if basis.len() < spec.image_dim {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * radius).collect())
        .collect()
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

pub fn distractor_name(k: usize) -> String {
    format!("distractor_{k}")
}

pub fn caption_for(name: &str) -> String {
    format!("a photo of a {name}.")
}

/// Text feature of `proto`, averaged over `num_templates` jittered variants
/// and renormalized.
fn text_feature(spec: &SynthSpec, text: &FrozenEmbedder, proto: &[f64], key: u64) -> Result<Vec<f64>> {
    if spec.num_templates == 1 {
        return text.embed(proto);
    }
    let mut acc = vec![0.0; spec.feat_dim];
    for t in 0..spec.num_templates {
        let mut input = proto.to_vec();
        if t > 0 {
            let mut r = rng::stream(&[domain::TEMPLATE, spec.seed, key, t as u64]);
            for x in &mut input {
                *x += spec.template_jitter * r.sample::<f64, _>(StandardNormal);
            }
        }
        let e = text.embed(&input)?;
        acc.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(acc.into_iter().map(|x| x / norm).collect())
}

fn noisy(proto: &[f64], sigma: f64, r: &mut impl Rng) -> Vec<f32> {
    proto
        .iter()
        .map(|&p| (p + sigma * r.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

fn downstream_with(spec: &SynthSpec, noise_domain: u64, n_per_class: usize) -> Result<DownstreamDataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let text = spec.frozen_text();
    let mut r = rng::stream(&[noise_domain, spec.seed]);
    let c = spec.num_classes;
    let mut images = Vec::with_capacity(c * n_per_class * spec.image_dim);
    let mut labels = Vec::with_capacity(c * n_per_class);
    for (class, proto) in protos.iter().enumerate().take(c) {
        for _ in 0..n_per_class {
            images.extend(noisy(proto, spec.noise_sigma, &mut r));
            labels.push(class as u32);
        }
    }
    let mut class_text_feats = Vec::with_capacity(c * spec.feat_dim);
    for (class, proto) in protos.iter().take(c).enumerate() {
        let f = text_feature(spec, &text, proto, class as u64)?;
        class_text_feats.extend(f.into_iter().map(|v| v as f32));
    }
    Ok(DownstreamDataset {
        image_dim: spec.image_dim,
        feat_dim: spec.feat_dim,
        images,
        labels,
        class_names: (0..c).map(class_name).collect(),
        class_descriptions: (0..c)
            .map(|k| format!("a synthetic category whose images cluster around prototype {k}"))
            .collect(),
        class_text_feats,
    })
}

pub fn generate_downstream(spec: &SynthSpec) -> Result<DownstreamDataset> {
    downstream_with(spec, domain::DOWNSTREAM, spec.n_per_class)
}

/// An independent draw from the same classes, for held-out evaluation.
pub fn generate_holdout(spec: &SynthSpec, n_per_class: usize) -> Result<DownstreamDataset> {
    downstream_with(spec, domain::HOLDOUT, n_per_class)
}

/// A generated bank plus the indices whose captions were weak-paired.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBank {
    pub bank: EmbeddingBank,
    pub weak_paired: Vec<usize>,
}

pub fn generate_pretrain_bank(spec: &SynthSpec, ds: &DownstreamDataset) -> Result<SynthBank> {
    spec.validate()?;
    if ds.image_dim != spec.image_dim || ds.feat_dim != spec.feat_dim || ds.num_classes() != spec.num_classes {
        return Err(DatError::Shape(format!(
            "dataset dims (D_img={}, d={}, C={}) do not match spec (D_img={}, d={}, C={})",
            ds.image_dim,
            ds.feat_dim,
            ds.num_classes(),
            spec.image_dim,
            spec.feat_dim,
            spec.num_classes
        )));
    }
    let protos = prototypes(spec);
    let image_enc = spec.frozen_image();
    let text_enc = spec.frozen_text();
    let c = spec.num_classes;
    let m = spec.bank_size;
    let mut r = rng::stream(&[domain::BANK, spec.seed]);

    // which positions hold in-distribution records
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut r);
    let n_in = spec.in_distribution_count();
    let mut latent_class = vec![-1i32; m];
    let mut source = vec![0usize; m];
    for (rank, &pos) in order.iter().enumerate() {
        if rank < n_in {
            latent_class[pos] = (rank % c) as i32;
            source[pos] = rank % c;
        } else {
            source[pos] = c + (rank - n_in) % spec.num_distractors;
        }
    }

    let mut text_cache: Vec<Option<Vec<f32>>> = vec![None; protos.len()];
    let mut caption_text = |idx: usize| -> Result<Vec<f32>> {
        if text_cache[idx].is_none() {
            let key = idx as u64;
            let f = if idx < c {
                text_feature(spec, &text_enc, &protos[idx], key)?
            } else {
                text_enc.embed(&protos[idx])?
            };
            text_cache[idx] = Some(f.into_iter().map(|v| v as f32).collect());
        }
        Ok(text_cache[idx].clone().unwrap())
    };
    let name_of = |idx: usize| if idx < c { class_name(idx) } else { distractor_name(idx - c) };

    let mut images = Vec::with_capacity(m * spec.image_dim);
    let mut feats = Vec::with_capacity(m * spec.feat_dim);
    let mut caption_feats = Vec::with_capacity(m * spec.feat_dim);
    let mut captions = Vec::with_capacity(m);
    let mut weak_paired = Vec::new();
    for (i, &src) in source.iter().enumerate() {
        let img = noisy(&protos[src], spec.noise_sigma, &mut r);
        let f = image_enc.embed_f32(&img)?;
        feats.extend(f.into_iter().map(|v| v as f32));
        images.extend(img);
        let weak = r.gen::<f64>() < spec.p_weak;
        let caption_src = if weak {
            weak_paired.push(i);
            c + r.gen_range(0..spec.num_distractors)
        } else {
            src
        };
        captions.push(caption_for(&name_of(caption_src)));
        caption_feats.extend(caption_text(caption_src)?);
    }
    Ok(SynthBank {
        bank: EmbeddingBank {
            image_dim: spec.image_dim,
            feat_dim: spec.feat_dim,
            images,
            feats,
            caption_feats,
            captions,
            latent_class,
        },
        weak_paired,
    })
}

#![allow(dead_code)]

use dat_core::embank::EmbeddingBank;
use dat_core::sampler::SampleResult;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full similarity matrix computed row by row, no chunking.
pub fn full_matrix(feats: &[f32], dim: usize, queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.iter().map(|x| x / n).collect()
        })
        .collect();
    feats
        .chunks(dim)
        .map(|row| {
            let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            unit.iter()
                .map(|q| {
                    let mut acc = 0.0f64;
                    for (&a, &b) in row.iter().zip(q) {
                        acc += f64::from(a) * b;
                    }
                    acc / norm
                })
                .collect()
        })
        .collect()
}

/// Argmax assignment then a full sort of each column's rows.
pub fn brute_force_select(scores: &[Vec<f64>], columns: usize, k: usize, ids: Option<&[usize]>) -> SampleResult {
    let mut per_col: Vec<Vec<(f64, usize)>> = vec![Vec::new(); columns];
    for (i, row) in scores.iter().enumerate() {
        let mut best = 0;
        for j in 1..columns {
            if row[j] > row[best] {
                best = j;
            }
        }
        per_col[best].push((row[best], i));
    }
    let mut out = SampleResult {
        selected_ids: Vec::new(),
        assigned_column: Vec::new(),
        score: Vec::new(),
        deficits: per_col.iter().map(|c| k.saturating_sub(c.len())).collect(),
    };
    for (j, col) in per_col.iter_mut().enumerate() {
        col.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(s, i) in col.iter().take(k) {
            out.selected_ids.push(ids.map_or(i, |ids| ids[i]));
            out.assigned_column.push(j);
            out.score.push(s);
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f32> = (0..dim).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() as f32;
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

pub fn random_queries(r: &mut ChaCha8Rng, q: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..q).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

/// A bank with only features filled in; sufficient for stage-1 selection.
pub fn feature_bank(feats: Vec<f32>, feat_dim: usize, image_dim: usize) -> EmbeddingBank {
    let m = feats.len() / feat_dim;
    EmbeddingBank {
        image_dim,
        feat_dim,
        images: vec![1.0; m * image_dim],
        caption_feats: feats.clone(),
        feats,
        captions: vec![String::new(); m],
        latent_class: vec![-1; m],
    }
}

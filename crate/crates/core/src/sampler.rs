//! Two-stage zero-shot retrieval from the pre-training bank.
//!
//! Stage 1 scores every bank image feature against the class text features,
//! assigns each record to its argmax class, and keeps the top `k1` records per
//! class (the Label Bank). Stage 2 treats every downstream image as its own
//! column and repeats the procedure over the Label Bank only.
//!
//! Similarities are streamed in row chunks into bounded per-column heaps, so
//! the full `m x q` matrix never exists. Each score depends on its own row
//! only, which makes results independent of the chunk size.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embank::{DownstreamDataset, EmbeddingBank};
use crate::encoder::FrozenEmbedder;
use crate::error::{DatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimilarityChunkPlan {
    pub chunk_rows: usize,
    pub memory_budget_bytes: usize,
}

impl Default for SimilarityChunkPlan {
    fn default() -> Self {
        SimilarityChunkPlan {
            chunk_rows: 4096,
            memory_budget_bytes: 64 << 20,
        }
    }
}

impl SimilarityChunkPlan {
    pub fn with_rows(chunk_rows: usize) -> Self {
        SimilarityChunkPlan {
            chunk_rows,
            memory_budget_bytes: usize::MAX,
        }
    }

    /// Largest chunk that keeps the estimated working set of a selection
    /// within `budget` bytes.
    pub fn within_budget(budget: usize, queries: usize, dim: usize, k: usize) -> Result<Self> {
        let fixed = fixed_bytes(queries, dim, k);
        let per_row = queries * std::mem::size_of::<f64>();
        if budget < fixed + per_row {
            return Err(DatError::Config(format!(
                "memory budget {budget} B cannot hold the {fixed} B of heaps and queries plus one row"
            )));
        }
        Ok(SimilarityChunkPlan {
            chunk_rows: (budget - fixed) / per_row,
            memory_budget_bytes: budget,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_rows == 0 {
            return Err(DatError::Config("chunk_rows must be >= 1".into()));
        }
        Ok(())
    }
}

/// Working memory of a selection that does not scale with the chunk size:
/// normalized queries, per-column heaps, per-column counts, and the result.
fn fixed_bytes(queries: usize, dim: usize, k: usize) -> usize {
    let f = std::mem::size_of::<f64>();
    let candidate = std::mem::size_of::<Candidate>();
    let result_row = std::mem::size_of::<usize>() * 2 + f;
    queries * dim * f + queries * k * candidate + queries * (2 * std::mem::size_of::<usize>()) + queries * k * result_row
}

/// Peak working memory estimate of [`select_top_k`] with the given plan.
pub fn estimated_peak_bytes(plan: &SimilarityChunkPlan, rows: usize, queries: usize, dim: usize, k: usize) -> usize {
    fixed_bytes(queries, dim, k) + plan.chunk_rows.min(rows.max(1)) * queries * std::mem::size_of::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub selected_ids: Vec<usize>,
    pub assigned_column: Vec<usize>,
    pub score: Vec<f64>,
    /// `max(0, k - assigned_count)` per column.
    pub deficits: Vec<usize>,
}

impl SampleResult {
    pub fn len(&self) -> usize {
        self.selected_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ids.is_empty()
    }

    pub fn total_deficit(&self) -> usize {
        self.deficits.iter().sum()
    }
}

/// Row-major row access over an f32 matrix.
#[derive(Debug, Clone, Copy)]
pub struct RowsView<'a> {
    pub data: &'a [f32],
    pub dim: usize,
}

impl<'a> RowsView<'a> {
    pub fn new(data: &'a [f32], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(DatError::Shape(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(RowsView { data, dim })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn normalized_queries(queries: &[Vec<f64>], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(queries.len() * dim);
    for (j, q) in queries.iter().enumerate() {
        if q.len() != dim {
            return Err(DatError::Shape(format!("query {j} has {} entries, expected {dim}", q.len())));
        }
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DatError::Degenerate(format!("query row {j} has norm {norm}")));
        }
        out.extend(q.iter().map(|x| x / norm));
    }
    Ok(out)
}

/// Cosine scores of one row against every normalized query.
#[inline]
fn score_row(row: &[f32], row_index: usize, queries: &[f64], out: &mut [f64]) -> Result<()> {
    let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DatError::Degenerate(format!("bank row {row_index} has norm {norm}")));
    }
    let dim = row.len();
    for (o, q) in out.iter_mut().zip(queries.chunks_exact(dim)) {
        let mut acc = 0.0f64;
        for (&a, &b) in row.iter().zip(q) {
            acc += f64::from(a) * b;
        }
        *o = acc / norm;
    }
    Ok(())
}

/// Streams cosine similarities in row blocks: `visit(first_row, block)` gets
/// a row-major `rows x q` block.
pub fn for_each_similarity_block<F>(
    rows: RowsView<'_>,
    queries: &[Vec<f64>],
    plan: &SimilarityChunkPlan,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &[f64]) -> Result<()>,
{
    plan.validate()?;
    let q = queries.len();
    let normalized = normalized_queries(queries, rows.dim)?;
    let chunk = plan.chunk_rows.min(rows.rows().max(1));
    let mut block = vec![0.0f64; chunk * q];
    let mut start = 0;
    while start < rows.rows() {
        let end = (start + chunk).min(rows.rows());
        let used = &mut block[..(end - start) * q];
        for (local, out) in used.chunks_exact_mut(q.max(1)).enumerate().take(end - start) {
            score_row(rows.row(start + local), start + local, &normalized, out)?;
        }
        visit(start, &block[..(end - start) * q])?;
        start = end;
    }
    Ok(())
}

/// The full `m x q` similarity matrix, row-major.
pub fn similarity_matrix(rows: RowsView<'_>, queries: &[Vec<f64>], plan: &SimilarityChunkPlan) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.rows() * queries.len());
    for_each_similarity_block(rows, queries, plan, |_, block| {
        out.extend_from_slice(block);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    row: usize,
}

// Greater means worse: lower score, or equal score with a higher row id. The
// max-heap top is therefore the weakest kept candidate.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.row.cmp(&other.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Argmax assignment plus bounded top-k per column, fed one row at a time in
/// ascending row order.
struct ColumnSelector {
    k: usize,
    heaps: Vec<BinaryHeap<Candidate>>,
    assigned: Vec<usize>,
}

impl ColumnSelector {
    fn new(columns: usize, k: usize) -> Self {
        ColumnSelector {
            k,
            heaps: (0..columns).map(|_| BinaryHeap::with_capacity(k)).collect(),
            assigned: vec![0; columns],
        }
    }

    fn push(&mut self, row: usize, scores: &[f64]) -> Result<()> {
        let mut best = 0;
        for (j, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(DatError::Numeric(format!("similarity of row {row}, column {j}")));
            }
            if s > scores[best] {
                best = j;
            }
        }
        self.assigned[best] += 1;
        if self.k == 0 {
            return Ok(());
        }
        let cand = Candidate { score: scores[best], row };
        let heap = &mut self.heaps[best];
        if heap.len() < self.k {
            heap.push(cand);
        } else if let Some(mut worst) = heap.peek_mut() {
            if cand < *worst {
                *worst = cand;
            }
        }
        Ok(())
    }

    fn finish(self, row_ids: Option<&[usize]>) -> SampleResult {
        let total: usize = self.heaps.iter().map(BinaryHeap::len).sum();
        let mut out = SampleResult {
            selected_ids: Vec::with_capacity(total),
            assigned_column: Vec::with_capacity(total),
            score: Vec::with_capacity(total),
            deficits: self.assigned.iter().map(|&a| self.k.saturating_sub(a)).collect(),
        };
        for (j, heap) in self.heaps.into_iter().enumerate() {
            // ascending = best first
            for c in heap.into_sorted_vec() {
                out.selected_ids.push(row_ids.map_or(c.row, |ids| ids[c.row]));
                out.assigned_column.push(j);
                out.score.push(c.score);
            }
        }
        out
    }
}

/// Argmax-dedup top-k over a materialized row-major `m x q` matrix.
pub fn topk_per_column_dedup(scores: &[f64], columns: usize, k: usize) -> Result<SampleResult> {
    if columns == 0 || !scores.len().is_multiple_of(columns) {
        return Err(DatError::Shape(format!(
            "{} scores do not form rows of {columns} columns",
            scores.len()
        )));
    }
    let mut sel = ColumnSelector::new(columns, k);
    for (i, row) in scores.chunks_exact(columns).enumerate() {
        sel.push(i, row)?;
    }
    Ok(sel.finish(None))
}

/// Streaming similarity plus argmax-dedup top-k. `row_ids` maps local rows to
/// the ids reported in the result.
pub fn select_top_k(
    rows: RowsView<'_>,
    queries: &[Vec<f64>],
    k: usize,
    plan: &SimilarityChunkPlan,
    row_ids: Option<&[usize]>,
) -> Result<SampleResult> {
    if queries.is_empty() {
        return Err(DatError::Shape("no query columns".into()));
    }
    let q = queries.len();
    let mut sel = ColumnSelector::new(q, k);
    for_each_similarity_block(rows, queries, plan, |start, block| {
        for (local, row) in block.chunks_exact(q).enumerate() {
            sel.push(start + local, row)?;
        }
        Ok(())
    })?;
    Ok(sel.finish(row_ids))
}

/// Per-class Label Bank size so the stage-1 total is `multiplier * n`.
pub fn default_k1(n: usize, classes: usize, multiplier: f64) -> usize {
    ((multiplier * n as f64) / classes as f64).ceil() as usize
}

/// Per-image stage-2 size keeping `keep` of the stage-1 selection.
pub fn default_k2(stage1_selected: usize, n: usize, keep: f64) -> usize {
    ((keep * stage1_selected as f64) / n as f64).round().max(1.0) as usize
}

fn class_queries(ds: &DownstreamDataset) -> Vec<Vec<f64>> {
    (0..ds.num_classes())
        .map(|c| ds.class_text_feat(c).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

pub fn stage1_sample(
    bank: &EmbeddingBank,
    ds: &DownstreamDataset,
    k1: usize,
    plan: &SimilarityChunkPlan,
) -> Result<SampleResult> {
    if bank.feat_dim != ds.feat_dim {
        return Err(DatError::Shape(format!(
            "bank feature dim {} differs from dataset text dim {}",
            bank.feat_dim, ds.feat_dim
        )));
    }
    let rows = RowsView::new(&bank.feats, bank.feat_dim)?;
    select_top_k(rows, &class_queries(ds), k1, plan, None)
}

pub fn stage2_sample(
    label_bank: &SampleResult,
    bank: &EmbeddingBank,
    ds: &DownstreamDataset,
    image_encoder: &FrozenEmbedder,
    k2: usize,
    plan: &SimilarityChunkPlan,
) -> Result<SampleResult> {
    if label_bank.is_empty() {
        return Err(DatError::Config("stage 2 needs a non-empty Label Bank".into()));
    }
    if image_encoder.output_dim != bank.feat_dim || image_encoder.input_dim != ds.image_dim {
        return Err(DatError::Shape("image encoder dims do not match bank/dataset".into()));
    }
    let mut ids = label_bank.selected_ids.clone();
    ids.sort_unstable();
    let mut feats = Vec::with_capacity(ids.len() * bank.feat_dim);
    for &id in &ids {
        if id >= bank.len() {
            return Err(DatError::Shape(format!("Label Bank id {id} outside bank of {}", bank.len())));
        }
        feats.extend_from_slice(bank.feat(id));
    }
    let queries = (0..ds.len())
        .map(|i| image_encoder.embed_f32(ds.image(i)))
        .collect::<Result<Vec<_>>>()?;
    let rows = RowsView::new(&feats, bank.feat_dim)?;
    select_top_k(rows, &queries, k2, plan, Some(&ids))
}

/// Fraction of selected records whose latent class is a downstream class.
pub fn sampler_precision(result: &SampleResult, bank: &EmbeddingBank, num_classes: usize) -> Result<f64> {
    let known = |c: i32| c >= 0 && (c as usize) < num_classes;
    if result.is_empty() {
        return Err(DatError::Degenerate("precision of an empty selection".into()));
    }
    if !bank.latent_class.iter().any(|&c| known(c)) {
        return Err(DatError::Degenerate("bank carries no in-distribution ground truth".into()));
    }
    let hits = result
        .selected_ids
        .iter()
        .filter(|&&id| known(bank.latent_class[id]))
        .count();
    Ok(hits as f64 / result.len() as f64)
}

pub const SAMPLE_CSV_HEADER: &str = "record_id,assigned_column,score";
pub const DEFICIT_CSV_HEADER: &str = "column,deficit";

pub fn write_sample_csv(result: &SampleResult, path: &Path, deficits_path: &Path) -> Result<()> {
    let mut s = String::with_capacity(32 * result.len());
    s.push_str(SAMPLE_CSV_HEADER);
    s.push('\n');
    for i in 0..result.len() {
        let _ = writeln!(s, "{},{},{}", result.selected_ids[i], result.assigned_column[i], result.score[i]);
    }
    fs::write(path, s).map_err(|e| DatError::io(path, e))?;
    let mut d = String::from(DEFICIT_CSV_HEADER);
    d.push('\n');
    for (j, v) in result.deficits.iter().enumerate() {
        let _ = writeln!(d, "{j},{v}");
    }
    fs::write(deficits_path, d).map_err(|e| DatError::io(deficits_path, e))
}

pub fn read_sample_csv(path: &Path, deficits_path: Option<&Path>) -> Result<SampleResult> {
    let text = fs::read_to_string(path).map_err(|e| DatError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLE_CSV_HEADER) {
        return Err(DatError::Format(format!("{}: missing header {SAMPLE_CSV_HEADER}", path.display())));
    }
    let bad = |n: usize| DatError::Format(format!("{}: malformed line {n}", path.display()));
    let mut out = SampleResult {
        selected_ids: vec![],
        assigned_column: vec![],
        score: vec![],
        deficits: vec![],
    };
    for (n, line) in lines.enumerate() {
        let mut it = line.split(',');
        let (Some(a), Some(b), Some(c), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad(n + 2));
        };
        out.selected_ids.push(a.parse().map_err(|_| bad(n + 2))?);
        out.assigned_column.push(b.parse().map_err(|_| bad(n + 2))?);
        out.score.push(c.parse().map_err(|_| bad(n + 2))?);
    }
    if let Some(dp) = deficits_path {
        let text = fs::read_to_string(dp).map_err(|e| DatError::io(dp, e))?;
        for (n, line) in text.lines().skip(1).enumerate() {
            let v = line
                .split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| DatError::Format(format!("{}: malformed line {}", dp.display(), n + 2)))?;
            out.deficits.push(v);
        }
    }
    Ok(out)
}

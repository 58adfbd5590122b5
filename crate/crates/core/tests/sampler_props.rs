mod common;

use common::{brute_force_select, full_matrix, random_queries, random_unit_rows, rng};
use dat_core::sampler::{select_top_k, similarity_matrix, RowsView, SimilarityChunkPlan};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use std::collections::HashSet;

fn instance(seed: u64, m: usize, q: usize, d: usize) -> (Vec<f32>, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    (random_unit_rows(&mut r, m, d), random_queries(&mut r, q, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn chunking_never_changes_the_selection(seed in any::<u64>(), m in 1usize..400, q in 1usize..8, d in 1usize..9, k in 0usize..30, chunk in 1usize..500) {
        let (feats, queries) = instance(seed, m, q, d);
        let rows = RowsView::new(&feats, d).unwrap();
        let a = select_top_k(rows, &queries, k, &SimilarityChunkPlan::with_rows(chunk), None).unwrap();
        let b = select_top_k(rows, &queries, k, &SimilarityChunkPlan::with_rows(m), None).unwrap();
        prop_assert_eq!(&a, &b);
        let oracle = brute_force_select(&full_matrix(&feats, d, &queries), q, k, None);
        prop_assert_eq!(a, oracle);
    }

    #[test]
    fn selection_dominates_unselected_rows(seed in any::<u64>(), m in 1usize..300, q in 1usize..6, k in 0usize..20) {
        let d = 4;
        let (feats, queries) = instance(seed, m, q, d);
        let rows = RowsView::new(&feats, d).unwrap();
        let plan = SimilarityChunkPlan::with_rows(17);
        let res = select_top_k(rows, &queries, k, &plan, None).unwrap();
        let s = similarity_matrix(rows, &queries, &plan).unwrap();
        let ids: HashSet<usize> = res.selected_ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), res.len());
        for j in 0..q {
            let kept: Vec<usize> = res.selected_ids.iter().zip(&res.assigned_column).filter(|(_, &c)| c == j).map(|(&i, _)| i).collect();
            prop_assert!(kept.len() <= k);
            let Some(&weakest) = kept.last() else { continue };
            for r in 0..m {
                let row = &s[r * q..(r + 1) * q];
                let arg = (0..q).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                if arg != j || ids.contains(&r) {
                    continue;
                }
                prop_assert_eq!(kept.len(), k);
                let (sr, sw) = (row[j], s[weakest * q + j]);
                prop_assert!(sr < sw || (sr == sw && r > weakest), "row {} beats kept row {}", r, weakest);
            }
        }
    }

    #[test]
    fn raising_k_only_adds_rows(seed in any::<u64>(), m in 1usize..300, q in 1usize..6, k in 0usize..20) {
        let d = 3;
        let (feats, queries) = instance(seed, m, q, d);
        let rows = RowsView::new(&feats, d).unwrap();
        let plan = SimilarityChunkPlan::with_rows(64);
        let small = select_top_k(rows, &queries, k, &plan, None).unwrap();
        let big = select_top_k(rows, &queries, k + 1, &plan, None).unwrap();
        for j in 0..q {
            let col = |r: &dat_core::sampler::SampleResult| -> HashSet<usize> {
                r.selected_ids.iter().zip(&r.assigned_column).filter(|(_, &c)| c == j).map(|(&i, _)| i).collect()
            };
            prop_assert!(col(&small).is_subset(&col(&big)));
        }
    }
}

#[test]
fn row_order_only_matters_through_ties() {
    let (feats, queries) = instance(11, 500, 5, 6);
    let d = 6;
    let rows = RowsView::new(&feats, d).unwrap();
    let plan = SimilarityChunkPlan::with_rows(50);
    let base = select_top_k(rows, &queries, 7, &plan, None).unwrap();

    let mut perm: Vec<usize> = (0..500).collect();
    perm.shuffle(&mut rng(5));
    let mut shuffled = Vec::with_capacity(feats.len());
    for &p in &perm {
        shuffled.extend_from_slice(&feats[p * d..(p + 1) * d]);
    }
    let res = select_top_k(RowsView::new(&shuffled, d).unwrap(), &queries, 7, &plan, Some(&perm)).unwrap();
    let a: HashSet<usize> = base.selected_ids.iter().copied().collect();
    let b: HashSet<usize> = res.selected_ids.iter().copied().collect();
    assert_eq!(a, b);
}

#[test]
fn all_rows_tied_keeps_lowest_ids() {
    let feats = [1.0f32, 0.0].repeat(10);
    let rows = RowsView::new(&feats, 2).unwrap();
    let res = select_top_k(rows, &[vec![1.0, 0.0], vec![1.0, 0.0]], 3, &SimilarityChunkPlan::with_rows(4), None).unwrap();
    assert_eq!(res.selected_ids, vec![0, 1, 2]);
    assert_eq!(res.deficits, vec![0, 3]);
}

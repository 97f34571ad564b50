mod common;

use common::*;
use gafl_core::encoder::{encode_all, Gaf, MaskPattern, VideoFeatures};
use gafl_core::selection::{
    informative_score, local_dissimilarity_with_masks, query_similarity, select_with_rng, CoresetMetric,
    Ranking, ScoreTerms,
};
use gafl_core::{coreset_select, encode_gaf, query_aware_select, Error, SelectionConfig};
use rand::Rng;

#[test]
fn query_aware_select_matches_straight_line_reimplementation() {
    assert_eq!(checks::query_aware_equivalence(100, 150), Ok(150));
}

#[test]
fn coreset_select_matches_exhaustive_greedy() {
    assert_eq!(checks::coreset_equivalence(200, 200), Ok(200));
}

#[test]
fn coreset_first_pick_is_uniform() {
    let candidates: Vec<Gaf> = (0..4).map(|i| Gaf(vec![1.0, i as f64])).collect();
    let mut counts = [0usize; 4];
    let mut r = rng(7);
    for _ in 0..4000 {
        counts[coreset_select(&candidates, 1, CoresetMetric::CosineDistance, &mut r).unwrap()[0]] += 1;
    }
    assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
}

#[test]
fn coreset_edge_cases() {
    let candidates: Vec<Gaf> = (0..5).map(|i| Gaf(vec![1.0, i as f64, 0.5])).collect();
    let mut all = coreset_select(&candidates, 5, CoresetMetric::CosineDistance, &mut rng(1)).unwrap();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3, 4]);
    assert!(matches!(
        coreset_select(&candidates, 6, CoresetMetric::CosineDistance, &mut rng(1)),
        Err(Error::Precondition(_))
    ));
    assert!(coreset_select(&candidates, 0, CoresetMetric::CosineDistance, &mut rng(1)).is_err());
}

#[test]
fn coreset_on_fixed_vectors() {
    let v = |x: f64, y: f64| Gaf(vec![x, y]);
    let candidates = [v(1.0, 0.0), v(0.9, 0.1), v(0.0, 1.0), v(0.1, 0.9), v(-1.0, 0.0), v(0.7, 0.7)];
    let got = coreset_select(&candidates, 3, CoresetMetric::CosineDistance, &mut rng(4)).unwrap();
    assert_eq!(got, checks::coreset_oracle(&candidates, got[0], 3, false));
}

#[test]
fn scores_match_loop_oracle_for_explicit_masks() {
    let mut r = rng(300);
    for _ in 0..30 {
        let dim = 8;
        let q = random_video(&mut r, "q", 5, 3, dim);
        let params = random_params(&mut r, dim, 16);
        let pool_v: Vec<VideoFeatures> = (0..6).map(|k| random_video(&mut r, &format!("p{k}"), 5, 3, dim)).collect();
        let pool = encode_all(&pool_v, &params).unwrap();
        let masks: Vec<MaskPattern> = (0..4).map(|_| MaskPattern::random(2, 5, &mut r).unwrap()).collect();
        let (v, s_bar) = local_dissimilarity_with_masks(&q, &pool, &params, &masks).unwrap();
        for j in 0..pool.len() {
            let sims: Vec<f64> = masks.iter().map(|m| cosine_oracle(&encode_oracle(&q, &params, m.indices()), &pool[j])).collect();
            let mean = sims.iter().sum::<f64>() / 4.0;
            let var = sims.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!((s_bar[j] - mean).abs() < 1e-12);
            assert!((v[j] - var).abs() < 1e-12);
        }
        let g = encode_gaf(&q, &params, &MaskPattern::none()).unwrap();
        let s = query_similarity(&[g.clone()], &pool).unwrap();
        for j in 0..pool.len() {
            assert!((s.get(0, j) - cosine_oracle(&g, &pool[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn informative_score_examples() {
    let s = gafl_core::linalg::Matrix::from_rows(&[vec![0.5, -0.2]]).unwrap();
    let v = gafl_core::linalg::Matrix::from_rows(&[vec![0.02, 0.1]]).unwrap();
    assert_eq!(informative_score(&s, &v, 0.0).unwrap(), s);
    let i = informative_score(&s, &v, 1.0).unwrap();
    assert!((i.get(0, 0) - 0.52).abs() < 1e-15);
    let bad = gafl_core::linalg::Matrix::from_rows(&[vec![0.02]]).unwrap();
    assert!(matches!(informative_score(&s, &bad, 1.0), Err(Error::Shape(_))));
}

#[test]
fn produced_scores_are_consistent() {
    let mut r = rng(400);
    for _ in 0..40 {
        let inst = checks::selection_instance(&mut r);
        let queries: Vec<&VideoFeatures> = inst.queries.iter().collect();
        let pool = encode_all(&inst.pool_videos, &inst.params).unwrap();
        let cfg = SelectionConfig { terms: ScoreTerms::Both, ..inst.cfg.clone() };
        let sel = select_with_rng(&queries, &pool, &inst.params, &cfg, &mut rng(1)).unwrap();
        let sc = &sel.query_aware.scores;
        for ((i, s), v) in sc.i.data.iter().zip(&sc.s.data).zip(&sc.v.data) {
            assert_eq!(*i, s + cfg.lambda * v);
            assert!(*v >= 0.0);
            assert!((-1.0..=1.0).contains(s));
        }
        assert_eq!(sel.selected.len(), cfg.n_select);
        let mut uniq = sel.selected.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), cfg.n_select);
        assert!(sel.selected.iter().all(|j| sel.query_aware.extra.contains(j)));
    }
}

#[test]
fn exact_duplicates_are_selected_first_without_dissimilarity() {
    let mut r = rng(500);
    let dim = 8;
    let params = random_params(&mut r, dim, 16);
    let q = random_video(&mut r, "q", 4, 3, dim);
    let qg = encode_gaf(&q, &params, &MaskPattern::none()).unwrap();
    let mut pool: Vec<Gaf> = Vec::new();
    for k in 0..12 {
        // orthogonal to the query GAF
        let mut n: Vec<f64> = (0..2 * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let proj = n.iter().zip(qg.iter()).map(|(a, b)| a * b).sum::<f64>() / qg.iter().map(|x| x * x).sum::<f64>();
        n.iter_mut().zip(qg.iter()).for_each(|(a, b)| *a -= proj * b);
        pool.push(Gaf(n));
        if k % 4 == 0 {
            pool.push(qg.clone());
        }
    }
    let dupes: Vec<usize> = pool.iter().enumerate().filter(|(_, g)| **g == qg).map(|(j, _)| j).collect();
    let cfg = SelectionConfig { lambda: 0.0, n_select: 1, extra_factor: 3, ..Default::default() };
    let sel = query_aware_select(&[&q], &pool, &params, &cfg, &mut rng(0)).unwrap();
    assert_eq!(sel.extra, dupes);
}

#[test]
fn budget_and_mask_preconditions() {
    let mut r = rng(600);
    let params = random_params(&mut r, 4, 8);
    let q = random_video(&mut r, "q", 3, 2, 4);
    let pool_v: Vec<VideoFeatures> = (0..10).map(|k| random_video(&mut r, &format!("p{k}"), 3, 2, 4)).collect();
    let pool = encode_all(&pool_v, &params).unwrap();
    let too_big = SelectionConfig { n_select: 3, extra_factor: 4, ..Default::default() };
    assert!(query_aware_select(&[&q], &pool, &params, &too_big, &mut rng(0)).is_err());
    let too_many_masked = SelectionConfig { n_select: 1, masked_persons: 3, ..Default::default() };
    assert!(query_aware_select(&[&q], &pool, &params, &too_many_masked, &mut rng(0)).is_err());
    let negative_lambda = SelectionConfig { n_select: 1, lambda: -1.0, ..Default::default() };
    assert!(query_aware_select(&[&q], &pool, &params, &negative_lambda, &mut rng(0)).is_err());
    let ok = SelectionConfig { n_select: 2, extra_factor: 2, masked_persons: 2, ..Default::default() };
    assert_eq!(query_aware_select(&[&q], &pool, &params, &ok, &mut rng(0)).unwrap().extra.len(), 4);
}

#[test]
fn ascending_ranking_reverses_the_order() {
    let mut r = rng(700);
    let params = random_params(&mut r, 4, 8);
    let q = random_video(&mut r, "q", 3, 2, 4);
    let pool_v: Vec<VideoFeatures> = (0..10).map(|k| random_video(&mut r, &format!("p{k}"), 3, 2, 4)).collect();
    let pool = encode_all(&pool_v, &params).unwrap();
    let base = SelectionConfig { n_select: 1, extra_factor: 3, ..Default::default() };
    let desc = query_aware_select(&[&q], &pool, &params, &base, &mut rng(0)).unwrap();
    let asc =
        query_aware_select(&[&q], &pool, &params, &SelectionConfig { ranking: Ranking::Asc, ..base }, &mut rng(0)).unwrap();
    let i = desc.scores.i.row(0);
    assert!(desc.extra.iter().all(|&d| asc.extra.iter().all(|&a| i[d] >= i[a])));
}

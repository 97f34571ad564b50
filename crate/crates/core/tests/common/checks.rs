//! Oracle and property checks that return measurements instead of panicking,
//! so both the unit-level test targets and the acceptance report can run them.

use super::*;
use gafl_core::encoder::{
    afh_trace, encode_all, encode_gaf_traced, pretrain_loss_grad, EncoderParams, Gaf, MaskPattern, MaskedVideo,
    VideoFeatures,
};
use gafl_core::eval::{hit_at_k, precision_at_k, retrieve_topk};
use gafl_core::finetune::{FinetuneInputs, FinetuneObjective, Label};
use gafl_core::rng::SeededRng;
use gafl_core::selection::{draw_masks, local_dissimilarity, CoresetMetric, ScoreTerms};
use gafl_core::{coreset_select, encode_gaf, finetune, pretrain_loss, query_aware_select, FinetuneConfig, SelectionConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

/// Algorithm 1 written out with plain loops: per query, score the whole pool,
/// then move the best `N_select · N_E` still-available videos into `D_ex`.
pub fn query_aware_oracle(
    queries: &[&VideoFeatures],
    pool: &[Gaf],
    params: &EncoderParams,
    cfg: &SelectionConfig,
    masks: &[Vec<MaskPattern>],
) -> Vec<usize> {
    let budget = cfg.n_select * cfg.extra_factor;
    let mut available: Vec<usize> = (0..pool.len()).collect();
    let mut extra = Vec::new();
    for (k, q) in queries.iter().enumerate() {
        let g = encode_oracle(q, params, &[]);
        let masked: Vec<Vec<f64>> = masks[k].iter().map(|m| encode_oracle(q, params, m.indices())).collect();
        let mut scored = Vec::new();
        for &j in &available {
            let s = cosine_oracle(&g, &pool[j]);
            let sims: Vec<f64> = masked.iter().map(|lm| cosine_oracle(lm, &pool[j])).collect();
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            let v = if sims.iter().all(|&x| x == sims[0]) {
                0.0
            } else {
                sims.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / sims.len() as f64
            };
            let i = match cfg.terms {
                ScoreTerms::Both => s + cfg.lambda * v,
                ScoreTerms::SimilarityOnly => s,
                ScoreTerms::DissimilarityOnly => v,
            };
            scored.push((j, i));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(j, _) in scored.iter().take(budget) {
            extra.push(j);
            available.retain(|&x| x != j);
        }
    }
    extra
}

/// Greedy k-center recomputing every minimum from scratch.
pub fn coreset_oracle(candidates: &[Gaf], first: usize, n_select: usize, literal: bool) -> Vec<usize> {
    let criterion = |a: usize, b: usize| {
        let c = cosine_oracle(&candidates[a], &candidates[b]);
        if literal {
            c
        } else {
            1.0 - c
        }
    };
    let mut chosen = vec![first];
    while chosen.len() < n_select {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..candidates.len() {
            if chosen.contains(&u) {
                continue;
            }
            let m = chosen.iter().map(|&s| criterion(u, s)).fold(f64::INFINITY, f64::min);
            if best.is_none() || m > best.unwrap().1 {
                best = Some((u, m));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

pub struct Instance {
    pub queries: Vec<VideoFeatures>,
    pub pool_videos: Vec<VideoFeatures>,
    pub params: EncoderParams,
    pub cfg: SelectionConfig,
}

pub fn selection_instance(r: &mut SeededRng) -> Instance {
    let dim = 4 * r.random_range(1..3);
    let persons = r.random_range(3..7);
    let frames = r.random_range(1..4);
    let n_query = r.random_range(1..4);
    let cfg = SelectionConfig {
        lambda: r.random_range(0.0..3.0),
        patterns: r.random_range(1..6),
        masked_persons: r.random_range(0..persons),
        extra_factor: r.random_range(1..4),
        n_select: r.random_range(1..4),
        terms: [ScoreTerms::Both, ScoreTerms::SimilarityOnly, ScoreTerms::DissimilarityOnly][r.random_range(0..3)],
        ..Default::default()
    };
    let need = cfg.n_select * cfg.extra_factor * n_query;
    let pool_size = need + r.random_range(0..10);
    let queries = (0..n_query).map(|k| random_video(r, &format!("q{k}"), persons, frames, dim)).collect();
    let pool_videos = (0..pool_size).map(|k| random_video(r, &format!("p{k}"), persons, frames, dim)).collect();
    let params = random_params(r, dim, 2 * dim);
    Instance { queries, pool_videos, params, cfg }
}

/// Compares query-aware selection with the oracle on `instances` random
/// cases. The id sets must be equal; returns the number of cases checked.
pub fn query_aware_equivalence(seed: u64, instances: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..instances {
        let inst = selection_instance(&mut r);
        let queries: Vec<&VideoFeatures> = inst.queries.iter().collect();
        let pool = encode_all(&inst.pool_videos, &inst.params).unwrap();
        let mask_seed: u64 = r.random();
        let mut mask_rng = rng(mask_seed);
        let masks: Vec<Vec<MaskPattern>> =
            queries.iter().map(|q| draw_masks(q, &inst.cfg, &mut mask_rng).unwrap()).collect();
        let got = query_aware_select(&queries, &pool, &inst.params, &inst.cfg, &mut rng(mask_seed))
            .map_err(|e| format!("case {case}: {e}"))?;
        let want = query_aware_oracle(&queries, &pool, &inst.params, &inst.cfg, &masks);
        let mut a = got.extra.clone();
        let mut b = want;
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(format!("case {case}: selected {a:?}, oracle {b:?}"));
        }
        if got.extra.len() != inst.cfg.n_select * inst.cfg.extra_factor * queries.len() || got.extra != got.per_query.concat() {
            return Err(format!("case {case}: inconsistent per-query bookkeeping"));
        }
    }
    Ok(instances)
}

/// Compares core-set selection with the exhaustive greedy oracle on random
/// candidate sets of at most 10 vectors.
pub fn coreset_equivalence(seed: u64, instances: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..instances {
        let n = r.random_range(1..11);
        let dim = r.random_range(2..6);
        let candidates: Vec<Gaf> = (0..n).map(|_| Gaf((0..dim).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let k = r.random_range(1..=n);
        let literal = r.random_bool(0.3);
        let metric = if literal { CoresetMetric::MaxMinSimilarity } else { CoresetMetric::CosineDistance };
        let got = coreset_select(&candidates, k, metric, &mut rng(case as u64)).map_err(|e| format!("case {case}: {e}"))?;
        let want = coreset_oracle(&candidates, got[0], k, literal);
        if got != want {
            return Err(format!("case {case}: selected {got:?}, oracle {want:?}"));
        }
    }
    Ok(instances)
}

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error over all coordinates; coordinates where both values
/// are below `1e-9` in magnitude count as exact.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-9 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Central differences of `f` over every parameter, or `None` when the
/// stability signature changes anywhere on the stencil.
pub fn central_diff<F, S>(params: &EncoderParams, f: F, signature: S) -> Option<Vec<f64>>
where
    F: Fn(&EncoderParams) -> f64,
    S: Fn(&EncoderParams) -> Vec<u64>,
{
    let base = signature(params);
    let mut out = vec![0.0; params.len()];
    let mut p = params.clone();
    for i in 0..params.len() {
        let x = params.values()[i];
        p.values_mut()[i] = x + FD_STEP;
        if signature(&p) != base {
            return None;
        }
        let up = f(&p);
        p.values_mut()[i] = x - FD_STEP;
        if signature(&p) != base {
            return None;
        }
        let down = f(&p);
        p.values_mut()[i] = x;
        out[i] = (up - down) / (2.0 * FD_STEP);
    }
    Some(out)
}

fn paf_signature(params: &EncoderParams, batch: &[MaskedVideo<'_>]) -> Vec<u64> {
    let mut sig = Vec::new();
    for (v, mask) in batch {
        let trace = encode_gaf_traced(v, params, mask).unwrap();
        sig.extend(trace.argmax_signature().into_iter().map(|x| x as u64));
        for i in 0..v.persons {
            for t in 0..v.frames {
                let head = afh_trace(trace.gaf(), v.position_at(t, i), params);
                sig.extend(head.activation_signature().into_iter().map(u64::from));
            }
        }
    }
    sig
}

pub fn small_videos(r: &mut SeededRng, n: usize, prefix: &str) -> Vec<VideoFeatures> {
    (0..n)
        .map(|k| {
            let persons = r.random_range(2..5);
            let frames = r.random_range(1..4);
            random_video(r, &format!("{prefix}{k}"), persons, frames, 4)
        })
        .collect()
}

pub fn objective_case<'a>(
    r: &mut SeededRng,
    queries: &'a [VideoFeatures],
    selected: &'a [VideoFeatures],
    all_negative: bool,
) -> FinetuneInputs<'a> {
    let labels: Vec<Label> = (0..selected.len())
        .map(|j| {
            if all_negative || j % 2 == 1 || r.random_bool(0.3) {
                Label::Negative
            } else {
                Label::Positive
            }
        })
        .collect();
    FinetuneInputs { queries: queries.iter().collect(), selected: selected.iter().zip(labels).collect() }
}

fn to_u64(sig: Vec<usize>) -> Vec<u64> {
    sig.into_iter().map(|x| x as u64).collect()
}

/// Worst relative gradient error of the appearance-prediction loss over
/// `configs` stable configurations.
pub fn appearance_gradient_error(seed: u64, configs: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..10 * configs {
        if accepted == configs {
            break;
        }
        let params = random_params(&mut r, 4, 6);
        let videos = small_videos(&mut r, 2, "v");
        let batch: Vec<MaskedVideo<'_>> = videos
            .iter()
            .map(|v| {
                let count = r.random_range(0..v.persons);
                (v, MaskPattern::random(count, v.persons, &mut r).unwrap())
            })
            .collect();
        let Some(numeric) = central_diff(&params, |p| pretrain_loss(p, &batch).unwrap(), |p| paf_signature(p, &batch))
        else {
            continue;
        };
        let (_, grad) = pretrain_loss_grad(&params, &batch).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_err(grad.values(), &numeric));
        accepted += 1;
    }
    if accepted < configs {
        return Err(format!("only {accepted} stable configurations"));
    }
    Ok(worst)
}

/// Worst relative gradient error of the triplet loss.
pub fn contrastive_gradient_error(seed: u64, configs: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    for case in 0..10 * configs {
        if accepted == configs {
            break;
        }
        let params = random_params(&mut r, 4, 6);
        let queries = small_videos(&mut r, 2, "q");
        let selected = small_videos(&mut r, 4, "s");
        let inputs = objective_case(&mut r, &queries, &selected, case % 5 == 0);
        let margin = r.random_range(0.5..4.0);
        let objective = FinetuneObjective::new(&inputs, &params, margin).map_err(|e| e.to_string())?;
        let f = |p: &EncoderParams| objective.evaluate(p, false).unwrap().contrastive;
        let sig = |p: &EncoderParams| to_u64(objective.stability_signature(p).unwrap());
        let Some(numeric) = central_diff(&params, f, sig) else {
            continue;
        };
        let value = objective.evaluate(&params, true).map_err(|e| e.to_string())?;
        if value.contrastive == 0.0 {
            continue;
        }
        worst = worst.max(max_rel_err(value.contrastive_grad.unwrap().values(), &numeric));
        accepted += 1;
    }
    if accepted < configs {
        return Err(format!("only {accepted} stable configurations"));
    }
    Ok(worst)
}

/// Worst relative gradient error of the GAF regularizer, evaluated away from
/// the pre-trained point so the loss is non-zero.
pub fn regularization_gradient_error(seed: u64, configs: usize) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..10 * configs {
        if accepted == configs {
            break;
        }
        let pretrained = random_params(&mut r, 4, 6);
        let mut params = pretrained.clone();
        let branch = params.branch_range();
        for v in &mut params.values_mut()[branch] {
            *v += r.random_range(-0.1..0.1);
        }
        let queries = small_videos(&mut r, 1, "q");
        let selected = small_videos(&mut r, 3, "s");
        let inputs = objective_case(&mut r, &queries, &selected, false);
        let objective = FinetuneObjective::new(&inputs, &pretrained, 1.0).map_err(|e| e.to_string())?;
        let f = |p: &EncoderParams| objective.evaluate(p, false).unwrap().regularization;
        let sig = |p: &EncoderParams| to_u64(objective.stability_signature(p).unwrap());
        let Some(numeric) = central_diff(&params, f, sig) else {
            continue;
        };
        let value = objective.evaluate(&params, true).map_err(|e| e.to_string())?;
        if value.regularization <= 0.0 {
            return Err("regularization vanished away from the pre-trained point".into());
        }
        worst = worst.max(max_rel_err(value.regularization_grad.unwrap().values(), &numeric));
        accepted += 1;
    }
    if accepted < configs {
        return Err(format!("only {accepted} stable configurations"));
    }
    Ok(worst)
}

fn run_property<S, F>(cases: u32, strategy: S, test: F) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Every recorded epoch satisfies `total = contrastive + reg_weight · reg`
/// (or `total = contrastive` without regularization), with exact equality.
pub fn loss_decomposition_property(cases: u32) -> Result<(), String> {
    let strategy = (any::<u64>(), 0.0f64..5.0, any::<bool>(), 1usize..4, 0usize..3);
    run_property(cases, strategy, |(seed, reg_weight, use_reg, epochs, positives)| {
        let mut r = rng(seed);
        let queries: Vec<VideoFeatures> = (0..2).map(|k| random_video(&mut r, &format!("q{k}"), 3, 2, 4)).collect();
        let selected: Vec<VideoFeatures> = (0..3).map(|k| random_video(&mut r, &format!("s{k}"), 3, 2, 4)).collect();
        let params = random_params(&mut r, 4, 8);
        let labels = (0..3).map(|j| if j < positives { Label::Positive } else { Label::Negative });
        let inputs = FinetuneInputs { queries: queries.iter().collect(), selected: selected.iter().zip(labels).collect() };
        let cfg = FinetuneConfig { reg_weight, use_reg, epochs, lr: 1e-2, margin: 2.0, ..Default::default() };
        let (_, report) = finetune(&inputs, &params, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(!report.epochs.is_empty());
        for e in &report.epochs {
            let want = if use_reg { e.contrastive + reg_weight * e.regularization } else { e.contrastive };
            prop_assert_eq!(e.total, want);
        }
        Ok(())
    })
}

pub fn hit_precision_property(cases: u32) -> Result<(), String> {
    let strategy = (prop::collection::vec(0u8..4, 1..30), 0u8..4);
    run_property(cases, strategy, |(classes, target)| {
        let names = ["a", "b", "c", "d"];
        let retrieved: Vec<Option<&str>> = classes.iter().map(|&c| Some(names[c as usize])).collect();
        let t = names[target as usize];
        let p = precision_at_k(&retrieved, t).unwrap();
        prop_assert_eq!(hit_at_k(&retrieved, t).unwrap(), p > 0.0);
        prop_assert!((0.0..=1.0).contains(&p));
        Ok(())
    })
}

pub fn hit_monotone_property(cases: u32) -> Result<(), String> {
    run_property(cases, (any::<u64>(), 1usize..40), |(seed, pool_size)| {
        let mut r = rng(seed);
        let pool: Vec<Vec<f64>> = (0..pool_size).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let ids: Vec<String> = (0..pool_size).map(|j| format!("id{j:03}")).collect();
        let classes: Vec<&str> = (0..pool_size).map(|_| ["x", "y", "z"][r.random_range(0..3)]).collect();
        let query: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut previous = false;
        for k in 1..=pool_size {
            let ranked = retrieve_topk(&query, &ids, &pool, k).unwrap();
            let got: Vec<Option<&str>> = ranked.iter().map(|x| Some(classes[x.index])).collect();
            let hit = hit_at_k(&got, "x").unwrap();
            prop_assert!(hit || !previous, "hit@{} false after hit@{} true", k, k - 1);
            previous = hit;
        }
        Ok(())
    })
}

pub fn dissimilarity_property(cases: u32) -> Result<(), String> {
    run_property(cases, (any::<u64>(), 1usize..6), |(seed, patterns)| {
        let mut r = rng(seed);
        let persons = r.random_range(2..6);
        let q = random_video(&mut r, "q", persons, 2, 4);
        let params = random_params(&mut r, 4, 8);
        let pool_v: Vec<VideoFeatures> = (0..5).map(|k| random_video(&mut r, &format!("p{k}"), persons, 2, 4)).collect();
        let pool = encode_all(&pool_v, &params).unwrap();
        let masked_persons = r.random_range(0..persons);
        let cfg = SelectionConfig { patterns, masked_persons, ..Default::default() };
        let (v, _) = local_dissimilarity(&q, &pool, &params, &cfg, &mut r).unwrap();
        prop_assert!(v.iter().all(|&x| x >= 0.0));
        let single = SelectionConfig { patterns: 1, ..cfg };
        let (v1, _) = local_dissimilarity(&q, &pool, &params, &single, &mut r).unwrap();
        prop_assert!(v1.iter().all(|&x| x == 0.0));
        Ok(())
    })
}

pub fn permutation_invariance_property(cases: u32) -> Result<(), String> {
    run_property(cases, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let persons = r.random_range(1..7);
        let frames = r.random_range(1..4);
        let v = random_video(&mut r, "v", persons, frames, 4);
        let params = random_params(&mut r, 4, 8);
        let count = r.random_range(0..persons);
        let mask = MaskPattern::random(count, persons, &mut r).unwrap();

        // new person i is old person perm[i]
        let mut perm: Vec<usize> = (0..persons).collect();
        perm.shuffle(&mut r);
        let mut appearance = Vec::with_capacity(v.appearance.len());
        let mut positions = Vec::with_capacity(v.positions.len());
        for t in 0..frames {
            for &old in &perm {
                appearance.extend_from_slice(v.appearance_at(t, old));
                positions.push(v.position_at(t, old));
            }
        }
        let shuffled = VideoFeatures::new("v", None, frames, persons, 4, appearance, positions).unwrap();
        let new_mask = MaskPattern::new((0..persons).filter(|&i| mask.is_masked(perm[i])), persons).unwrap();
        prop_assert_eq!(encode_gaf(&v, &params, &mask).unwrap(), encode_gaf(&shuffled, &params, &new_mask).unwrap());
        Ok(())
    })
}

//! Which pool videos should the user label?
//!
//! Two stages. Query-aware selection scores every pool video against each
//! query by cosine similarity `S` plus `λ` times the query local
//! dissimilarity `V` (the population variance, over `P` random person masks
//! of the query, of the masked-query similarity) and keeps the
//! `N_select · N_E` highest scores per query, removing picks from the pool as
//! it goes. Diversity-aware selection then runs greedy k-center (core-set)
//! over those candidates to keep `N_select` of them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{encode_gaf, EncoderParams, Gaf, MaskPattern, VideoFeatures};
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, Matrix};
use crate::rng::{seeded, SeededRng};

/// Pairwise criterion of the greedy core-set step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum CoresetMetric {
    /// Maximize the minimum cosine distance `1 − cos` (k-center greedy).
    #[default]
    CosineDistance,
    /// Maximize the minimum cosine similarity. Picks near-duplicates; kept
    /// for comparison runs.
    MaxMinSimilarity,
}

/// Whether query-aware selection keeps the highest or lowest scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Ranking {
    #[default]
    Desc,
    Asc,
}

/// Which terms enter the informative score; the partial forms are ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ScoreTerms {
    /// `I = S + λ V`
    #[default]
    Both,
    /// `I = S` (equivalently `λ = 0`)
    SimilarityOnly,
    /// `I = V`
    DissimilarityOnly,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SelectionConfig {
    /// Weight of the local dissimilarity in the informative score.
    pub lambda: f64,
    /// Number of random masking patterns `P`.
    pub patterns: usize,
    /// Persons masked per pattern `N_V`.
    pub masked_persons: usize,
    /// Extra-selection multiplier `N_E`.
    pub extra_factor: usize,
    /// Annotation budget `N_select`.
    pub n_select: usize,
    pub coreset_metric: CoresetMetric,
    pub ranking: Ranking,
    pub terms: ScoreTerms,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            patterns: 10,
            masked_persons: 2,
            extra_factor: 4,
            n_select: 5,
            coreset_metric: CoresetMetric::CosineDistance,
            ranking: Ranking::Desc,
            terms: ScoreTerms::Both,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    /// Number of candidates kept per query by query-aware selection.
    pub fn per_query_budget(&self) -> usize {
        self.n_select * self.extra_factor
    }

    /// Checks the standalone fields.
    pub fn validate_fields(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda = {} must be a finite non-negative number", self.lambda)));
        }
        if self.patterns == 0 {
            return Err(Error::Config("patterns (P) must be at least 1".into()));
        }
        if self.n_select == 0 {
            return Err(Error::Config("n_select must be at least 1".into()));
        }
        if self.extra_factor == 0 {
            return Err(Error::Config("extra_factor (N_E) must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks the configuration against the queries and pool it will run on.
    pub fn validate(&self, n_query: usize, min_query_persons: usize, pool_size: usize) -> Result<()> {
        self.validate_fields()?;
        if n_query == 0 {
            return Err(Error::Precondition("at least one query is required".into()));
        }
        if self.masked_persons >= min_query_persons {
            return Err(Error::Config(format!(
                "masked_persons (N_V) = {} must be below the smallest query person count {}",
                self.masked_persons, min_query_persons
            )));
        }
        let need = self.per_query_budget() * n_query;
        if need > pool_size {
            return Err(Error::Config(format!(
                "n_select·N_E·N_query = {need} exceeds the pool size {pool_size}"
            )));
        }
        Ok(())
    }
}

/// Score matrices, `N_query × |pool|`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SelectionScores {
    pub s: Matrix,
    pub s_bar: Matrix,
    pub v: Matrix,
    pub i: Matrix,
    pub lambda: f64,
}

/// `S[k][k'] = cos(G_k, G_k')`.
pub fn query_similarity(queries: &[Gaf], pool: &[Gaf]) -> Result<Matrix> {
    if queries.is_empty() || pool.is_empty() {
        return Err(Error::Precondition("query similarity needs non-empty queries and pool".into()));
    }
    let mut s = Matrix::zeros(queries.len(), pool.len());
    for (k, q) in queries.iter().enumerate() {
        for (j, g) in pool.iter().enumerate() {
            s.set(k, j, cosine_similarity(q, g)?);
        }
    }
    Ok(s)
}

/// Local dissimilarity of every pool video against one query, for an
/// explicit list of masks. Returns `(V, S̄)` rows.
pub fn local_dissimilarity_with_masks(
    query: &VideoFeatures,
    pool: &[Gaf],
    params: &EncoderParams,
    masks: &[MaskPattern],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if masks.is_empty() {
        return Err(Error::Precondition("at least one masking pattern is required".into()));
    }
    let masked: Vec<Gaf> = masks.iter().map(|m| encode_gaf(query, params, m)).collect::<Result<_>>()?;
    let p = masks.len() as f64;
    let mut v = vec![0.0; pool.len()];
    let mut s_bar = vec![0.0; pool.len()];
    let mut sims = vec![0.0; masks.len()];
    for (j, g) in pool.iter().enumerate() {
        for (slot, lm) in sims.iter_mut().zip(&masked) {
            *slot = cosine_similarity(lm, g)?;
        }
        // shifted by the first sample so identical similarities give exactly 0
        let shift = sims[0];
        let mean = sims.iter().map(|s| s - shift).sum::<f64>() / p;
        s_bar[j] = shift + mean;
        v[j] = sims.iter().map(|s| (s - shift - mean) * (s - shift - mean)).sum::<f64>() / p;
    }
    Ok((v, s_bar))
}

/// Draws the `P` masks for one query: `N_V` distinct persons per pattern,
/// patterns independent of each other.
pub fn draw_masks<R: Rng + ?Sized>(query: &VideoFeatures, cfg: &SelectionConfig, rng: &mut R) -> Result<Vec<MaskPattern>> {
    if cfg.masked_persons >= query.persons {
        return Err(Error::Precondition(format!(
            "cannot mask {} of the {} persons in query {}",
            cfg.masked_persons, query.persons, query.id
        )));
    }
    (0..cfg.patterns).map(|_| MaskPattern::random(cfg.masked_persons, query.persons, rng)).collect()
}

/// Local dissimilarity with `P` random masks drawn from `rng`.
pub fn local_dissimilarity<R: Rng + ?Sized>(
    query: &VideoFeatures,
    pool: &[Gaf],
    params: &EncoderParams,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cfg.patterns == 0 {
        return Err(Error::Config("patterns (P) must be at least 1".into()));
    }
    let masks = draw_masks(query, cfg, rng)?;
    local_dissimilarity_with_masks(query, pool, params, &masks)
}

/// `I = S + λ V`, elementwise.
pub fn informative_score(s: &Matrix, v: &Matrix, lambda: f64) -> Result<Matrix> {
    if !s.same_shape(v) {
        return Err(Error::Shape(format!(
            "S is {}×{} but V is {}×{}",
            s.rows, s.cols, v.rows, v.cols
        )));
    }
    let data = s.data.iter().zip(&v.data).map(|(a, b)| a + lambda * b).collect();
    Ok(Matrix { rows: s.rows, cols: s.cols, data })
}

/// Output of query-aware selection. Indices refer to the pool.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryAwareSelection {
    /// `D_ex`, in selection order.
    pub extra: Vec<usize>,
    /// The picks credited to each query.
    pub per_query: Vec<Vec<usize>>,
    pub scores: SelectionScores,
}

/// Orders pool indices by score for the configured direction; ties go to the
/// lower index.
fn ranked(scores: &[f64], ranking: Ranking) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let primary = match ranking {
            Ranking::Desc => scores[b].total_cmp(&scores[a]),
            Ranking::Asc => scores[a].total_cmp(&scores[b]),
        };
        primary.then(a.cmp(&b))
    });
    order
}

/// Query-aware selection over pre-computed pool GAFs.
///
/// For each query in order the full `S`, `V` and `I` rows are computed, then
/// the `N_select · N_E` best videos still in the working pool are moved into
/// `D_ex`. `|D_ex| = N_select · N_E · N_query`, without duplicates.
pub fn query_aware_select<R: Rng + ?Sized>(
    queries: &[&VideoFeatures],
    pool: &[Gaf],
    params: &EncoderParams,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<QueryAwareSelection> {
    let min_persons = queries.iter().map(|q| q.persons).min().unwrap_or(0);
    cfg.validate(queries.len(), min_persons, pool.len())?;

    let query_gafs: Vec<Gaf> = queries
        .iter()
        .map(|q| encode_gaf(q, params, &MaskPattern::none()))
        .collect::<Result<_>>()?;
    let s = query_similarity(&query_gafs, pool)?;
    let mut v = Matrix::zeros(queries.len(), pool.len());
    let mut s_bar = Matrix::zeros(queries.len(), pool.len());
    for (k, q) in queries.iter().enumerate() {
        let (v_row, s_bar_row) = local_dissimilarity(q, pool, params, cfg, rng)?;
        v.row_mut(k).copy_from_slice(&v_row);
        s_bar.row_mut(k).copy_from_slice(&s_bar_row);
    }
    let (i, lambda) = match cfg.terms {
        ScoreTerms::Both => (informative_score(&s, &v, cfg.lambda)?, cfg.lambda),
        ScoreTerms::SimilarityOnly => (informative_score(&s, &v, 0.0)?, 0.0),
        ScoreTerms::DissimilarityOnly => (v.clone(), cfg.lambda),
    };

    let budget = cfg.per_query_budget();
    let mut taken = vec![false; pool.len()];
    let mut extra = Vec::with_capacity(budget * queries.len());
    let mut per_query = Vec::with_capacity(queries.len());
    for k in 0..queries.len() {
        let picks: Vec<usize> = ranked(i.row(k), cfg.ranking).into_iter().filter(|&j| !taken[j]).take(budget).collect();
        if picks.len() < budget {
            return Err(Error::Precondition(format!(
                "pool exhausted at query {k}: {} of {budget} candidates left",
                picks.len()
            )));
        }
        for &j in &picks {
            taken[j] = true;
        }
        extra.extend_from_slice(&picks);
        per_query.push(picks);
    }
    Ok(QueryAwareSelection { extra, per_query, scores: SelectionScores { s, s_bar, v, i, lambda } })
}

/// Greedy core-set selection of `n_select` candidates. The first pick is
/// uniform; each later pick maximizes its minimum criterion value against
/// everything already chosen (lowest index on ties). Returns candidate
/// indices in pick order.
pub fn coreset_select<G, R>(candidates: &[G], n_select: usize, metric: CoresetMetric, rng: &mut R) -> Result<Vec<usize>>
where
    G: AsRef<[f64]>,
    R: Rng + ?Sized,
{
    if n_select == 0 {
        return Err(Error::Precondition("n_select must be at least 1".into()));
    }
    if n_select > candidates.len() {
        return Err(Error::Precondition(format!(
            "cannot select {n_select} of {} candidates",
            candidates.len()
        )));
    }
    let first = rng.random_range(0..candidates.len());
    let mut chosen = vec![first];
    let mut picked = vec![false; candidates.len()];
    picked[first] = true;

    // min criterion against the chosen set, maintained incrementally
    let criterion = |a: usize, b: usize| -> Result<f64> {
        let cos = cosine_similarity(candidates[a].as_ref(), candidates[b].as_ref())?;
        Ok(match metric {
            CoresetMetric::CosineDistance => 1.0 - cos,
            CoresetMetric::MaxMinSimilarity => cos,
        })
    };
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    let mut last = first;
    while chosen.len() < n_select {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..candidates.len() {
            if picked[u] {
                continue;
            }
            nearest[u] = nearest[u].min(criterion(u, last)?);
            if best.is_none_or(|(_, b)| nearest[u] > b) {
                best = Some((u, nearest[u]));
            }
        }
        let (u, _) = best.expect("n_select ≤ candidates leaves an unpicked candidate");
        picked[u] = true;
        chosen.push(u);
        last = u;
    }
    Ok(chosen)
}

/// Both selection stages, seeded from `cfg.seed`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Selection {
    pub query_aware: QueryAwareSelection,
    /// `D_select` as pool indices, in pick order.
    pub selected: Vec<usize>,
}

pub fn select(queries: &[&VideoFeatures], pool: &[Gaf], params: &EncoderParams, cfg: &SelectionConfig) -> Result<Selection> {
    let mut rng: SeededRng = seeded(cfg.seed);
    select_with_rng(queries, pool, params, cfg, &mut rng)
}

pub fn select_with_rng<R: Rng + ?Sized>(
    queries: &[&VideoFeatures],
    pool: &[Gaf],
    params: &EncoderParams,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<Selection> {
    let query_aware = query_aware_select(queries, pool, params, cfg, rng)?;
    let candidates: Vec<&Gaf> = query_aware.extra.iter().map(|&j| &pool[j]).collect();
    let picks = coreset_select(&candidates, cfg.n_select, cfg.coreset_metric, rng)?;
    let selected = picks.into_iter().map(|c| query_aware.extra[c]).collect();
    Ok(Selection { query_aware, selected })
}

/// One line of a selection report: a `(query, pool video)` pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReportRow {
    pub query: usize,
    pub pool_index: usize,
    pub s: f64,
    pub v: f64,
    pub i: f64,
    /// 1-based rank of this video in the query's ordering of the full pool.
    pub rank: usize,
    /// Kept by query-aware selection on behalf of this query.
    pub extra: bool,
    /// Chosen for annotation.
    pub chosen: bool,
}

pub fn selection_report(selection: &Selection, ranking: Ranking) -> Vec<ReportRow> {
    let scores = &selection.query_aware.scores;
    let mut rows = Vec::with_capacity(scores.i.rows * scores.i.cols);
    for k in 0..scores.i.rows {
        let order = ranked(scores.i.row(k), ranking);
        let mut rank = vec![0usize; order.len()];
        for (r, &j) in order.iter().enumerate() {
            rank[j] = r + 1;
        }
        for j in 0..scores.i.cols {
            rows.push(ReportRow {
                query: k,
                pool_index: j,
                s: scores.s.get(k, j),
                v: scores.v.get(k, j),
                i: scores.i.get(k, j),
                rank: rank[j],
                extra: selection.query_aware.per_query[k].contains(&j),
                chosen: selection.selected.contains(&j),
            });
        }
    }
    rows
}

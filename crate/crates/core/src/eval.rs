//! Retrieval, Precision@K / Hit@K and the repeated-trial protocol.
//!
//! A trial samples `N_query` test clips of one class as queries, selects
//! clips from the training pool with the configured variant, labels them
//! with the oracle annotator, fine-tunes from the pristine pre-trained
//! parameters and retrieves from the re-embedded training pool. "Original"
//! metrics use the trial's own queries; "others" metrics use every other test
//! clip of the same class.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::dataset::{oracle_annotate, Dataset, Split};
use crate::encoder::{encode_all, encode_gaf, EncoderParams, Gaf, MaskPattern, VideoFeatures};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, FinetuneInputs, Label, StopReason};
use crate::linalg::{cosine_similarity, dot, euclidean, norm};
use crate::rng::{derive_seed, seeded};
use crate::selection::{coreset_select, select_with_rng, ScoreTerms, SelectionConfig};

/// How the clips shown to the annotator are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Variant {
    /// No selection and no fine-tuning.
    Pretrained,
    /// Query-aware then diversity-aware selection.
    Ours,
    Random,
    /// Core-set over the whole pool, ignoring the queries.
    Coreset,
    /// Clips nearest to k-means centroids of the pool.
    Kmeans,
    #[cfg_attr(feature = "serde", serde(rename = "ours-wo-s"))]
    OursWithoutS,
    #[cfg_attr(feature = "serde", serde(rename = "ours-wo-v"))]
    OursWithoutV,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Pretrained,
        Variant::Ours,
        Variant::Random,
        Variant::Coreset,
        Variant::Kmeans,
        Variant::OursWithoutS,
        Variant::OursWithoutV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pretrained => "pretrained",
            Variant::Ours => "ours",
            Variant::Random => "random",
            Variant::Coreset => "coreset",
            Variant::Kmeans => "kmeans",
            Variant::OursWithoutS => "ours-wo-s",
            Variant::OursWithoutV => "ours-wo-v",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub trials_per_class: usize,
    pub n_query: usize,
    pub evaluate_others: bool,
    pub seed: u64,
    /// `selection.n_select` is the annotation budget.
    pub selection: SelectionConfig,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            trials_per_class: 10,
            n_query: 3,
            evaluate_others: true,
            seed: 0,
            selection: SelectionConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive integers".into()));
        }
        if self.trials_per_class == 0 {
            return Err(Error::Config("trials_per_class must be at least 1".into()));
        }
        if self.n_query == 0 {
            return Err(Error::Config("n_query must be at least 1".into()));
        }
        self.selection.validate_fields()?;
        self.finetune.validate()
    }

    /// Advisory messages, e.g. a K that is not large compared to `N_select`.
    pub fn warnings(&self) -> Vec<String> {
        self.ks
            .iter()
            .filter(|&&k| k <= self.selection.n_select)
            .map(|k| format!("K = {k} is not larger than n_select = {}", self.selection.n_select))
            .collect()
    }

    fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ranked {
    pub index: usize,
    pub score: f64,
}

/// The `k` pool items most cosine-similar to `query`, best first; ties are
/// broken by ascending id.
pub fn retrieve_topk<S, G>(query: &[f64], ids: &[S], pool: &[G], k: usize) -> Result<Vec<Ranked>>
where
    S: AsRef<str>,
    G: AsRef<[f64]>,
{
    if ids.len() != pool.len() {
        return Err(Error::Shape(format!("{} ids for {} pool vectors", ids.len(), pool.len())));
    }
    if k > pool.len() {
        return Err(Error::Precondition(format!("K = {k} exceeds the pool size {}", pool.len())));
    }
    let mut ranked: Vec<Ranked> = pool
        .iter()
        .enumerate()
        .map(|(index, g)| Ok(Ranked { index, score: cosine_similarity(query, g.as_ref())? }))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| ids[a.index].as_ref().cmp(ids[b.index].as_ref())));
    ranked.truncate(k);
    Ok(ranked)
}

/// Fraction of retrieved clips whose class is `target`.
pub fn precision_at_k(retrieved_classes: &[Option<&str>], target: &str) -> Result<f64> {
    if retrieved_classes.is_empty() {
        return Err(Error::Precondition("precision@K of an empty retrieval".into()));
    }
    let mut hits = 0usize;
    for (r, c) in retrieved_classes.iter().enumerate() {
        match c {
            Some(c) if *c == target => hits += 1,
            Some(_) => {}
            None => return Err(Error::InsufficientData(format!("retrieved item at rank {} has no label", r + 1))),
        }
    }
    Ok(hits as f64 / retrieved_classes.len() as f64)
}

/// Whether any retrieved clip has class `target`.
pub fn hit_at_k(retrieved_classes: &[Option<&str>], target: &str) -> Result<bool> {
    precision_at_k(retrieved_classes, target).map(|p| p > 0.0)
}

/// Precision and hit rate at one K, averaged over queries.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KMetrics {
    pub k: usize,
    pub precision: f64,
    pub hit: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FinetuneSummary {
    pub epochs_run: usize,
    pub final_total: Option<f64>,
    pub final_contrastive: Option<f64>,
    pub final_regularization: Option<f64>,
    pub stop_reason: StopReason,
    pub contrastive_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialResult {
    pub variant: Variant,
    pub class: String,
    pub trial: usize,
    pub seed: u64,
    pub query_ids: Vec<String>,
    pub selected_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub original: Vec<KMetrics>,
    pub others: Vec<KMetrics>,
    pub others_count: usize,
    pub finetune: Option<FinetuneSummary>,
}

/// Shared, read-only state of one protocol run: the dataset, the pre-trained
/// parameters and the pre-trained training-pool embeddings.
#[derive(Debug)]
pub struct TrialContext<'a> {
    pub dataset: &'a Dataset,
    pub params: &'a EncoderParams,
    pub train: Vec<&'a VideoFeatures>,
    pub train_ids: Vec<&'a str>,
    pub train_gafs: Vec<Gaf>,
    test_by_class: BTreeMap<&'a str, Vec<&'a VideoFeatures>>,
}

impl<'a> TrialContext<'a> {
    pub fn new(dataset: &'a Dataset, params: &'a EncoderParams) -> Result<Self> {
        dataset.require_splits()?;
        let train = dataset.split(Split::Train);
        let train_ids = train.iter().map(|v| v.id.as_str()).collect();
        let train_gafs = encode_all(train.iter().copied(), params)?;
        let mut test_by_class: BTreeMap<&str, Vec<&VideoFeatures>> = BTreeMap::new();
        for v in dataset.split(Split::Test) {
            if let Some(c) = v.class_label.as_deref() {
                test_by_class.entry(c).or_default().push(v);
            }
        }
        Ok(Self { dataset, params, train, train_ids, train_gafs, test_by_class })
    }

    pub fn test_videos(&self, class: &str) -> &[&'a VideoFeatures] {
        self.test_by_class.get(class).map_or(&[], Vec::as_slice)
    }

    fn class_index(&self, class: &str) -> Result<usize> {
        self.dataset
            .class_catalog
            .iter()
            .position(|c| c.name == class)
            .ok_or_else(|| Error::UnknownId(format!("class {class}")))
    }
}

/// Seed of trial `trial` for class index `class_index`. Every variant sees the
/// same seed, hence the same queries.
pub fn trial_seed(base: u64, class_index: usize, trial: usize) -> u64 {
    derive_seed(base, &[class_index as u64, trial as u64])
}

/// Draws the trial's queries from the class's test clips.
pub fn sample_queries<'a>(ctx: &TrialContext<'a>, class: &str, n_query: usize, seed: u64) -> Result<Vec<&'a VideoFeatures>> {
    let pool = ctx.test_videos(class);
    if pool.len() < n_query {
        return Err(Error::InsufficientData(format!(
            "class {class} has {} test videos, {n_query} queries needed",
            pool.len()
        )));
    }
    let mut rng = seeded(derive_seed(seed, &[1]));
    Ok(rand::seq::index::sample(&mut rng, pool.len(), n_query).into_iter().map(|i| pool[i]).collect())
}

/// Picks `n_select` pool indices with the k-means rule: cluster the
/// L2-normalized GAFs (k-means++ seeding, Lloyd iterations) and take the clip
/// nearest to each centroid.
pub fn kmeans_select<G: AsRef<[f64]>, R: Rng + ?Sized>(pool: &[G], n_select: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_select == 0 || n_select > pool.len() {
        return Err(Error::Precondition(format!("cannot pick {n_select} of {} clips", pool.len())));
    }
    let points: Vec<Vec<f64>> = pool
        .iter()
        .map(|g| {
            let n = norm(g.as_ref());
            if n == 0.0 {
                return Err(Error::Degenerate("zero GAF in k-means pool".into()));
            }
            Ok(g.as_ref().iter().map(|x| x / n).collect())
        })
        .collect::<Result<_>>()?;
    let sq = |a: &[f64], b: &[f64]| {
        let d = euclidean(a, b);
        d * d
    };

    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < n_select {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..centroids.len())
                .min_by(|&a, &b| sq(p, &centroids[a]).total_cmp(&sq(p, &centroids[b])))
                .expect("at least one centroid");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                centroid[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut used = vec![false; points.len()];
    let mut picks = Vec::with_capacity(n_select);
    for centroid in &centroids {
        let best = (0..points.len())
            .filter(|&i| !used[i])
            .max_by(|&a, &b| dot(&points[a], centroid).total_cmp(&dot(&points[b], centroid)).then(b.cmp(&a)))
            .expect("n_select ≤ pool leaves an unused clip");
        used[best] = true;
        picks.push(best);
    }
    Ok(picks)
}

/// Pool indices chosen by `variant` for the given queries.
pub fn select_for_variant(
    ctx: &TrialContext<'_>,
    queries: &[&VideoFeatures],
    variant: Variant,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = seeded(derive_seed(seed, &[2]));
    let n_select = cfg.selection.n_select;
    let pool = &ctx.train_gafs;
    let with_terms = |terms: ScoreTerms| SelectionConfig { terms, ..cfg.selection.clone() };
    match variant {
        Variant::Pretrained => Ok(Vec::new()),
        Variant::Ours => Ok(select_with_rng(queries, pool, ctx.params, &with_terms(ScoreTerms::Both), &mut rng)?.selected),
        Variant::OursWithoutV => {
            Ok(select_with_rng(queries, pool, ctx.params, &with_terms(ScoreTerms::SimilarityOnly), &mut rng)?.selected)
        }
        Variant::OursWithoutS => {
            Ok(select_with_rng(queries, pool, ctx.params, &with_terms(ScoreTerms::DissimilarityOnly), &mut rng)?.selected)
        }
        Variant::Random => {
            if n_select > pool.len() {
                return Err(Error::Precondition(format!("cannot pick {n_select} of {} clips", pool.len())));
            }
            Ok(rand::seq::index::sample(&mut rng, pool.len(), n_select).into_vec())
        }
        Variant::Coreset => coreset_select(pool, n_select, cfg.selection.coreset_metric, &mut rng),
        Variant::Kmeans => kmeans_select(pool, n_select, &mut rng),
    }
}

/// Retrieval metrics for a set of query GAFs against an embedded pool.
pub fn retrieval_metrics(
    ctx: &TrialContext<'_>,
    query_gafs: &[Gaf],
    pool_gafs: &[Gaf],
    target: &str,
    ks: &[usize],
) -> Result<Vec<KMetrics>> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut sums = vec![(0.0, 0.0); ks.len()];
    for q in query_gafs {
        let ranked = retrieve_topk(q, &ctx.train_ids, pool_gafs, max_k)?;
        let classes: Vec<Option<&str>> = ranked.iter().map(|r| ctx.train[r.index].class_label.as_deref()).collect();
        for (slot, &k) in sums.iter_mut().zip(ks) {
            let p = precision_at_k(&classes[..k], target)?;
            slot.0 += p;
            slot.1 += if p > 0.0 { 1.0 } else { 0.0 };
        }
    }
    let n = query_gafs.len().max(1) as f64;
    Ok(ks
        .iter()
        .zip(sums)
        .map(|(&k, (p, h))| KMetrics { k, precision: p / n, hit: h / n })
        .collect())
}

/// Runs one trial of `variant` for `class`.
pub fn run_trial(ctx: &TrialContext<'_>, class: &str, trial: usize, variant: Variant, cfg: &EvalConfig) -> Result<TrialResult> {
    cfg.validate()?;
    if cfg.max_k() > ctx.train.len() {
        return Err(Error::Config(format!("K = {} exceeds the training pool size {}", cfg.max_k(), ctx.train.len())));
    }
    let seed = trial_seed(cfg.seed, ctx.class_index(class)?, trial);
    let queries = sample_queries(ctx, class, cfg.n_query, seed)?;
    let picks = select_for_variant(ctx, &queries, variant, cfg, seed)?;
    let selected_ids: Vec<&str> = picks.iter().map(|&j| ctx.train_ids[j]).collect();
    let annotations = oracle_annotate(&selected_ids, class, ctx.dataset)?;

    let (params, summary) = if variant == Variant::Pretrained {
        (None, None)
    } else {
        let inputs = FinetuneInputs {
            queries: queries.clone(),
            selected: picks.iter().zip(&annotations).map(|(&j, a)| (ctx.train[j], a.label)).collect(),
        };
        let (tuned, report) = finetune(&inputs, ctx.params, &cfg.finetune)?;
        let last = report.epochs.last();
        let summary = FinetuneSummary {
            epochs_run: report.epochs.len(),
            final_total: last.map(|e| e.total),
            final_contrastive: last.map(|e| e.contrastive),
            final_regularization: last.map(|e| e.regularization),
            stop_reason: report.stop_reason,
            contrastive_active: report.contrastive_active,
        };
        (Some(tuned), Some(summary))
    };
    let active = params.as_ref().unwrap_or(ctx.params);
    let retuned_pool;
    let pool_gafs = match &params {
        Some(p) => {
            retuned_pool = encode_all(ctx.train.iter().copied(), p)?;
            &retuned_pool
        }
        None => &ctx.train_gafs,
    };

    let none = MaskPattern::none();
    let query_gafs: Vec<Gaf> = queries.iter().map(|q| encode_gaf(q, active, &none)).collect::<Result<_>>()?;
    let original = retrieval_metrics(ctx, &query_gafs, pool_gafs, class, &cfg.ks)?;

    let (others, others_count) = if cfg.evaluate_others {
        let others: Vec<Gaf> = ctx
            .test_videos(class)
            .iter()
            .filter(|v| !queries.iter().any(|q| q.id == v.id))
            .map(|v| encode_gaf(v, active, &none))
            .collect::<Result<_>>()?;
        if others.is_empty() {
            (Vec::new(), 0)
        } else {
            (retrieval_metrics(ctx, &others, pool_gafs, class, &cfg.ks)?, others.len())
        }
    } else {
        (Vec::new(), 0)
    };

    Ok(TrialResult {
        variant,
        class: class.to_string(),
        trial,
        seed,
        query_ids: queries.iter().map(|q| q.id.clone()).collect(),
        selected_ids: selected_ids.iter().map(|s| s.to_string()).collect(),
        labels: annotations.iter().map(|a| a.label).collect(),
        original,
        others,
        others_count,
        finetune: summary,
    })
}

/// One unit of protocol work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedTrial {
    pub variant: Variant,
    pub class: String,
    pub trial: usize,
}

/// All trials of a protocol run, in the order records are emitted:
/// variant, then class (catalog order), then trial.
pub fn protocol_plan(dataset: &Dataset, variants: &[Variant], cfg: &EvalConfig) -> Vec<PlannedTrial> {
    let mut plan = Vec::new();
    for &variant in variants {
        for class in dataset.class_names() {
            for trial in 0..cfg.trials_per_class {
                plan.push(PlannedTrial { variant, class: class.to_string(), trial });
            }
        }
    }
    plan
}

/// Mean metrics over some trials.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricSet {
    pub original: Vec<KMetrics>,
    pub others: Vec<KMetrics>,
}

impl MetricSet {
    pub fn original_precision(&self, k: usize) -> Option<f64> {
        self.original.iter().find(|m| m.k == k).map(|m| m.precision)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SummaryRow {
    pub variant: Variant,
    /// `None` for the class-size-weighted overall row.
    pub class: Option<String>,
    pub trials: usize,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkippedTrial {
    pub variant: Variant,
    pub class: String,
    pub trial: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolReport {
    pub records: Vec<TrialResult>,
    pub skipped: Vec<SkippedTrial>,
    pub summary: Vec<SummaryRow>,
}

impl ProtocolReport {
    pub fn overall(&self, variant: Variant) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.class.is_none())
    }
}

fn mean_metrics(sets: &[(&[KMetrics], f64)]) -> Vec<KMetrics> {
    let Some((first, _)) = sets.iter().find(|(m, _)| !m.is_empty()) else {
        return Vec::new();
    };
    let total_w: f64 = sets.iter().filter(|(m, _)| !m.is_empty()).map(|(_, w)| w).sum();
    first
        .iter()
        .enumerate()
        .map(|(i, km)| {
            let (mut p, mut h) = (0.0, 0.0);
            for (m, w) in sets.iter().filter(|(m, _)| !m.is_empty()) {
                p += w * m[i].precision;
                h += w * m[i].hit;
            }
            KMetrics { k: km.k, precision: p / total_w, hit: h / total_w }
        })
        .collect()
}

/// Per-class means and the class-size-weighted overall row for every
/// variant present in `records`.
pub fn aggregate(dataset: &Dataset, records: &[TrialResult]) -> Vec<SummaryRow> {
    let mut variants: Vec<Variant> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    let mut rows = Vec::new();
    for variant in variants {
        let mut class_rows: Vec<SummaryRow> = Vec::new();
        for class in dataset.class_names() {
            let trials: Vec<&TrialResult> = records.iter().filter(|r| r.variant == variant && r.class == class).collect();
            if trials.is_empty() {
                continue;
            }
            let orig: Vec<(&[KMetrics], f64)> = trials.iter().map(|t| (t.original.as_slice(), 1.0)).collect();
            let others: Vec<(&[KMetrics], f64)> = trials.iter().map(|t| (t.others.as_slice(), 1.0)).collect();
            class_rows.push(SummaryRow {
                variant,
                class: Some(class.to_string()),
                trials: trials.len(),
                metrics: MetricSet { original: mean_metrics(&orig), others: mean_metrics(&others) },
            });
        }
        let weight = |row: &SummaryRow| dataset.class_count(row.class.as_deref().unwrap_or_default()) as f64;
        let orig: Vec<(&[KMetrics], f64)> = class_rows.iter().map(|r| (r.metrics.original.as_slice(), weight(r))).collect();
        let others: Vec<(&[KMetrics], f64)> = class_rows.iter().map(|r| (r.metrics.others.as_slice(), weight(r))).collect();
        let overall = SummaryRow {
            variant,
            class: None,
            trials: class_rows.iter().map(|r| r.trials).sum(),
            metrics: MetricSet { original: mean_metrics(&orig), others: mean_metrics(&others) },
        };
        rows.extend(class_rows);
        rows.push(overall);
    }
    rows
}

/// Collects trial outcomes into a report. Classes without enough test clips
/// are recorded as skipped; any other error aborts.
pub fn finish_protocol(dataset: &Dataset, plan: &[PlannedTrial], outcomes: Vec<Result<TrialResult>>) -> Result<ProtocolReport> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (planned, outcome) in plan.iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(Error::InsufficientData(reason)) => skipped.push(SkippedTrial {
                variant: planned.variant,
                class: planned.class.clone(),
                trial: planned.trial,
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    let summary = aggregate(dataset, &records);
    Ok(ProtocolReport { records, skipped, summary })
}

/// Runs every trial of every variant sequentially.
pub fn run_protocol(dataset: &Dataset, params: &EncoderParams, variants: &[Variant], cfg: &EvalConfig) -> Result<ProtocolReport> {
    cfg.validate()?;
    let ctx = TrialContext::new(dataset, params)?;
    let plan = protocol_plan(dataset, variants, cfg);
    let outcomes = plan.iter().map(|s| run_trial(&ctx, &s.class, s.trial, s.variant, cfg)).collect();
    finish_protocol(dataset, &plan, outcomes)
}

/// Selection hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SweepParam {
    /// `N_V`
    MaskedPersons,
    /// `N_E`
    ExtraFactor,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::MaskedPersons => "N_V",
            SweepParam::ExtraFactor => "N_E",
        }
    }

    pub fn apply(self, cfg: &EvalConfig, value: usize) -> EvalConfig {
        let mut out = cfg.clone();
        match self {
            SweepParam::MaskedPersons => out.selection.masked_persons = value,
            SweepParam::ExtraFactor => out.selection.extra_factor = value,
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepPoint {
    pub parameter: SweepParam,
    pub value: usize,
    pub trials: usize,
    pub metrics: MetricSet,
}

/// The sweep grid: `N_V ∈ 1..=6` then `N_E ∈ 2..=5`.
pub fn default_sweep_grid() -> Vec<(SweepParam, usize)> {
    (1..=6)
        .map(|v| (SweepParam::MaskedPersons, v))
        .chain((2..=5).map(|v| (SweepParam::ExtraFactor, v)))
        .collect()
}

/// Runs the "ours" protocol at every grid point and keeps the weighted
/// overall metrics.
pub fn run_sweep(
    dataset: &Dataset,
    params: &EncoderParams,
    cfg: &EvalConfig,
    grid: &[(SweepParam, usize)],
) -> Result<Vec<SweepPoint>> {
    grid.iter()
        .map(|&(parameter, value)| {
            let point_cfg = parameter.apply(cfg, value);
            let report = run_protocol(dataset, params, &[Variant::Ours], &point_cfg)?;
            Ok(sweep_point(parameter, value, &report))
        })
        .collect()
}

pub fn sweep_point(parameter: SweepParam, value: usize, report: &ProtocolReport) -> SweepPoint {
    let overall = report.overall(Variant::Ours);
    SweepPoint {
        parameter,
        value,
        trials: overall.map_or(0, |r| r.trials),
        metrics: overall.map_or(MetricSet { original: Vec::new(), others: Vec::new() }, |r| r.metrics.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_examples() {
        let t = Some("a");
        let f = Some("b");
        assert_eq!(precision_at_k(&[t; 10], "a").unwrap(), 1.0);
        assert_eq!(precision_at_k(&[f; 10], "a").unwrap(), 0.0);
        let mix = [t, t, f, t, t, f, t, t, f, t];
        assert!((precision_at_k(&mix, "a").unwrap() - 0.7).abs() < 1e-15);
        assert!(precision_at_k(&[t, None], "a").is_err());
    }

    #[test]
    fn hit_examples() {
        let mut one = [Some("b"); 10];
        one[7] = Some("a");
        assert!(hit_at_k(&one, "a").unwrap());
        assert!(!hit_at_k(&[Some("b"); 10], "a").unwrap());
    }

    #[test]
    fn topk_duplicate_first_and_k_bounds() {
        let pool = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let ids = ["a", "b", "c"];
        let r = retrieve_topk(&[0.0, 2.0], &ids, &pool, 1).unwrap();
        assert_eq!(r[0].index, 1);
        assert!(retrieve_topk(&[0.0, 2.0], &ids, &pool, 4).is_err());
        assert!(retrieve_topk(&[0.0, 2.0], &ids, &pool, 0).unwrap().is_empty());
        let all = retrieve_topk(&[1.0, 0.2], &ids, &pool, 3).unwrap();
        let mut idx: Vec<usize> = all.iter().map(|r| r.index).collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn topk_ties_break_by_id() {
        let pool = [vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        let ids = ["z", "m", "a"];
        let r = retrieve_topk(&[1.0, 0.0], &ids, &pool, 3).unwrap();
        assert_eq!(r.iter().map(|x| ids[x.index]).collect::<Vec<_>>(), vec!["a", "m", "z"]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn kmeans_picks_are_distinct() {
        let pool: Vec<Vec<f64>> = (0..30).map(|i| vec![libm::cos(i as f64), libm::sin(i as f64), 0.5]).collect();
        let picks = kmeans_select(&pool, 5, &mut seeded(1)).unwrap();
        let mut s = picks.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert!(kmeans_select(&pool, 31, &mut seeded(1)).is_err());
    }

    #[test]
    fn small_k_warns() {
        let cfg = EvalConfig { ks: vec![3, 10], ..Default::default() };
        assert_eq!(cfg.warnings().len(), 1);
    }
}

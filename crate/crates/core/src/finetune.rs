//! Contrastive fine-tuning of the pre-trained encoder from a handful of
//! user-labelled clips.
//!
//! The objective is `L = L_ctr + reg_weight · L_reg`: a triplet hinge that
//! anchors on the query clips, plus an MSE term that keeps the labelled
//! clips' GAFs near their pre-trained values. Only the TS/ST branch weights
//! are trained; the appearance head receives no gradient here.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{encode_gaf_traced, EncoderParams, Gaf, GafTrace, MaskPattern, VideoFeatures};
use crate::error::{Error, Result};
use crate::linalg::{euclidean, mse};
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Label {
    Positive,
    Negative,
}

/// One user's verdict on one selected clip.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Annotation {
    pub video_id: String,
    pub label: Label,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub annotator: Option<String>,
    /// Seconds since the Unix epoch, when known.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub timestamp: Option<u64>,
}

impl Annotation {
    pub fn new(video_id: impl Into<String>, label: Label) -> Self {
        Self { video_id: video_id.into(), label, annotator: None, timestamp: None }
    }
}

/// Majority vote across annotators; a tie counts as negative.
pub fn majority_label<I: IntoIterator<Item = Label>>(votes: I) -> Option<Label> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for v in votes {
        match v {
            Label::Positive => pos += 1,
            Label::Negative => neg += 1,
        }
    }
    match pos + neg {
        0 => None,
        _ if pos > neg => Some(Label::Positive),
        _ => Some(Label::Negative),
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    /// Triplet margin α.
    pub margin: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub use_reg: bool,
    pub reg_weight: f64,
    /// Stop after this many consecutive epochs with `L_ctr = 0`.
    pub early_stop_patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            margin: 10.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            use_reg: true,
            reg_weight: 1.0,
            early_stop_patience: 3,
        }
    }
}

impl FinetuneConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!("reg_weight {} must be non-negative", self.reg_weight)));
        }
        self.adam().validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub contrastive: f64,
    pub regularization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum StopReason {
    #[default]
    NoEpochs,
    Completed,
    EarlyStop,
    NothingToOptimize,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub epochs: Vec<EpochLoss>,
    pub stop_reason: StopReason,
    /// Whether the triplet term was part of the objective.
    pub contrastive_active: bool,
    pub warnings: Vec<String>,
}

/// Mean over queries of the mean triplet hinge over every (positive,
/// negative) pair, with Euclidean distance. With one positive and one
/// negative this is the plain per-query triplet loss.
pub fn triplet_loss<G: AsRef<[f64]>>(queries: &[G], positives: &[G], negatives: &[G], margin: f64) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Degenerate("triplet loss needs at least one query".into()));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Degenerate(format!(
            "triplet loss needs positives and negatives ({} positives, {} negatives)",
            positives.len(),
            negatives.len()
        )));
    }
    let mut total = 0.0;
    for q in queries {
        let mut acc = 0.0;
        for p in positives {
            let d_pos = euclidean(q.as_ref(), p.as_ref());
            for n in negatives {
                acc += (d_pos - euclidean(q.as_ref(), n.as_ref()) + margin).max(0.0);
            }
        }
        total += acc / (positives.len() * negatives.len()) as f64;
    }
    Ok(total / queries.len() as f64)
}

/// `(1/n) Σ MSE(current_k, pretrained_k)`.
pub fn reg_loss<G: AsRef<[f64]>>(current: &[G], pretrained: &[G]) -> Result<f64> {
    if current.len() != pretrained.len() {
        return Err(Error::Shape(format!(
            "{} current GAFs but {} pre-trained GAFs",
            current.len(),
            pretrained.len()
        )));
    }
    if current.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (c, p) in current.iter().zip(pretrained) {
        if c.as_ref().len() != p.as_ref().len() {
            return Err(Error::Shape("GAF dimension mismatch in regularization".into()));
        }
        total += mse(c.as_ref(), p.as_ref());
    }
    Ok(total / current.len() as f64)
}

/// `∂d(a,b)/∂a`, zero when the points coincide.
fn distance_grad<'a>(a: &'a [f64], b: &'a [f64], d: f64) -> impl Iterator<Item = f64> + 'a {
    a.iter().zip(b).map(move |(x, y)| if d > 0.0 { (x - y) / d } else { 0.0 })
}

/// The clips of one fine-tuning round.
#[derive(Debug, Clone)]
pub struct FinetuneInputs<'a> {
    pub queries: Vec<&'a VideoFeatures>,
    /// Selected clips with their (merged) labels.
    pub selected: Vec<(&'a VideoFeatures, Label)>,
}

/// Who plays which role, as indices into `queries ++ selected`.
#[derive(Debug, Clone, PartialEq)]
struct Roles {
    anchors: Vec<usize>,
    /// Positive set per anchor.
    positives: Vec<Vec<usize>>,
    negatives: Vec<usize>,
    selected: Vec<usize>,
}

/// Both loss terms and their gradients with respect to the branch weights.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub contrastive: f64,
    pub regularization: f64,
    pub contrastive_grad: Option<EncoderParams>,
    pub regularization_grad: Option<EncoderParams>,
}

/// The fine-tuning objective for one session, with the pre-trained GAFs of
/// the selected clips captured at construction.
#[derive(Debug, Clone)]
pub struct FinetuneObjective<'a> {
    members: Vec<&'a VideoFeatures>,
    roles: Option<Roles>,
    selected: Vec<usize>,
    pretrained: Vec<Gaf>,
    margin: f64,
    warnings: Vec<String>,
}

impl<'a> FinetuneObjective<'a> {
    /// Resolves roles, applying the degenerate-set rules:
    ///
    /// * no positives: the other queries stand in as positives;
    /// * a single query and no positives, or no negatives: the triplet term
    ///   is dropped with a warning;
    /// * nothing selected at all: error.
    pub fn new(inputs: &FinetuneInputs<'a>, pretrained: &EncoderParams, margin: f64) -> Result<Self> {
        if inputs.queries.is_empty() {
            return Err(Error::Precondition("fine-tuning needs at least one query".into()));
        }
        if inputs.selected.is_empty() {
            return Err(Error::Precondition(
                "no positive and no negative clips: label the selected clips before fine-tuning".into(),
            ));
        }
        let nq = inputs.queries.len();
        let mut members: Vec<&VideoFeatures> = inputs.queries.clone();
        members.extend(inputs.selected.iter().map(|(v, _)| *v));
        let selected: Vec<usize> = (nq..members.len()).collect();
        let pos: Vec<usize> = inputs
            .selected
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l == Label::Positive)
            .map(|(j, _)| nq + j)
            .collect();
        let negatives: Vec<usize> = inputs
            .selected
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l == Label::Negative)
            .map(|(j, _)| nq + j)
            .collect();

        let mut warnings = Vec::new();
        let anchors: Vec<usize> = (0..nq).collect();
        let roles = if negatives.is_empty() {
            warnings.push(String::from("no negative clips; triplet loss skipped, regularization only"));
            None
        } else if !pos.is_empty() {
            Some(Roles { positives: vec![pos; nq], anchors, negatives, selected: selected.clone() })
        } else if nq > 1 {
            warnings.push(String::from("no positive clips; other query clips used as positives"));
            let positives = (0..nq).map(|k| (0..nq).filter(|&o| o != k).collect()).collect();
            Some(Roles { positives, anchors, negatives, selected: selected.clone() })
        } else {
            warnings.push(String::from("single query and no positive clips; triplet loss skipped"));
            None
        };

        let none = MaskPattern::none();
        let pretrained_gafs = selected
            .iter()
            .map(|&m| encode_gaf_traced(members[m], pretrained, &none).map(GafTrace::into_gaf))
            .collect::<Result<_>>()?;
        Ok(Self { members, roles, selected, pretrained: pretrained_gafs, margin, warnings })
    }

    pub fn contrastive_active(&self) -> bool {
        self.roles.is_some()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn pretrained_gafs(&self) -> &[Gaf] {
        &self.pretrained
    }

    fn traces(&self, params: &EncoderParams) -> Result<Vec<GafTrace>> {
        let none = MaskPattern::none();
        self.members.iter().map(|v| encode_gaf_traced(v, params, &none)).collect()
    }

    /// Pooling routes of every clip followed by the on/off state of every
    /// hinge. Gradients are exact wherever this is locally constant.
    pub fn stability_signature(&self, params: &EncoderParams) -> Result<Vec<usize>> {
        let traces = self.traces(params)?;
        let mut sig: Vec<usize> = traces.iter().flat_map(GafTrace::argmax_signature).collect();
        if let Some(roles) = &self.roles {
            let g = |m: usize| traces[m].gaf().as_ref();
            for &a in &roles.anchors {
                for &p in &roles.positives[a] {
                    for &n in &roles.negatives {
                        let h = euclidean(g(a), g(p)) - euclidean(g(a), g(n)) + self.margin;
                        sig.push(usize::from(h > 0.0));
                    }
                }
            }
        }
        Ok(sig)
    }

    /// Realized `(d_pos, d_neg)` for every triplet, at `params`.
    pub fn triplet_distances(&self, params: &EncoderParams) -> Result<Vec<(f64, f64)>> {
        let traces = self.traces(params)?;
        let mut out = Vec::new();
        if let Some(roles) = &self.roles {
            let g = |m: usize| traces[m].gaf().as_ref();
            for &a in &roles.anchors {
                for &p in &roles.positives[a] {
                    for &n in &roles.negatives {
                        out.push((euclidean(g(a), g(p)), euclidean(g(a), g(n))));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Both loss terms and, optionally, their separate gradients.
    pub fn evaluate(&self, params: &EncoderParams, want_grad: bool) -> Result<ObjectiveValue> {
        let traces = self.traces(params)?;
        let gaf_dim = params.gaf_dim();
        let mut d_ctr = vec![vec![0.0; gaf_dim]; self.members.len()];
        let mut contrastive = 0.0;
        if let Some(roles) = &self.roles {
            let g = |m: usize| traces[m].gaf().as_ref();
            let per_anchor = 1.0 / roles.anchors.len() as f64;
            for &a in &roles.anchors {
                let pos = &roles.positives[a];
                let w = per_anchor / (pos.len() * roles.negatives.len()) as f64;
                for &p in pos {
                    let d_pos = euclidean(g(a), g(p));
                    for &n in &roles.negatives {
                        let d_neg = euclidean(g(a), g(n));
                        let hinge = d_pos - d_neg + self.margin;
                        if hinge <= 0.0 {
                            continue;
                        }
                        contrastive += w * hinge;
                        if want_grad {
                            // ∂/∂a (d_pos − d_neg), ∂/∂p d_pos, −∂/∂n d_neg
                            let gp: Vec<f64> = distance_grad(g(a), g(p), d_pos).collect();
                            let gn: Vec<f64> = distance_grad(g(a), g(n), d_neg).collect();
                            for c in 0..gaf_dim {
                                d_ctr[a][c] += w * (gp[c] - gn[c]);
                                d_ctr[p][c] -= w * gp[c];
                                d_ctr[n][c] += w * gn[c];
                            }
                        }
                    }
                }
            }
        }

        let current: Vec<&[f64]> = self.selected.iter().map(|&m| traces[m].gaf().as_ref()).collect();
        let pre: Vec<&[f64]> = self.pretrained.iter().map(|g| g.as_ref()).collect();
        let regularization = reg_loss(&current, &pre)?;

        if !(contrastive.is_finite() && regularization.is_finite()) {
            return Err(Error::NonFinite(format!(
                "fine-tuning loss: contrastive {contrastive}, regularization {regularization}"
            )));
        }

        let (contrastive_grad, regularization_grad) = if want_grad {
            let mut ctr = params.zeros_like();
            for (trace, d) in traces.iter().zip(&d_ctr) {
                if d.iter().any(|&x| x != 0.0) {
                    trace.backward(d, &mut ctr);
                }
            }
            let mut reg = params.zeros_like();
            let scale = 2.0 / (gaf_dim * self.selected.len()) as f64;
            for (k, &m) in self.selected.iter().enumerate() {
                let d: Vec<f64> = current[k].iter().zip(pre[k]).map(|(c, p)| scale * (c - p)).collect();
                traces[m].backward(&d, &mut reg);
            }
            (Some(ctr), Some(reg))
        } else {
            (None, None)
        };
        Ok(ObjectiveValue { contrastive, regularization, contrastive_grad, regularization_grad })
    }
}

/// Fine-tunes a copy of the pre-trained parameters on one labelled round.
///
/// Each epoch re-encodes every query and selected clip without masking,
/// records `(L, L_ctr, L_reg)` at the current parameters, then takes one Adam
/// step on the branch weights. Training stops early once `L_ctr` has been zero
/// for `early_stop_patience` consecutive epochs.
pub fn finetune(inputs: &FinetuneInputs<'_>, params: &EncoderParams, cfg: &FinetuneConfig) -> Result<(EncoderParams, LossReport)> {
    cfg.validate()?;
    let objective = FinetuneObjective::new(inputs, params, cfg.margin)?;
    let mut report = LossReport {
        contrastive_active: objective.contrastive_active(),
        warnings: objective.warnings().to_vec(),
        ..Default::default()
    };
    let mut current = params.clone();
    if cfg.epochs == 0 {
        return Ok((current, report));
    }
    if !objective.contrastive_active() && !cfg.use_reg {
        report.stop_reason = StopReason::NothingToOptimize;
        return Ok((current, report));
    }

    let branch = current.branch_range();
    let mut adam = AdamState::new(branch.len());
    let adam_cfg = cfg.adam();
    let mut zero_streak = 0usize;
    report.stop_reason = StopReason::Completed;
    for epoch in 0..cfg.epochs {
        let value = objective.evaluate(&current, true).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        let total = if cfg.use_reg {
            value.contrastive + cfg.reg_weight * value.regularization
        } else {
            value.contrastive
        };
        report.epochs.push(EpochLoss {
            epoch,
            total,
            contrastive: value.contrastive,
            regularization: value.regularization,
        });

        if objective.contrastive_active() {
            zero_streak = if value.contrastive == 0.0 { zero_streak + 1 } else { 0 };
            if cfg.early_stop_patience > 0 && zero_streak >= cfg.early_stop_patience {
                report.stop_reason = StopReason::EarlyStop;
                break;
            }
        }

        let mut grads = value.contrastive_grad.expect("gradient requested");
        if cfg.use_reg {
            let reg = value.regularization_grad.expect("gradient requested");
            for (g, r) in grads.values_mut().iter_mut().zip(reg.values()) {
                *g += cfg.reg_weight * r;
            }
        }
        adam.step(&mut current.values_mut()[branch.clone()], &grads.values()[branch.clone()], &adam_cfg)?;
    }
    Ok((current, report))
}

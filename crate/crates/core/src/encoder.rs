//! Person features, the pooled dual-branch GAF encoder and the
//! location-guided appearance head used for self-supervised pre-training.
//!
//! The encoder keeps the two-branch layout of a temporal-to-spatial (TS) and
//! spatial-to-temporal (ST) network but replaces attention with
//! pool-then-project:
//!
//! * TS: max over frames per person, affine `W_ts`, max over persons.
//! * ST: max over persons per frame, affine `W_st`, max over frames.
//!
//! The GAF is `concat(G_ts, G_st)`, of dimension `2C`. Masked persons are
//! removed from every pooling step rather than zero-filled.
//!
//! Gradients are hand-written. Max-pool subgradients are routed to the
//! lowest-index maximizer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, Range};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{affine, all_finite, max_assign};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, seeded};

/// Frequency base of the sinusoidal positional encoding.
pub const PE_BASE: f64 = 10_000.0;

/// Per-person feature tracks of one clip: `T` frames by `N` persons, each
/// with a `C`-dimensional appearance vector and a normalized court position.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VideoFeatures {
    pub id: String,
    /// Ground truth, only read by the oracle annotator and the evaluator.
    pub class_label: Option<String>,
    pub frames: usize,
    pub persons: usize,
    pub dim: usize,
    /// Frame-major `T × N × C`.
    pub appearance: Vec<f64>,
    /// Frame-major `T × N`, each `(x, y)` in `[0, 1]²`.
    pub positions: Vec<[f64; 2]>,
}

impl VideoFeatures {
    pub fn new(
        id: impl Into<String>,
        class_label: Option<String>,
        frames: usize,
        persons: usize,
        dim: usize,
        appearance: Vec<f64>,
        positions: Vec<[f64; 2]>,
    ) -> Result<Self> {
        let v = Self { id: id.into(), class_label, frames, persons, dim, appearance, positions };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.persons == 0 || self.dim == 0 {
            return Err(Error::Shape(format!(
                "video {}: frames, persons and dim must be positive (T={}, N={}, C={})",
                self.id, self.frames, self.persons, self.dim
            )));
        }
        let cells = self.frames * self.persons;
        if self.appearance.len() != cells * self.dim {
            return Err(Error::Shape(format!(
                "video {}: expected {} appearance values, found {}",
                self.id,
                cells * self.dim,
                self.appearance.len()
            )));
        }
        if self.positions.len() != cells {
            return Err(Error::Shape(format!(
                "video {}: expected {} positions, found {}",
                self.id,
                cells,
                self.positions.len()
            )));
        }
        if !all_finite(&self.appearance) {
            return Err(Error::NonFinite(format!("video {}: appearance", self.id)));
        }
        for (k, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
                return Err(Error::Precondition(format!(
                    "video {}: position {:?} of frame {} person {} outside [0,1]²",
                    self.id,
                    p,
                    k / self.persons,
                    k % self.persons
                )));
            }
        }
        Ok(())
    }

    pub fn appearance_at(&self, frame: usize, person: usize) -> &[f64] {
        let start = (frame * self.persons + person) * self.dim;
        &self.appearance[start..start + self.dim]
    }

    pub fn position_at(&self, frame: usize, person: usize) -> [f64; 2] {
        self.positions[frame * self.persons + person]
    }

    /// Positions of one person over all frames.
    pub fn person_track(&self, person: usize) -> Vec<[f64; 2]> {
        (0..self.frames).map(|t| self.position_at(t, person)).collect()
    }

    /// Appearance of one person over all frames, flattened `T × C`.
    pub fn person_appearance(&self, person: usize) -> Vec<f64> {
        (0..self.frames).flat_map(|t| self.appearance_at(t, person).iter().copied()).collect()
    }
}

/// Set of person indices hidden from the encoder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskPattern {
    masked: Vec<usize>,
}

impl MaskPattern {
    pub fn none() -> Self {
        Self::default()
    }

    /// Builds a mask for a clip with `persons` people. At least one person
    /// must stay visible.
    pub fn new(indices: impl IntoIterator<Item = usize>, persons: usize) -> Result<Self> {
        let mut masked: Vec<usize> = indices.into_iter().collect();
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= persons) {
            return Err(Error::Precondition(format!(
                "masked person {bad} out of range for {persons} persons"
            )));
        }
        if masked.len() >= persons {
            return Err(Error::Precondition(format!(
                "mask hides all {persons} persons; at least one must survive pooling"
            )));
        }
        Ok(Self { masked })
    }

    /// Draws `count` distinct persons uniformly without replacement.
    pub fn random<R: Rng + ?Sized>(count: usize, persons: usize, rng: &mut R) -> Result<Self> {
        if count >= persons {
            return Err(Error::Precondition(format!(
                "cannot mask {count} of {persons} persons"
            )));
        }
        let picked = rand::seq::index::sample(rng, persons, count);
        Self::new(picked, persons)
    }

    pub fn is_masked(&self, person: usize) -> bool {
        self.masked.binary_search(&person).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
}

/// Group activity feature: `concat(G_ts, G_st)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Gaf(pub Vec<f64>);

impl Gaf {
    pub fn ts(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn st(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Gaf {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Gaf {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    TsWeight,
    TsBias,
    StWeight,
    StBias,
    Afh1Weight,
    Afh1Bias,
    Afh2Weight,
    Afh2Bias,
    Afh3Weight,
    Afh3Bias,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::TsWeight,
        Block::TsBias,
        Block::StWeight,
        Block::StBias,
        Block::Afh1Weight,
        Block::Afh1Bias,
        Block::Afh2Weight,
        Block::Afh2Bias,
        Block::Afh3Weight,
        Block::Afh3Bias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::TsWeight => "ts.weight",
            Block::TsBias => "ts.bias",
            Block::StWeight => "st.weight",
            Block::StBias => "st.bias",
            Block::Afh1Weight => "afh1.weight",
            Block::Afh1Bias => "afh1.bias",
            Block::Afh2Weight => "afh2.weight",
            Block::Afh2Bias => "afh2.bias",
            Block::Afh3Weight => "afh3.weight",
            Block::Afh3Bias => "afh3.bias",
        }
    }

    /// `(rows, cols)`; biases are `(rows, 1)`.
    pub fn shape(self, dim: usize, hidden: usize) -> (usize, usize) {
        match self {
            Block::TsWeight | Block::StWeight => (dim, dim),
            Block::TsBias | Block::StBias => (dim, 1),
            Block::Afh1Weight => (hidden, 3 * dim),
            Block::Afh1Bias => (hidden, 1),
            Block::Afh2Weight => (hidden, hidden),
            Block::Afh2Bias => (hidden, 1),
            Block::Afh3Weight => (dim, hidden),
            Block::Afh3Bias => (dim, 1),
        }
    }
}

/// Learnable weights of the encoder branches and the appearance head, held in
/// one flat buffer so optimizers and serializers can treat them uniformly.
/// The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    hidden: usize,
    pe_base: f64,
    values: Vec<f64>,
}

impl EncoderParams {
    /// All-zero parameters.
    pub fn zeros(dim: usize, hidden: usize, pe_base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(4) {
            return Err(Error::Config(format!("feature dim {dim} must be a positive multiple of 4")));
        }
        if hidden == 0 {
            return Err(Error::Config("appearance head hidden width must be positive".into()));
        }
        if !(pe_base.is_finite() && pe_base > 1.0) {
            return Err(Error::Config(format!("positional encoding base {pe_base} must exceed 1")));
        }
        let total = Block::ALL.iter().map(|b| {
            let (r, c) = b.shape(dim, hidden);
            r * c
        });
        Ok(Self { dim, hidden, pe_base, values: vec![0.0; total.sum()] })
    }

    /// Uniform fan-in initialization with zero biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, pe_base: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, pe_base)?;
        for block in [Block::TsWeight, Block::StWeight, Block::Afh1Weight, Block::Afh2Weight, Block::Afh3Weight] {
            let (_, fan_in) = block.shape(dim, hidden);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for w in p.block_mut(block) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from a flat buffer in [`Block::ALL`] order.
    pub fn from_values(dim: usize, hidden: usize, pe_base: f64, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, pe_base)?;
        if values.len() != p.values.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter values for C={dim}, hidden={hidden}, found {}",
                p.values.len(),
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("parameter values".into()));
        }
        p.values = values;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self { dim: self.dim, hidden: self.hidden, pe_base: self.pe_base, values: vec![0.0; self.values.len()] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gaf_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn pe_base(&self) -> f64 {
        self.pe_base
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block_range(&self, block: Block) -> Range<usize> {
        let mut start = 0;
        for b in Block::ALL {
            let (r, c) = b.shape(self.dim, self.hidden);
            if b == block {
                return start..start + r * c;
            }
            start += r * c;
        }
        unreachable!()
    }

    pub fn block(&self, block: Block) -> &[f64] {
        let r = self.block_range(block);
        &self.values[r]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.block_range(block);
        &mut self.values[r]
    }

    /// Range covering the TS and ST branch weights and biases.
    pub fn branch_range(&self) -> Range<usize> {
        0..self.block_range(Block::StBias).end
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.values)
    }

    pub(crate) fn check_video(&self, video: &VideoFeatures) -> Result<()> {
        if video.dim != self.dim {
            return Err(Error::Shape(format!(
                "video {} has feature dim {} but the encoder expects {}",
                video.id, video.dim, self.dim
            )));
        }
        Ok(())
    }
}

fn pe_into(pos: [f64; 2], base: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    let (xs, ys) = out.split_at_mut(half);
    for (coord, dst) in [(pos[0], xs), (pos[1], ys)] {
        for (pair, chunk) in dst.chunks_exact_mut(2).enumerate() {
            let freq = libm::pow(base, (2 * pair) as f64 / half as f64);
            let arg = core::f64::consts::TAU * coord / freq;
            chunk[0] = libm::sin(arg);
            chunk[1] = libm::cos(arg);
        }
    }
}

/// Sinusoidal encoding of a court position with an explicit frequency base.
///
/// The first `C/2` entries encode `x`, the last `C/2` encode `y`; within each
/// half, pair `i` holds `sin(2πv / base^(2i/(C/2)))` then the matching cosine.
pub fn spatial_positional_encoding_with_base(pos: [f64; 2], dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!("positional encoding dim {dim} must be a positive multiple of 4")));
    }
    let mut out = vec![0.0; dim];
    pe_into(pos, base, &mut out);
    Ok(out)
}

pub fn spatial_positional_encoding(pos: [f64; 2], dim: usize) -> Result<Vec<f64>> {
    spatial_positional_encoding_with_base(pos, dim, PE_BASE)
}

/// `F_ind = F_app + PE(position)`.
pub fn compose_person_feature(appearance: &[f64], position: [f64; 2]) -> Result<Vec<f64>> {
    let mut out = spatial_positional_encoding(position, appearance.len())?;
    for (o, a) in out.iter_mut().zip(appearance) {
        *o += a;
    }
    Ok(out)
}

/// Forward pass of [`encode_gaf`] with everything needed for backprop.
#[derive(Debug, Clone)]
pub struct GafTrace {
    gaf: Gaf,
    /// Visible person indices, ascending.
    active: Vec<usize>,
    /// TS: per visible person, max over frames.
    person_pooled: Vec<Vec<f64>>,
    /// TS: for every channel, position in `active` of the winning person.
    ts_argmax: Vec<usize>,
    /// ST: per frame, max over visible persons.
    frame_pooled: Vec<Vec<f64>>,
    /// ST: for every channel, the winning frame.
    st_argmax: Vec<usize>,
}

impl GafTrace {
    pub fn gaf(&self) -> &Gaf {
        &self.gaf
    }

    pub fn into_gaf(self) -> Gaf {
        self.gaf
    }

    /// Winning person per TS channel followed by winning frame per ST
    /// channel. Two parameter points with equal signatures route max-pool
    /// gradients identically.
    pub fn argmax_signature(&self) -> Vec<usize> {
        self.ts_argmax
            .iter()
            .map(|&a| self.active[a])
            .chain(self.st_argmax.iter().copied())
            .collect()
    }

    /// Accumulates `∂L/∂θ` for the branch weights given `∂L/∂G`.
    pub fn backward(&self, d_gaf: &[f64], grads: &mut EncoderParams) {
        let dim = grads.dim;
        debug_assert_eq!(d_gaf.len(), 2 * dim);
        let (d_ts, d_st) = d_gaf.split_at(dim);
        for (branch, d, argmax, inputs) in [
            (Block::TsWeight, d_ts, &self.ts_argmax, &self.person_pooled),
            (Block::StWeight, d_st, &self.st_argmax, &self.frame_pooled),
        ] {
            let w_range = grads.block_range(branch);
            let bias_block = if branch == Block::TsWeight { Block::TsBias } else { Block::StBias };
            let b_range = grads.block_range(bias_block);
            for c in 0..dim {
                let g = d[c];
                if g == 0.0 {
                    continue;
                }
                let x = &inputs[argmax[c]];
                let row = &mut grads.values[w_range.start + c * dim..w_range.start + (c + 1) * dim];
                for (w, xv) in row.iter_mut().zip(x) {
                    *w += g * xv;
                }
                grads.values[b_range.start + c] += g;
            }
        }
    }
}

/// Encodes a clip into its GAF, recording the pooling routes.
pub fn encode_gaf_traced(video: &VideoFeatures, params: &EncoderParams, mask: &MaskPattern) -> Result<GafTrace> {
    params.check_video(video)?;
    let (frames, persons, dim) = (video.frames, video.persons, video.dim);
    if let Some(&bad) = mask.indices().iter().find(|&&i| i >= persons) {
        return Err(Error::Precondition(format!(
            "mask index {bad} out of range for video {} with {persons} persons",
            video.id
        )));
    }
    let active: Vec<usize> = (0..persons).filter(|&i| !mask.is_masked(i)).collect();
    if active.is_empty() {
        return Err(Error::Precondition(format!("mask hides every person of video {}", video.id)));
    }

    // F_ind for visible persons, frame-major over `active`
    let mut features = vec![0.0; frames * active.len() * dim];
    for t in 0..frames {
        for (a, &i) in active.iter().enumerate() {
            let dst = &mut features[(t * active.len() + a) * dim..][..dim];
            pe_into(video.position_at(t, i), params.pe_base, dst);
            for (d, app) in dst.iter_mut().zip(video.appearance_at(t, i)) {
                *d += app;
            }
        }
    }
    let feat = |t: usize, a: usize| &features[(t * active.len() + a) * dim..][..dim];

    let person_pooled: Vec<Vec<f64>> = (0..active.len())
        .map(|a| {
            let mut acc = feat(0, a).to_vec();
            for t in 1..frames {
                max_assign(&mut acc, feat(t, a));
            }
            acc
        })
        .collect();
    let frame_pooled: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let mut acc = feat(t, 0).to_vec();
            for a in 1..active.len() {
                max_assign(&mut acc, feat(t, a));
            }
            acc
        })
        .collect();

    let (g_ts, ts_argmax) = project_and_pool(
        params.block(Block::TsWeight),
        params.block(Block::TsBias),
        &person_pooled,
    );
    let (g_st, st_argmax) = project_and_pool(
        params.block(Block::StWeight),
        params.block(Block::StBias),
        &frame_pooled,
    );
    let mut gaf = g_ts;
    gaf.extend_from_slice(&g_st);
    Ok(GafTrace { gaf: Gaf(gaf), active, person_pooled, ts_argmax, frame_pooled, st_argmax })
}

/// Applies the affine map to every row then max-pools across rows, keeping
/// the lowest-index maximizer per channel.
fn project_and_pool(weight: &[f64], bias: &[f64], rows: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let dim = bias.len();
    let mut best = vec![f64::NEG_INFINITY; dim];
    let mut argmax = vec![0usize; dim];
    let mut projected = vec![0.0; dim];
    for (r, x) in rows.iter().enumerate() {
        affine(weight, bias, x, &mut projected);
        for c in 0..dim {
            if projected[c] > best[c] {
                best[c] = projected[c];
                argmax[c] = r;
            }
        }
    }
    (best, argmax)
}

/// Encodes a clip into its `2C`-dimensional GAF, excluding masked persons.
pub fn encode_gaf(video: &VideoFeatures, params: &EncoderParams, mask: &MaskPattern) -> Result<Gaf> {
    encode_gaf_traced(video, params, mask).map(GafTrace::into_gaf)
}

/// Unmasked GAFs of many clips.
pub fn encode_all<'a, I>(videos: I, params: &EncoderParams) -> Result<Vec<Gaf>>
where
    I: IntoIterator<Item = &'a VideoFeatures>,
{
    let none = MaskPattern::none();
    videos.into_iter().map(|v| encode_gaf(v, params, &none)).collect()
}

/// Activations of one appearance-head evaluation.
#[derive(Debug, Clone)]
pub struct AfhTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl AfhTrace {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    /// ReLU on/off pattern of both hidden layers.
    pub fn activation_signature(&self) -> Vec<bool> {
        self.h1.iter().chain(&self.h2).map(|&h| h > 0.0).collect()
    }
}

fn afh_input(gaf: &[f64], pos: [f64; 2], params: &EncoderParams) -> Vec<f64> {
    let mut input = vec![0.0; gaf.len() + params.dim];
    input[..gaf.len()].copy_from_slice(gaf);
    pe_into(pos, params.pe_base, &mut input[gaf.len()..]);
    input
}

fn afh_forward(params: &EncoderParams, input: Vec<f64>) -> AfhTrace {
    let (dim, hidden) = (params.dim, params.hidden);
    let mut h1 = vec![0.0; hidden];
    affine(params.block(Block::Afh1Weight), params.block(Block::Afh1Bias), &input, &mut h1);
    h1.iter_mut().for_each(|h| *h = h.max(0.0));
    let mut h2 = vec![0.0; hidden];
    affine(params.block(Block::Afh2Weight), params.block(Block::Afh2Bias), &h1, &mut h2);
    h2.iter_mut().for_each(|h| *h = h.max(0.0));
    let mut out = vec![0.0; dim];
    affine(params.block(Block::Afh3Weight), params.block(Block::Afh3Bias), &h2, &mut out);
    AfhTrace { input, h1, h2, out }
}

/// Accumulates head gradients and returns `∂L/∂G` (the GAF slice of the
/// input gradient).
fn afh_backward(params: &EncoderParams, trace: &AfhTrace, d_out: &[f64], grads: &mut EncoderParams) -> Vec<f64> {
    let d_h2 = linear_backward(params, grads, Block::Afh3Weight, Block::Afh3Bias, &trace.h2, d_out);
    let d_h2: Vec<f64> = d_h2.iter().zip(&trace.h2).map(|(d, h)| if *h > 0.0 { *d } else { 0.0 }).collect();
    let d_h1 = linear_backward(params, grads, Block::Afh2Weight, Block::Afh2Bias, &trace.h1, &d_h2);
    let d_h1: Vec<f64> = d_h1.iter().zip(&trace.h1).map(|(d, h)| if *h > 0.0 { *d } else { 0.0 }).collect();
    let mut d_in = linear_backward(params, grads, Block::Afh1Weight, Block::Afh1Bias, &trace.input, &d_h1);
    d_in.truncate(2 * params.dim);
    d_in
}

fn linear_backward(
    params: &EncoderParams,
    grads: &mut EncoderParams,
    weight: Block,
    bias: Block,
    x: &[f64],
    d_out: &[f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let w = params.block(weight);
    let mut d_in = vec![0.0; in_dim];
    let w_range = grads.block_range(weight);
    let b_range = grads.block_range(bias);
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.values[b_range.start + o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let grow = &mut grads.values[w_range.start + o * in_dim..w_range.start + (o + 1) * in_dim];
        for k in 0..in_dim {
            grow[k] += g * x[k];
            d_in[k] += g * row[k];
        }
    }
    d_in
}

/// Predicts one person's appearance per frame from the GAF and that person's
/// positions: row `t` is `AFH(concat(G, PE(position_t)))`.
pub fn predict_appearance(gaf: &Gaf, person_positions: &[[f64; 2]], params: &EncoderParams) -> Result<Vec<Vec<f64>>> {
    if gaf.len() != params.gaf_dim() {
        return Err(Error::Shape(format!("GAF has dim {} but the head expects {}", gaf.len(), params.gaf_dim())));
    }
    Ok(person_positions
        .iter()
        .map(|&p| afh_forward(params, afh_input(gaf, p, params)).out)
        .collect())
}

/// Layer activations for one head evaluation, exposed for gradient checks.
pub fn afh_trace(gaf: &Gaf, position: [f64; 2], params: &EncoderParams) -> AfhTrace {
    afh_forward(params, afh_input(gaf, position, params))
}

/// Mean over `(video, person)` pairs of the per-pair MSE. Each pair holds the
/// flattened prediction and target of one person.
pub fn mean_person_mse(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("empty prediction batch".into()));
    }
    let mut total = 0.0;
    for (pred, target) in pairs {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "prediction has {} values but target has {}",
                pred.len(),
                target.len()
            )));
        }
        total += crate::linalg::mse(pred, target);
    }
    Ok(total / pairs.len() as f64)
}

/// One pre-training example: a clip and the persons hidden from the encoder.
pub type MaskedVideo<'a> = (&'a VideoFeatures, MaskPattern);

/// Appearance-prediction loss of a batch: mean over clips and persons of the
/// MSE between the head's predictions (made from the masked clip's GAF) and
/// the input appearance features of every person, masked ones included.
pub fn pretrain_loss(params: &EncoderParams, batch: &[MaskedVideo<'_>]) -> Result<f64> {
    pretrain_pass(params, batch, false).map(|(loss, _)| loss)
}

/// [`pretrain_loss`] and its gradient with respect to every parameter.
pub fn pretrain_loss_grad(params: &EncoderParams, batch: &[MaskedVideo<'_>]) -> Result<(f64, EncoderParams)> {
    pretrain_pass(params, batch, true).map(|(loss, g)| (loss, g.expect("gradient requested")))
}

fn pretrain_pass(
    params: &EncoderParams,
    batch: &[MaskedVideo<'_>],
    want_grad: bool,
) -> Result<(f64, Option<EncoderParams>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty pre-training batch".into()));
    }
    let pair_count: usize = batch.iter().map(|(v, _)| v.persons).sum();
    let mut grads = want_grad.then(|| params.zeros_like());
    let mut total = 0.0;
    for (video, mask) in batch {
        let trace = encode_gaf_traced(video, params, mask)?;
        let gaf = trace.gaf().clone();
        let per_pair = 1.0 / pair_count as f64;
        let entries = (video.frames * video.dim) as f64;
        let mut d_gaf = vec![0.0; gaf.len()];
        for i in 0..video.persons {
            for t in 0..video.frames {
                let head = afh_forward(params, afh_input(&gaf, video.position_at(t, i), params));
                let target = video.appearance_at(t, i);
                let sq: f64 = head.out.iter().zip(target).map(|(p, a)| (p - a) * (p - a)).sum();
                total += per_pair * sq / entries;
                if let Some(g) = grads.as_mut() {
                    let d_out: Vec<f64> = head
                        .out
                        .iter()
                        .zip(target)
                        .map(|(p, a)| per_pair * 2.0 * (p - a) / entries)
                        .collect();
                    let d_g = afh_backward(params, &head, &d_out, g);
                    for (acc, d) in d_gaf.iter_mut().zip(&d_g) {
                        *acc += d;
                    }
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            trace.backward(&d_gaf, g);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("pre-training loss is {total}")));
    }
    Ok((total, grads))
}

/// Settings for self-supervised pre-training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Appearance-head hidden width; `None` means `2C`.
    pub hidden: Option<usize>,
    pub pe_base: f64,
    /// Per clip and epoch, the number of masked persons is drawn uniformly
    /// from `0..=floor(N / mask_divisor)` (capped at `N - 1`). This bound is
    /// a guess; tune it if pre-training collapses.
    pub mask_divisor: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            hidden: None,
            pe_base: PE_BASE,
            mask_divisor: 3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.mask_divisor == 0 {
            return Err(Error::Config("mask_divisor must be positive".into()));
        }
        self.adam.validate()
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(2 * dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PretrainReport {
    /// Unmasked loss over the whole training set before the first update.
    pub initial_loss: f64,
    /// Mean masked training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Unmasked loss over the whole training set after the last update.
    pub final_loss: f64,
}

/// Initial parameters used by [`pretrain`] for a given seed.
pub fn pretrain_init(dim: usize, cfg: &PretrainConfig, seed: u64) -> Result<EncoderParams> {
    let mut rng = seeded(derive_seed(seed, &[0]));
    EncoderParams::init(dim, cfg.hidden_for(dim), cfg.pe_base, &mut rng)
}

/// Pre-trains the encoder and appearance head with Adam on the masked
/// appearance-prediction loss. Reproducible for a given seed.
pub fn pretrain(videos: &[&VideoFeatures], cfg: &PretrainConfig, seed: u64) -> Result<(EncoderParams, PretrainReport)> {
    cfg.validate()?;
    let first = videos.first().ok_or_else(|| Error::Precondition("pre-training set is empty".into()))?;
    let params = pretrain_init(first.dim, cfg, seed)?;
    pretrain_from(params, videos, cfg, seed)
}

/// Continues pre-training from existing parameters.
pub fn pretrain_from(
    mut params: EncoderParams,
    videos: &[&VideoFeatures],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderParams, PretrainReport)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Precondition("pre-training set is empty".into()));
    }
    let full_loss = |p: &EncoderParams| -> Result<f64> {
        let batch: Vec<MaskedVideo<'_>> = videos.iter().map(|v| (*v, MaskPattern::none())).collect();
        pretrain_loss(p, &batch)
    };
    let initial_loss = full_loss(&params)?;
    let mut rng = seeded(derive_seed(seed, &[1]));
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let v = videos[idx];
                let cap = (v.persons / cfg.mask_divisor).min(v.persons - 1);
                let count = rng.random_range(0..=cap);
                batch.push((v, MaskPattern::random(count, v.persons, &mut rng)?));
            }
            let (loss, grads) = pretrain_loss_grad(&params, &batch).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            weighted += loss * chunk.len() as f64;
            adam.step(params.values_mut(), grads.values(), &cfg.adam)?;
        }
        epoch_losses.push(weighted / videos.len() as f64);
    }
    let final_loss = full_loss(&params)?;
    Ok((params, PretrainReport { initial_loss, epoch_losses, final_loss }))
}

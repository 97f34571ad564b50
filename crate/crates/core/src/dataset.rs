//! Labelled clip collections, the synthetic generator and the scripted
//! annotator that stands in for a human during evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::VideoFeatures;
use crate::error::{Error, Result};
use crate::finetune::{Annotation, Label};
use crate::rng::{seeded, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassEntry {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetEntry {
    pub split: Split,
    pub video: VideoFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub dim: usize,
    pub entries: Vec<DatasetEntry>,
    /// Class names with video counts, in order of first appearance.
    pub class_catalog: Vec<ClassEntry>,
    index: BTreeMap<String, usize>,
}

impl Dataset {
    /// Validates the entries and derives the class catalog.
    pub fn new(id: impl Into<String>, dim: usize, entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut catalog: Vec<ClassEntry> = Vec::new();
        for (k, e) in entries.iter().enumerate() {
            let v = &e.video;
            if v.dim != dim {
                return Err(Error::Shape(format!(
                    "video {} has feature dim {} but the dataset declares C = {dim}",
                    v.id, v.dim
                )));
            }
            v.validate()?;
            if index.insert(v.id.clone(), k).is_some() {
                return Err(Error::Precondition(format!("duplicate video id {}", v.id)));
            }
            if let Some(label) = &v.class_label {
                match catalog.iter_mut().find(|c| &c.name == label) {
                    Some(c) => c.count += 1,
                    None => catalog.push(ClassEntry { name: label.clone(), count: 1 }),
                }
            }
        }
        Ok(Self { id: id.into(), dim, entries, class_catalog: catalog, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetEntry> {
        self.index.get(id).map(|&k| &self.entries[k])
    }

    pub fn video(&self, id: &str) -> Result<&VideoFeatures> {
        self.get(id).map(|e| &e.video).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn split(&self, split: Split) -> Vec<&VideoFeatures> {
        self.entries.iter().filter(|e| e.split == split).map(|e| &e.video).collect()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.class_catalog.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_count(&self, name: &str) -> usize {
        self.class_catalog.iter().find(|c| c.name == name).map_or(0, |c| c.count)
    }

    /// Checks that both splits are populated, as the evaluation protocol needs.
    pub fn require_splits(&self) -> Result<()> {
        for s in [Split::Train, Split::Test] {
            if !self.entries.iter().any(|e| e.split == s) {
                return Err(Error::InsufficientData(format!("dataset {} has no {} videos", self.id, s.as_str())));
            }
        }
        Ok(())
    }
}

/// Knobs of the synthetic generator.
///
/// Every class is a formation: per-role anchor positions on a unit court with
/// a smooth drift across frames, plus a per-role appearance made of a shared
/// role component and an action component. Classes come in mirrored pairs
/// (`r-*` and `l-*`) that share appearance and differ only by `x ↦ 1 − x`,
/// so the pairs are easy to confuse.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticConfig {
    pub class_count: usize,
    pub videos_per_class: usize,
    /// Fraction of each class assigned to the test split (rounded).
    pub test_fraction: f64,
    pub persons: usize,
    pub frames: usize,
    pub dim: usize,
    /// Scales every per-clip perturbation. At zero all clips of a class are
    /// identical.
    pub noise_scale: f64,
    /// Std of a per-clip appearance offset shared by all persons (lighting,
    /// camera), relative to `noise_scale`. It carries no class information.
    pub scene_ratio: f64,
    /// Std of the per-action appearance component.
    pub action_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            class_count: 8,
            videos_per_class: 100,
            test_fraction: 0.25,
            persons: 12,
            frames: 8,
            dim: 16,
            noise_scale: 0.25,
            scene_ratio: 2.0,
            action_scale: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("class_count", self.class_count),
            ("videos_per_class", self.videos_per_class),
            ("persons", self.persons),
            ("frames", self.frames),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of 4", self.dim)));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} must lie in [0, 1]", self.test_fraction)));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("scene_ratio", self.scene_ratio),
            ("action_scale", self.action_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn test_per_class(&self) -> usize {
        libm::round(self.videos_per_class as f64 * self.test_fraction) as usize
    }
}

const ACTIONS: [&str; 4] = ["set", "spike", "pass", "winpoint"];

/// Name of synthetic class `c`.
pub fn synthetic_class_name(c: usize) -> String {
    let side = if c.is_multiple_of(2) { "r" } else { "l" };
    match ACTIONS.get(c / 2) {
        Some(a) => format!("{side}-{a}"),
        None => format!("{side}-action{}", c / 2),
    }
}

struct Formation {
    anchors: Vec<[f64; 2]>,
    drift: Vec<[f64; 2]>,
    appearance: Vec<Vec<f64>>,
}

/// Generates a labelled dataset. Deterministic for a given config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let (n, t_len, c_dim) = (cfg.persons, cfg.frames, cfg.dim);
    let gauss = |rng: &mut crate::rng::SeededRng, std: f64| std * standard_normal(rng);

    let roles: Vec<Vec<f64>> = (0..n).map(|_| (0..c_dim).map(|_| standard_normal(&mut rng)).collect()).collect();
    let formations: Vec<Formation> = (0..cfg.class_count.div_ceil(2))
        .map(|_| Formation {
            anchors: (0..n).map(|_| [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)]).collect(),
            drift: (0..n).map(|_| [gauss(&mut rng, 0.1), gauss(&mut rng, 0.1)]).collect(),
            appearance: (0..n)
                .map(|i| roles[i].iter().map(|r| r + gauss(&mut rng, cfg.action_scale)).collect())
                .collect(),
        })
        .collect();

    let total = cfg.class_count * cfg.videos_per_class;
    let mut numbering: Vec<usize> = (0..total).collect();
    numbering.shuffle(&mut rng);
    let test_count = cfg.test_per_class();
    let noise = cfg.noise_scale;

    let mut entries = Vec::with_capacity(total);
    for class in 0..cfg.class_count {
        let f = &formations[class / 2];
        let mirrored = class % 2 == 1;
        let name = synthetic_class_name(class);
        for k in 0..cfg.videos_per_class {
            let scene: Vec<f64> = (0..c_dim).map(|_| gauss(&mut rng, cfg.scene_ratio * noise)).collect();
            let person_pos: Vec<[f64; 2]> = (0..n).map(|_| [gauss(&mut rng, 0.5 * noise), gauss(&mut rng, 0.5 * noise)]).collect();
            let person_app: Vec<Vec<f64>> =
                (0..n).map(|_| (0..c_dim).map(|_| gauss(&mut rng, noise)).collect()).collect();
            let mut appearance = Vec::with_capacity(t_len * n * c_dim);
            let mut positions = Vec::with_capacity(t_len * n);
            for t in 0..t_len {
                let phase = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
                for i in 0..n {
                    let mut x = f.anchors[i][0] + f.drift[i][0] * phase + person_pos[i][0] + gauss(&mut rng, 0.1 * noise);
                    let y = f.anchors[i][1] + f.drift[i][1] * phase + person_pos[i][1] + gauss(&mut rng, 0.1 * noise);
                    if mirrored {
                        x = 1.0 - x;
                    }
                    positions.push([x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]);
                    for c in 0..c_dim {
                        appearance.push(f.appearance[i][c] + scene[c] + person_app[i][c] + gauss(&mut rng, 0.5 * noise));
                    }
                }
            }
            let split = if k >= cfg.videos_per_class - test_count { Split::Test } else { Split::Train };
            let id = format!("clip-{:05}", numbering[class * cfg.videos_per_class + k]);
            let video = VideoFeatures::new(id, Some(name.clone()), t_len, n, c_dim, appearance, positions)?;
            entries.push(DatasetEntry { split, video });
        }
    }
    Dataset::new(format!("synthetic-{}", cfg.seed), c_dim, entries)
}

/// Scripted annotator: positive iff the clip's ground-truth class is
/// `target_class`.
pub fn oracle_annotate(selected_ids: &[&str], target_class: &str, dataset: &Dataset) -> Result<Vec<Annotation>> {
    selected_ids
        .iter()
        .map(|id| {
            let video = dataset.video(id)?;
            let class = video
                .class_label
                .as_deref()
                .ok_or_else(|| Error::InsufficientData(format!("video {id} has no class label")))?;
            let label = if class == target_class { Label::Positive } else { Label::Negative };
            Ok(Annotation { video_id: (*id).to_string(), label, annotator: Some("oracle".into()), timestamp: None })
        })
        .collect()
}

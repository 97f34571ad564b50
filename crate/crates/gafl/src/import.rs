//! Import of externally computed per-person features.
//!
//! The input is JSON Lines with one clip per line and no header. Field names
//! are configurable; by default a line looks like a dataset video record:
//!
//! ```text
//! {"id":"a","class":"spike","split":"test","positions":[[[x,y],...]],"appearance":[[[...]]]}
//! ```
//!
//! `T`, `N` and `C` are inferred from the arrays. Every record must agree on
//! `C`; `T` and `N` may vary between clips.

use std::fs;
use std::io::Write;
use std::path::Path;

use gafl_core::{Dataset, DatasetEntry, Split, VideoFeatures};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportSchema {
    pub dataset_id: String,
    pub id_field: String,
    /// Absent or `null` classes are allowed.
    pub class_field: String,
    pub split_field: String,
    pub positions_field: String,
    pub appearance_field: String,
    /// Split for records without a split field.
    pub default_split: Split,
    /// Reject positions outside `[0, 1]²` instead of clamping them.
    pub strict: bool,
}

impl Default for ImportSchema {
    fn default() -> Self {
        Self {
            dataset_id: "imported".into(),
            id_field: "id".into(),
            class_field: "class".into(),
            split_field: "split".into(),
            positions_field: "positions".into(),
            appearance_field: "appearance".into(),
            default_split: Split::Train,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imported {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

struct Parsed {
    entry: DatasetEntry,
    clamped: usize,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> std::result::Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field `{name}`"))
}

fn array<'a>(v: &'a Value, what: &str) -> std::result::Result<&'a Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("{what} is not an array"))
}

fn number(v: &Value, what: &str) -> std::result::Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} is not a number"))
}

fn parse_record(value: Value, schema: &ImportSchema, dim: &mut Option<usize>) -> std::result::Result<Parsed, String> {
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let id = field(obj, &schema.id_field)?.as_str().ok_or_else(|| format!("`{}` is not a string", schema.id_field))?;
    let class = match obj.get(&schema.class_field) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(format!("`{}` is not a string", schema.class_field)),
    };
    let split = match obj.get(&schema.split_field) {
        None | Some(Value::Null) => schema.default_split,
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| format!("`{}` must be \"train\" or \"test\"", schema.split_field))?,
    };
    let pos_frames = array(field(obj, &schema.positions_field)?, &schema.positions_field)?;
    let app_frames = array(field(obj, &schema.appearance_field)?, &schema.appearance_field)?;
    let frames = pos_frames.len();
    if frames == 0 {
        return Err(format!("`{}` has no frames", schema.positions_field));
    }
    if app_frames.len() != frames {
        return Err(format!("{} position frames but {} appearance frames", frames, app_frames.len()));
    }
    let persons = array(&pos_frames[0], "positions[0]")?.len();
    if persons == 0 {
        return Err("frame 0 has no persons".into());
    }

    let mut positions = Vec::with_capacity(frames * persons);
    let mut appearance = Vec::new();
    let mut clamped = 0;
    for t in 0..frames {
        let pos = array(&pos_frames[t], &format!("positions[{t}]"))?;
        let app = array(&app_frames[t], &format!("appearance[{t}]"))?;
        if pos.len() != persons || app.len() != persons {
            return Err(format!(
                "ragged frame {t}: {} positions and {} appearance vectors, expected {persons}",
                pos.len(),
                app.len()
            ));
        }
        for i in 0..persons {
            let xy = array(&pos[i], &format!("positions[{t}][{i}]"))?;
            if xy.len() != 2 {
                return Err(format!("positions[{t}][{i}] has {} coordinates, expected 2", xy.len()));
            }
            let mut p = [number(&xy[0], "position x")?, number(&xy[1], "position y")?];
            if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                if schema.strict {
                    return Err(format!("position {p:?} of frame {t} person {i} is outside [0,1]²"));
                }
                p = p.map(|c| c.clamp(0.0, 1.0));
                clamped += 1;
            }
            positions.push(p);

            let a = array(&app[i], &format!("appearance[{t}][{i}]"))?;
            let c = *dim.get_or_insert(a.len());
            if a.len() != c {
                return Err(format!("appearance[{t}][{i}] has {} values, expected C = {c}", a.len()));
            }
            for x in a {
                appearance.push(number(x, "appearance value")?);
            }
        }
    }
    let c = dim.unwrap_or(0);
    let video = VideoFeatures::new(id, class, frames, persons, c, appearance, positions).map_err(|e| e.to_string())?;
    Ok(Parsed { entry: DatasetEntry { split, video }, clamped })
}

/// Parses feature records. Every malformed record is listed in the error.
pub fn parse_features(text: &str, schema: &ImportSchema) -> Result<Imported> {
    let mut dim = None;
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = k + 1;
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("line {line_no}: {e}"));
                continue;
            }
        };
        let label = value.get(&schema.id_field).and_then(Value::as_str).map(str::to_owned);
        let name = match &label {
            Some(id) => format!("line {line_no} ({id})"),
            None => format!("line {line_no}"),
        };
        match parse_record(value, schema, &mut dim) {
            Ok(p) => {
                if p.clamped > 0 {
                    warnings.push(format!("{name}: clamped {} positions into [0,1]²", p.clamped));
                }
                entries.push(p.entry);
            }
            Err(m) => problems.push(format!("{name}: {m}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Invalid(format!("{} record(s) rejected:\n  {}", problems.len(), problems.join("\n  "))));
    }
    let dim = dim.ok_or_else(|| Error::Invalid("no feature records found".into()))?;
    let dataset = Dataset::new(schema.dataset_id.clone(), dim, entries)?;
    Ok(Imported { dataset, warnings })
}

pub fn import_features(path: &Path, schema: &ImportSchema) -> Result<Imported> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text, schema).map_err(|e| match e {
        Error::Invalid(m) => Error::Invalid(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes the dataset's clips in the default import layout.
pub fn export_features(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for entry in &dataset.entries {
        let record = crate::format::VideoRecord::from_entry(entry);
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

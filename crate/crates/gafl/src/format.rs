//! The dataset file and the parameter file.
//!
//! A dataset file is JSON Lines. The first line is a header
//!
//! ```text
//! {"format":"gafl-dataset","version":1,"id":"synthetic-0","C":16,"T":[8,8],"N":[12,12],
//!  "videos":800,"class_catalog":[{"name":"r-set","count":100},...],"meta":{...}}
//! ```
//!
//! where `T` and `N` are `[min, max]` over the videos and `meta` is optional.
//! Every further line is one video:
//!
//! ```text
//! {"id":"clip-00017","split":"train","class":"r-set","T":8,"N":12,
//!  "positions":[[[x,y],...N],...T],"appearance":[[[...C],...N],...T]}
//! ```
//!
//! `class` may be `null`. Floats are written in shortest round-trip form, so
//! loading a saved dataset reproduces it exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use gafl_core::encoder::Block;
use gafl_core::{ClassEntry, Dataset, DatasetEntry, EncoderParams, PretrainReport, Split, VideoFeatures};
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactMeta;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "gafl-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const PARAMS_FORMAT: &str = "gafl-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub id: String,
    #[serde(rename = "C")]
    pub dim: usize,
    #[serde(rename = "T")]
    pub frames: [usize; 2],
    #[serde(rename = "N")]
    pub persons: [usize; 2],
    pub videos: usize,
    pub class_catalog: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub split: Split,
    pub class: Option<String>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "N")]
    pub persons: usize,
    /// `T × N` court positions.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// `T × N × C` appearance vectors.
    pub appearance: Vec<Vec<Vec<f64>>>,
}

impl VideoRecord {
    pub fn from_entry(entry: &DatasetEntry) -> Self {
        let v = &entry.video;
        let positions = (0..v.frames).map(|t| (0..v.persons).map(|i| v.position_at(t, i)).collect()).collect();
        let appearance =
            (0..v.frames).map(|t| (0..v.persons).map(|i| v.appearance_at(t, i).to_vec()).collect()).collect();
        Self {
            id: v.id.clone(),
            split: entry.split,
            class: v.class_label.clone(),
            frames: v.frames,
            persons: v.persons,
            positions,
            appearance,
        }
    }

    /// Checks the nested arrays against `T`, `N` and the dataset `C` and
    /// flattens them. Errors name the video.
    pub fn into_entry(self, dim: usize) -> std::result::Result<DatasetEntry, String> {
        let id = &self.id;
        if self.positions.len() != self.frames || self.appearance.len() != self.frames {
            return Err(format!(
                "video {id}: T = {} but positions has {} frames and appearance {}",
                self.frames,
                self.positions.len(),
                self.appearance.len()
            ));
        }
        let mut positions = Vec::with_capacity(self.frames * self.persons);
        let mut appearance = Vec::with_capacity(self.frames * self.persons * dim);
        for (t, (pos, app)) in self.positions.iter().zip(&self.appearance).enumerate() {
            if pos.len() != self.persons || app.len() != self.persons {
                return Err(format!(
                    "video {id}: N = {} but frame {t} has {} positions and {} appearance vectors",
                    self.persons,
                    pos.len(),
                    app.len()
                ));
            }
            positions.extend_from_slice(pos);
            for (i, a) in app.iter().enumerate() {
                if a.len() != dim {
                    return Err(format!(
                        "video {id}: appearance of person {i} in frame {t} has {} values but the header declares C = {dim}",
                        a.len()
                    ));
                }
                appearance.extend_from_slice(a);
            }
        }
        let video = VideoFeatures::new(self.id, self.class, self.frames, self.persons, dim, appearance, positions)
            .map_err(|e| e.to_string())?;
        Ok(DatasetEntry { split: self.split, video })
    }
}

fn range_of(values: impl Iterator<Item = usize>) -> [usize; 2] {
    values.fold([usize::MAX, 0], |[lo, hi], x| [lo.min(x), hi.max(x)]).map(|x| if x == usize::MAX { 0 } else { x })
}

pub fn dataset_header(dataset: &Dataset, meta: Option<&ArtifactMeta>) -> DatasetHeader {
    DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        id: dataset.id.clone(),
        dim: dataset.dim,
        frames: range_of(dataset.entries.iter().map(|e| e.video.frames)),
        persons: range_of(dataset.entries.iter().map(|e| e.video.persons)),
        videos: dataset.len(),
        class_catalog: dataset.class_catalog.clone(),
        meta: meta.cloned(),
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, meta: Option<&ArtifactMeta>, out: &mut W) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, &dataset_header(dataset, meta))?;
    out.write_all(b"\n")?;
    for entry in &dataset.entries {
        serde_json::to_writer(&mut *out, &VideoRecord::from_entry(entry))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn dataset_to_string(dataset: &Dataset, meta: Option<&ArtifactMeta>) -> String {
    let mut buf = Vec::new();
    write_dataset(dataset, meta, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    save_dataset_with_meta(dataset, None, path)
}

pub fn save_dataset_with_meta(dataset: &Dataset, meta: Option<&ArtifactMeta>, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_dataset(dataset, meta, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_dataset(&text, path)?.0)
}

/// Parses dataset text; `origin` only labels error messages.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<(Dataset, DatasetHeader)> {
    let parse_err = |line: usize, offset: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        offset,
        message,
    };
    let mut header: Option<DatasetHeader> = None;
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut line_no = 0;
    for line in text.split_inclusive('\n') {
        line_no += 1;
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            continue;
        }
        match &header {
            None => {
                let h: DatasetHeader =
                    serde_json::from_str(body).map_err(|e| parse_err(line_no, start, format!("bad header: {e}")))?;
                if h.format != DATASET_FORMAT {
                    return Err(parse_err(line_no, start, format!("format {:?} is not {DATASET_FORMAT:?}", h.format)));
                }
                if h.version != DATASET_VERSION {
                    return Err(parse_err(
                        line_no,
                        start,
                        format!("unsupported version {} (this build reads version {DATASET_VERSION})", h.version),
                    ));
                }
                header = Some(h);
            }
            Some(h) => {
                let record: VideoRecord = serde_json::from_str(body)
                    .map_err(|e| parse_err(line_no, start, format!("bad video record: {e}")))?;
                let entry = record.into_entry(h.dim).map_err(|m| parse_err(line_no, start, m))?;
                entries.push(entry);
            }
        }
    }
    let header = header.ok_or_else(|| parse_err(1, 0, "empty file, expected a header line".into()))?;
    if entries.len() != header.videos {
        return Err(parse_err(
            line_no + 1,
            offset,
            format!("header announces {} videos but {} were found (truncated file?)", header.videos, entries.len()),
        ));
    }
    let dataset = Dataset::new(header.id.clone(), header.dim, entries)?;
    if dataset.class_catalog != header.class_catalog {
        return Err(Error::Invalid(format!(
            "{}: class catalog in the header does not match the video records",
            origin.display()
        )));
    }
    Ok((dataset, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    /// `[rows, cols]`; biases have one column.
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Encoder and appearance-head parameters as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub format: String,
    pub version: u32,
    #[serde(rename = "C")]
    pub dim: usize,
    pub hidden: usize,
    pub pe_base: f64,
    pub blocks: Vec<ParamBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

impl ParamsDocument {
    pub fn new(params: &EncoderParams, pretrain: Option<&PretrainReport>, meta: Option<&ArtifactMeta>) -> Self {
        let blocks = Block::ALL
            .iter()
            .map(|&b| {
                let (rows, cols) = b.shape(params.dim(), params.hidden());
                ParamBlock { name: b.name().into(), shape: [rows, cols], values: params.block(b).to_vec() }
            })
            .collect();
        Self {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            dim: params.dim(),
            hidden: params.hidden(),
            pe_base: params.pe_base(),
            blocks,
            pretrain: pretrain.cloned(),
            meta: meta.cloned(),
        }
    }

    pub fn params(&self) -> Result<EncoderParams> {
        if self.format != PARAMS_FORMAT || self.version != PARAMS_VERSION {
            return Err(Error::Invalid(format!(
                "expected {PARAMS_FORMAT} version {PARAMS_VERSION}, found {} version {}",
                self.format, self.version
            )));
        }
        if self.blocks.len() != Block::ALL.len() {
            return Err(Error::Invalid(format!("expected {} parameter blocks, found {}", Block::ALL.len(), self.blocks.len())));
        }
        let mut values = Vec::new();
        for (block, stored) in Block::ALL.iter().zip(&self.blocks) {
            let (rows, cols) = block.shape(self.dim, self.hidden);
            if stored.name != block.name() || stored.shape != [rows, cols] || stored.values.len() != rows * cols {
                return Err(Error::Invalid(format!(
                    "parameter block {:?} with shape {:?} and {} values does not match {} [{rows}, {cols}]",
                    stored.name,
                    stored.shape,
                    stored.values.len(),
                    block.name()
                )));
            }
            values.extend_from_slice(&stored.values);
        }
        Ok(EncoderParams::from_values(self.dim, self.hidden, self.pe_base, values)?)
    }
}

pub fn save_params(
    params: &EncoderParams,
    pretrain: Option<&PretrainReport>,
    meta: Option<&ArtifactMeta>,
    path: &Path,
) -> Result<()> {
    let mut text = serde_json::to_string(&ParamsDocument::new(params, pretrain, meta)).expect("parameters serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_params_document(path: &Path) -> Result<ParamsDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        offset: line_offset(&text, e.line()),
        message: e.to_string(),
    })
}

pub fn load_params(path: &Path) -> Result<EncoderParams> {
    load_params_document(path)?.params()
}

/// Byte offset of the start of 1-based `line`.
pub(crate) fn line_offset(text: &str, line: usize) -> usize {
    text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum()
}

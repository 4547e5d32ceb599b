//! Line-delimited JSON dataset manifests.
//!
//! The first line is a [`ManifestHeader`]; every following non-blank line is
//! one [`SampleRecord`]. Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::container::{read_tensor, tensor_feature_map, tensor_mask, write_atomic};
use crate::error::{Error, Result};
use crate::numcore::DenseFeatureMap;
use crate::pipeline::Sample;
use crate::synthgen::DefectMode;

pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_MINOR: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: String,
    pub has_2d: bool,
    pub has_3d: bool,
    /// `[height, width]` of every feature grid.
    pub grid: [usize; 2],
    pub d2: Option<usize>,
    pub d3: Option<usize>,
    pub seed: u64,
    pub provenance: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl ManifestHeader {
    pub fn new(has_2d: bool, has_3d: bool, grid: [usize; 2], d2: Option<usize>, d3: Option<usize>, seed: u64) -> Self {
        Self {
            schema_version: format!("{SCHEMA_MAJOR}.{SCHEMA_MINOR}"),
            has_2d,
            has_3d,
            grid,
            d2,
            d3,
            seed,
            provenance: String::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f3: Option<String>,
    /// Validity mask of the 3D features (of the 2D features when no 3D path
    /// is given); all pixels are valid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defect_modes: Vec<DefectMode>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, split: Split, label: Label) -> Self {
        Self {
            id: id.into(),
            split,
            label,
            f2: None,
            f3: None,
            validity: None,
            gt: None,
            defect_modes: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.into(), msg: msg.into() }
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, lineno: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let path = if field == "." { format!("line {lineno}") } else { format!("line {lineno}: {field}") };
        schema(path, e.into_inner().to_string())
    })
}

impl DatasetManifest {
    /// Parses manifest text. Unknown fields and newer minor schema versions
    /// are accepted; each such case yields a warning string.
    pub fn parse_with_warnings(text: &str) -> Result<(Self, Vec<String>)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (i, first) = lines.next().ok_or_else(|| schema("line 1", "empty manifest"))?;
        let header: ManifestHeader = parse_line(first, i + 1)?;
        let mut warnings = Vec::new();
        let (major, minor) = header
            .schema_version
            .split_once('.')
            .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
            .ok_or_else(|| schema(format!("line {}: schema_version", i + 1), "expected MAJOR.MINOR"))?;
        if major != SCHEMA_MAJOR {
            return Err(schema(
                format!("line {}: schema_version", i + 1),
                format!("unsupported major version {major}"),
            ));
        }
        if minor > SCHEMA_MINOR {
            warnings.push(format!("schema version {} is newer than {SCHEMA_MAJOR}.{SCHEMA_MINOR}", header.schema_version));
        }
        for k in header.extra.keys() {
            warnings.push(format!("line {}: unknown header field `{k}` ignored", i + 1));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let rec: SampleRecord = parse_line(line, i + 1)?;
            for k in rec.extra.keys() {
                warnings.push(format!("line {}: unknown field `{k}` ignored", i + 1));
            }
            samples.push(rec);
        }
        Ok((Self { header, samples }, warnings))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (m, warnings) = Self::parse_with_warnings(text)?;
        for w in warnings {
            log::warn!("{w}");
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Reads, parses and checks a manifest, including every referenced file.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::parse(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        m.validate_files(&base_dir(path))?;
        Ok(m)
    }

    /// Structural checks: unique ids (so the splits partition the samples),
    /// modality paths matching the flags, and the one-class training split.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if !h.has_2d && !h.has_3d {
            return Err(schema("header", "at least one of has_2d/has_3d must be set"));
        }
        if h.grid[0] == 0 || h.grid[1] == 0 {
            return Err(schema("header.grid", "grid dims must be positive"));
        }
        for (flag, d, name) in [(h.has_2d, h.d2, "d2"), (h.has_3d, h.d3, "d3")] {
            if flag && d.is_none_or(|d| d == 0) {
                return Err(schema(format!("header.{name}"), "required positive dim for a present modality"));
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            let at = |f: &str| format!("sample {i} ({}): {f}", s.id);
            if !seen.insert(s.id.as_str()) {
                return Err(schema(at("id"), "duplicate sample id"));
            }
            if h.has_2d != s.f2.is_some() {
                return Err(schema(at("f2"), "2D path must be present exactly when has_2d is set"));
            }
            if h.has_3d != s.f3.is_some() {
                return Err(schema(at("f3"), "3D path must be present exactly when has_3d is set"));
            }
            if s.split == Split::Train && s.label != Label::Normal {
                return Err(Error::ProtocolViolation(format!(
                    "training sample `{}` is labeled anomalous; the training split must contain only normal samples",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Every referenced file exists, parses, and matches the declared shapes.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for rec in &self.samples {
            self.read_sample(base, rec)?;
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    fn read_sample(&self, base: &Path, rec: &SampleRecord) -> Result<Sample> {
        let [h, w] = self.header.grid;
        let ctx = |field: &'static str, e: Error| match e {
            Error::Io(io) => schema(format!("sample {}: {field}", rec.id), io.to_string()),
            Error::Parse { offset, msg } => Error::Parse { offset, msg: format!("{field} of `{}`: {msg}", rec.id) },
            other => other,
        };
        let validity = match &rec.validity {
            Some(p) => {
                let t = read_tensor(&base.join(p)).map_err(|e| ctx("validity", e))?;
                Some(t)
            }
            None => None,
        };
        let load_map = |path: &Option<String>, field: &'static str, d: Option<usize>, valid: Option<&_>| -> Result<Option<DenseFeatureMap>> {
            let Some(p) = path else { return Ok(None) };
            let t = read_tensor(&base.join(p)).map_err(|e| ctx(field, e))?;
            let map = tensor_feature_map(&t, valid).map_err(|e| ctx(field, e))?;
            if map.height() != h || map.width() != w || Some(map.channels()) != d {
                return Err(schema(
                    format!("sample {}: {field}", rec.id),
                    format!("shape {}x{}x{} disagrees with the header", map.height(), map.width(), map.channels()),
                ));
            }
            Ok(Some(map))
        };
        let f2_valid = if rec.f3.is_none() { validity.as_ref() } else { None };
        let f2 = load_map(&rec.f2, "f2", self.header.d2, f2_valid)?;
        let f3 = load_map(&rec.f3, "f3", self.header.d3, validity.as_ref())?;
        let gt = match &rec.gt {
            Some(p) => {
                let t = read_tensor(&base.join(p)).map_err(|e| ctx("gt", e))?;
                if t.dims != [h as u64, w as u64] {
                    return Err(schema(format!("sample {}: gt", rec.id), format!("dims {:?} disagree with the grid", t.dims)));
                }
                Some(tensor_mask(&t)?)
            }
            None => None,
        };
        Ok(Sample {
            id: rec.id.clone(),
            anomalous: rec.label == Label::Anomalous,
            f2,
            f3,
            gt,
            defect_modes: rec.defect_modes.clone(),
        })
    }
}

pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Read access to a manifest's samples. Training code receives only a
/// [`TrainView`], which refuses every non-training sample.
#[derive(Debug, Clone)]
pub struct SampleStore {
    manifest: DatasetManifest,
    base: PathBuf,
}

impl SampleStore {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::parse(&std::fs::read_to_string(manifest_path)?)?;
        manifest.validate()?;
        Ok(Self { manifest, base: base_dir(manifest_path) })
    }

    pub fn new(manifest: DatasetManifest, base: PathBuf) -> Result<Self> {
        manifest.validate()?;
        Ok(Self { manifest, base })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.manifest.records(split).map(|r| self.manifest.read_sample(&self.base, r)).collect()
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView { store: self }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    store: &'a SampleStore,
}

impl TrainView<'_> {
    pub fn ids(&self) -> Vec<&str> {
        self.store.manifest.records(Split::Train).map(|r| r.id.as_str()).collect()
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        let rec = self.store.manifest.samples.iter().find(|r| r.id == id).ok_or_else(|| {
            Error::ProtocolViolation(format!("sample `{id}` is not in the manifest"))
        })?;
        if rec.split != Split::Train {
            return Err(Error::ProtocolViolation(format!("training accessed non-training sample `{id}`")));
        }
        self.store.manifest.read_sample(&self.store.base, rec)
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        self.ids().into_iter().map(|id| self.load(id)).collect()
    }
}

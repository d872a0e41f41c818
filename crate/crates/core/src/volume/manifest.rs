use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, LesionType, Modality, PatientCase, VolumeError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// File references for one case. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub modalities: BTreeMap<Modality, PathBuf>,
    pub mask: PathBuf,
    pub lesion_center_mm: [f64; 3],
    pub lesion_type: LesionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_reader_mask: Option<PathBuf>,
}

impl CaseEntry {
    fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.modalities.values().chain(std::iter::once(&self.mask)).chain(self.second_reader_mask.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub cases: Vec<CaseEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Parses and checks everything that does not touch the filesystem.
    pub fn parse(text: &str) -> Result<Self, VolumeError> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| VolumeError::Manifest(e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(VolumeError::Manifest(format!(
                "schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for c in &m.cases {
            if c.id.is_empty() {
                return Err(VolumeError::Manifest("empty case id".into()));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(VolumeError::Manifest(format!("duplicate case id {:?}", c.id)));
            }
            if c.modalities.is_empty() {
                return Err(VolumeError::Manifest(format!("case {:?} lists no modalities", c.id)));
            }
            if c.lesion_center_mm.iter().any(|v| !v.is_finite()) {
                return Err(VolumeError::Manifest(format!("case {:?} has a non-finite lesion center", c.id)));
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }
}

/// Loads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, VolumeError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| VolumeError::io(path, e))?;
    let mut m = DatasetManifest::parse(&text)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for c in &m.cases {
        for f in c.files() {
            let full = m.resolve(f);
            if !full.is_file() {
                return Err(VolumeError::Manifest(format!("case {:?}: missing file {}", c.id, full.display())));
            }
        }
    }
    Ok(m)
}

pub fn load_case(m: &DatasetManifest, entry: &CaseEntry) -> Result<PatientCase, VolumeError> {
    let mut modalities = BTreeMap::new();
    for (&tag, p) in &entry.modalities {
        modalities.insert(tag, load_volume(m.resolve(p))?);
    }
    let second_reader_mask = match &entry.second_reader_mask {
        Some(p) => Some(load_mask(m.resolve(p))?),
        None => None,
    };
    Ok(PatientCase {
        id: entry.id.clone(),
        modalities,
        mask: load_mask(m.resolve(&entry.mask))?,
        lesion_center: entry.lesion_center_mm,
        lesion_type: entry.lesion_type,
        second_reader_mask,
    })
}

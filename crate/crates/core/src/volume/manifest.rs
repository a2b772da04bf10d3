use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AxialBox;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionKind {
    Strong,
    Weak,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Supervision for one case. Paths are relative to the manifest's directory
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub case_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub supervision_kind: SupervisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<AxialBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lungmask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor_volume_cm3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor_diameter_mm: Option<f64>,
    /// Source dataset tag, used to partition evaluation reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty() {
            return Err(invalid!("record with empty case_id"));
        }
        if self.patient_id.is_empty() {
            return Err(invalid!("case {} has an empty patient_id", self.case_id));
        }
        match self.supervision_kind {
            SupervisionKind::Strong | SupervisionKind::Pseudo if self.mask_path.is_none() => {
                Err(invalid!(
                    "case {} is {:?} but has no mask_path",
                    self.case_id,
                    self.supervision_kind
                ))
            }
            SupervisionKind::Weak if self.boxes.as_ref().is_none_or(|b| b.is_empty()) => {
                Err(invalid!("weak case {} has no boxes", self.case_id))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    #[serde(default)]
    pub split: BTreeMap<String, Split>,
    #[serde(default)]
    pub sample_weight: BTreeMap<String, u32>,
    /// Directory relative paths are resolved against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<AnnotationRecord>, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            records,
            split: BTreeMap::new(),
            sample_weight: BTreeMap::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    /// Writes the manifest as pretty JSON. Paths are stored as given.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Re-expresses every record path relative to `new_base` (or absolute
    /// when that is not possible) so the manifest can be written elsewhere.
    pub fn rebase(&self, new_base: &Path) -> DatasetManifest {
        let fix = |p: &Path| -> PathBuf {
            let abs = self.resolve(p);
            match abs.strip_prefix(new_base) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => abs,
            }
        };
        let mut out = self.clone();
        for r in &mut out.records {
            r.image_path = fix(&r.image_path);
            r.mask_path = r.mask_path.as_deref().map(fix);
            r.lungmask_path = r.lungmask_path.as_deref().map(fix);
        }
        out.base_dir = new_base.to_path_buf();
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.case_id.as_str()) {
                return Err(invalid!("duplicate case_id {}", r.case_id));
            }
        }
        if !self.split.is_empty() {
            let mut patient_split: HashMap<&str, Split> = HashMap::new();
            for r in &self.records {
                let s = *self
                    .split
                    .get(&r.case_id)
                    .ok_or_else(|| invalid!("case {} has no split assignment", r.case_id))?;
                if let Some(prev) = patient_split.insert(&r.patient_id, s) {
                    if prev != s {
                        return Err(invalid!(
                            "patient {} spans splits {prev:?} and {s:?}",
                            r.patient_id
                        ));
                    }
                }
            }
        }
        if let Some((id, _)) = self.sample_weight.iter().find(|(_, &w)| w == 0) {
            return Err(invalid!("case {id} has sample_weight 0"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.case_id == case_id)
    }

    pub fn split_of(&self, case_id: &str) -> Option<Split> {
        self.split.get(case_id).copied()
    }

    pub fn weight_of(&self, case_id: &str) -> u32 {
        self.sample_weight.get(case_id).copied().unwrap_or(1)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &AnnotationRecord> {
        self.records
            .iter()
            .filter(move |r| self.split.get(&r.case_id) == Some(&split))
    }

    /// A new manifest with only the records satisfying `keep`; split and
    /// weight entries of dropped records are removed.
    pub fn filtered(&self, mut keep: impl FnMut(&AnnotationRecord) -> bool) -> DatasetManifest {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids: HashSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
        DatasetManifest {
            split: self
                .split
                .iter()
                .filter(|(k, _)| ids.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            sample_weight: self
                .sample_weight
                .iter()
                .filter(|(k, _)| ids.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            records,
            base_dir: self.base_dir.clone(),
        }
    }
}

//! JSON run manifests naming embedding files by role.
//!
//! ```json
//! {
//!   "version": 1,
//!   "entries": [
//!     {"role": "diverse", "path": "diverse.seme"},
//!     {"role": "paraphrases", "path": "para.seme", "labels": "para.csv"},
//!     {"role": "bias:gender:female", "path": "female.seme"}
//!   ],
//!   "params": {"k": 40}
//! }
//! ```
//! Paths are relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use crate::format::{read_embedding_matrix, read_labels, read_matrix_shape, write_atomic, EmbeddingMatrix, LabelTable};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Diverse,
    /// One row per neutral query.
    Queries,
    /// Paraphrase rows; their label file maps each row to a query index.
    Paraphrases,
    Images,
    Classes,
    /// SAE training corpus.
    Train,
    Bias { attribute: String, class: String },
    /// Attribute-marked variants of each query (row i pairs with query i).
    Gendered { attribute: String, class: String },
}

impl Role {
    fn tagged(tag: &str, rest: &str, s: &str) -> Result<(String, String)> {
        let mut parts = rest.splitn(2, ':');
        match (parts.next(), parts.next()) {
            (Some(a), Some(c)) if !a.is_empty() && !c.is_empty() && !c.contains(':') => Ok((a.to_string(), c.to_string())),
            _ => Err(SemError::InvalidArgument(format!("role {s:?} must look like {tag}:<attribute>:<class>"))),
        }
    }
}

impl FromStr for Role {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "diverse" => Role::Diverse,
            "queries" => Role::Queries,
            "paraphrases" => Role::Paraphrases,
            "images" => Role::Images,
            "classes" => Role::Classes,
            "train" => Role::Train,
            _ => {
                if let Some(rest) = s.strip_prefix("bias:") {
                    let (attribute, class) = Role::tagged("bias", rest, s)?;
                    Role::Bias { attribute, class }
                } else if let Some(rest) = s.strip_prefix("gendered:") {
                    let (attribute, class) = Role::tagged("gendered", rest, s)?;
                    Role::Gendered { attribute, class }
                } else {
                    return Err(SemError::InvalidArgument(format!("unknown manifest role {s:?}")));
                }
            }
        })
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Diverse => f.write_str("diverse"),
            Role::Queries => f.write_str("queries"),
            Role::Paraphrases => f.write_str("paraphrases"),
            Role::Images => f.write_str("images"),
            Role::Classes => f.write_str("classes"),
            Role::Train => f.write_str("train"),
            Role::Bias { attribute, class } => write!(f, "bias:{attribute}:{class}"),
            Role::Gendered { attribute, class } => write!(f, "gendered:{attribute}:{class}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            entries: Vec::new(),
            params: serde_json::Map::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn push(&mut self, role: Role, path: &str, labels: Option<&str>) {
        self.entries.push(ManifestEntry {
            role: role.to_string(),
            path: path.to_string(),
            labels: labels.map(str::to_string),
        });
    }

    /// Parses and validates: roles, file existence and a shared column count.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SemError::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| SemError::format(path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(SemError::format(path, format!("unsupported manifest version {}", m.version)));
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim: Option<(usize, String)> = None;
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            let role: Role = e.role.parse()?;
            if !seen.insert(role.clone()) {
                return Err(SemError::InvalidArgument(format!("role {role} appears twice in manifest")));
            }
            let (rows, cols) = read_matrix_shape(self.resolve(&e.path))?;
            match &dim {
                Some((d, first)) if *d != cols => {
                    return Err(SemError::format(
                        self.resolve(&e.path),
                        format!("role {role} has {cols} columns but {first} has {d}"),
                    ))
                }
                None => dim = Some((cols, e.role.clone())),
                _ => {}
            }
            if let Some(l) = &e.labels {
                let table = read_labels(self.resolve(l))?;
                if table.len() != rows {
                    return Err(SemError::format(
                        self.resolve(l),
                        format!("label file has {} rows but role {role} has {rows}", table.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn entry(&self, role: &Role) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.role.parse::<Role>().ok().as_ref() == Some(role))
    }

    fn require(&self, role: &Role) -> Result<&ManifestEntry> {
        self.entry(role)
            .ok_or_else(|| SemError::InvalidArgument(format!("manifest has no `{role}` role")))
    }

    pub fn has(&self, role: &Role) -> bool {
        self.entry(role).is_some()
    }

    pub fn matrix(&self, role: &Role) -> Result<EmbeddingMatrix> {
        read_embedding_matrix(self.resolve(&self.require(role)?.path))
    }

    pub fn labels(&self, role: &Role) -> Result<LabelTable> {
        let e = self.require(role)?;
        let l = e
            .labels
            .as_ref()
            .ok_or_else(|| SemError::InvalidArgument(format!("manifest role `{role}` needs a labels file")))?;
        read_labels(self.resolve(l))
    }

    /// Every referenced file, in entry order (matrix then labels).
    pub fn files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::once(&e.path).chain(e.labels.as_ref()))
            .map(|p| self.resolve(p))
            .collect()
    }

    /// `(attribute, class)` pairs of one tag (`bias` or `gendered`) in entry order.
    fn tagged_classes(&self, bias: bool, attribute: Option<&str>) -> Vec<(String, String, &ManifestEntry)> {
        self.entries
            .iter()
            .filter_map(|e| match e.role.parse::<Role>().ok()? {
                Role::Bias { attribute: a, class } if bias => Some((a, class, e)),
                Role::Gendered { attribute: a, class } if !bias => Some((a, class, e)),
                _ => None,
            })
            .filter(|(a, _, _)| attribute.is_none_or(|want| want == a))
            .collect()
    }

    /// Attribute and per-class matrices of the `bias:` roles. With no
    /// attribute given the manifest must mention exactly one.
    pub fn bias_classes(&self, attribute: Option<&str>) -> Result<(String, Vec<(String, EmbeddingMatrix)>)> {
        self.load_tagged(true, "bias", attribute)
    }

    pub fn gendered_classes(&self, attribute: Option<&str>) -> Result<(String, Vec<(String, EmbeddingMatrix)>)> {
        self.load_tagged(false, "gendered", attribute)
    }

    fn load_tagged(&self, bias: bool, tag: &str, attribute: Option<&str>) -> Result<(String, Vec<(String, EmbeddingMatrix)>)> {
        let found = self.tagged_classes(bias, attribute);
        let Some((first, _, _)) = found.first() else {
            return Err(SemError::InvalidArgument(match attribute {
                Some(a) => format!("manifest has no `{tag}:{a}:<class>` role"),
                None => format!("manifest has no `{tag}:<attribute>:<class>` role"),
            }));
        };
        let attr = first.clone();
        if found.iter().any(|(a, _, _)| *a != attr) {
            return Err(SemError::InvalidArgument(format!(
                "manifest mentions several `{tag}:` attributes; pick one with --attribute"
            )));
        }
        let classes = found
            .into_iter()
            .map(|(_, c, e)| Ok((c, read_embedding_matrix(self.resolve(&e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((attr, classes))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{write_embedding_matrix, write_labels, LabelRow};

    #[test]
    fn role_round_trip() {
        for s in ["diverse", "queries", "paraphrases", "images", "classes", "train", "bias:gender:female", "gendered:race:b"] {
            assert_eq!(s.parse::<Role>().unwrap().to_string(), s);
        }
        for bad in ["bias:", "bias:gender", "bias::x", "bias:a:b:c", "image", ""] {
            assert!(bad.parse::<Role>().is_err(), "{bad}");
        }
    }

    fn write_matrix(dir: &Path, name: &str, rows: usize, cols: usize) {
        let m = EmbeddingMatrix::new(rows, cols, vec![0.5; rows * cols]).unwrap();
        write_embedding_matrix(&m, dir.join(name)).unwrap();
    }

    #[test]
    fn load_validates_and_resolves() {
        let dir = tempfile::tempdir().unwrap();
        write_matrix(dir.path(), "div.seme", 4, 3);
        write_matrix(dir.path(), "f.seme", 2, 3);
        write_matrix(dir.path(), "m.seme", 2, 3);
        write_matrix(dir.path(), "para.seme", 2, 3);
        let labels = LabelTable {
            rows: (0..2).map(|i| LabelRow { index: i, label: "0".into(), group: "x".into() }).collect(),
        };
        write_labels(&labels, dir.path().join("para.csv")).unwrap();
        let mut m = Manifest::new(dir.path());
        m.push(Role::Diverse, "div.seme", None);
        m.push("bias:gender:female".parse().unwrap(), "f.seme", None);
        m.push("bias:gender:male".parse().unwrap(), "m.seme", None);
        m.push(Role::Paraphrases, "para.seme", Some("para.csv"));
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();

        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.matrix(&Role::Diverse).unwrap().rows(), 4);
        let (attr, classes) = loaded.bias_classes(None).unwrap();
        assert_eq!(attr, "gender");
        assert_eq!(classes.iter().map(|c| c.0.as_str()).collect::<Vec<_>>(), ["female", "male"]);
        assert_eq!(loaded.labels(&Role::Paraphrases).unwrap().len(), 2);
        let err = loaded.matrix(&Role::Images).unwrap_err().to_string();
        assert!(err.contains("images"), "{err}");
        let err = loaded.gendered_classes(None).unwrap_err().to_string();
        assert!(err.contains("gendered:"), "{err}");
        assert_eq!(loaded.files().len(), 5);
    }

    #[test]
    fn inconsistent_columns_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_matrix(dir.path(), "a.seme", 4, 3);
        write_matrix(dir.path(), "b.seme", 4, 5);
        let mut m = Manifest::new(dir.path());
        m.push(Role::Diverse, "a.seme", None);
        m.push(Role::Images, "b.seme", None);
        assert!(matches!(m.validate(), Err(SemError::Format { .. })));
        let mut m = Manifest::new(dir.path());
        m.push(Role::Diverse, "missing.seme", None);
        assert!(matches!(m.validate(), Err(SemError::Io { .. })));
        let mut m = Manifest::new(dir.path());
        m.push(Role::Diverse, "a.seme", None);
        m.push(Role::Diverse, "a.seme", None);
        assert!(m.validate().is_err());
    }
}

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

use super::image_io::load_image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Four-level self-reported labeller confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfidenceLevel {
    None,
    Low,
    Moderate,
    High,
}

impl ConfidenceLevel {
    pub const ALL: [ConfidenceLevel; 4] = [
        ConfidenceLevel::High,
        ConfidenceLevel::Moderate,
        ConfidenceLevel::Low,
        ConfidenceLevel::None,
    ];

    /// Numeric score: High 1, Moderate 2/3, Low 1/3, None 0.
    pub fn score(self) -> f64 {
        match self {
            ConfidenceLevel::High => 1.0,
            ConfidenceLevel::Moderate => 2.0 / 3.0,
            ConfidenceLevel::Low => 1.0 / 3.0,
            ConfidenceLevel::None => 0.0,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "High" => Ok(ConfidenceLevel::High),
            "Moderate" => Ok(ConfidenceLevel::Moderate),
            "Low" => Ok(ConfidenceLevel::Low),
            "None" => Ok(ConfidenceLevel::None),
            other => Err(Error::InvalidArgument(format!("unknown confidence level {other:?}"))),
        }
    }

    /// Index 0..4 in High, Moderate, Low, None order.
    pub fn index(self) -> usize {
        match self {
            ConfidenceLevel::High => 0,
            ConfidenceLevel::Moderate => 1,
            ConfidenceLevel::Low => 2,
            ConfidenceLevel::None => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub rater_id: String,
    pub label: String,
    pub confidence: ConfidenceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub label: String,
    pub split: Split,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

/// Labelled image records. Paths are relative to `root` (the manifest's
/// directory) unless absolute.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    /// Builds a manifest; class names are the sorted distinct labels.
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let class_names: Vec<String> = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_class_names(root, records, class_names)
    }

    pub fn with_class_names(root: impl Into<PathBuf>, records: Vec<ManifestRecord>, class_names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("duplicate path {:?}", r.path),
                });
            }
            if !class_names.contains(&r.label) {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("label {:?} is not a known class", r.label),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            records,
            class_names,
        })
    }

    /// Parses and validates a JSONL manifest, checking that every referenced
    /// image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })?;
            let full = resolve(&root, &rec.path);
            if !full.exists() {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("image {} does not exist", full.display()),
                });
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Manifest {
                line: 0,
                message: "no records".into(),
            });
        }
        Self::new(root, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    pub fn label_index(&self, record: &ManifestRecord) -> usize {
        self.class_index(&record.label).expect("validated at construction")
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        resolve(&self.root, &record.path)
    }

    pub fn load_record(&self, record: &ManifestRecord) -> Result<LatentTensor> {
        load_image(&self.image_path(record))
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// A copy restricted to records matching `keep`, keeping the class list.
    pub fn filtered(&self, keep: impl Fn(&ManifestRecord) -> bool) -> Self {
        Self {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Keeps exactly `n` records per class within `split`, chosen from
    /// `seed`; records of other splits are untouched.
    pub fn subsample_split(&self, split: Split, n: usize, seed: u64) -> Result<Self> {
        let idx: Vec<usize> = (0..self.records.len()).filter(|&i| self.records[i].split == split).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.label_index(&self.records[i])).collect();
        for (c, name) in self.class_names.iter().enumerate() {
            let support = labels.iter().filter(|&&l| l == c).count();
            if support > 0 && support < n {
                return Err(Error::InsufficientData(format!(
                    "class {name:?} has {support} {split:?} records, fewer than {n}"
                )));
            }
        }
        let keep: HashSet<usize> = super::split::subsample_per_class(&labels, n, seed)?
            .into_iter()
            .map(|j| idx[j])
            .collect();
        Ok(Self {
            root: self.root.clone(),
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, r)| r.split != split || keep.contains(i))
                .map(|(_, r)| r.clone())
                .collect(),
            class_names: self.class_names.clone(),
        })
    }

    /// Stratified k-fold manifests over all records; each record's split is
    /// reassigned to train/val/test per fold.
    pub fn kfold(&self, k: usize, seed: u64) -> Result<Vec<DatasetManifest>> {
        let labels: Vec<usize> = self.records.iter().map(|r| self.label_index(r)).collect();
        let folds = super::split::kfold_split(&labels, k, seed)?;
        Ok(folds
            .into_iter()
            .map(|f| {
                let mut records = self.records.clone();
                for (idx, split) in [(&f.train, Split::Train), (&f.val, Split::Val), (&f.test, Split::Test)] {
                    for &i in idx {
                        records[i].split = split;
                    }
                }
                Self {
                    root: self.root.clone(),
                    records,
                    class_names: self.class_names.clone(),
                }
            })
            .collect())
    }

    /// Loads the images and class indices of one split.
    pub fn load_split(&self, split: Split) -> Result<Vec<(LatentTensor, usize)>> {
        self.split(split)
            .into_iter()
            .map(|r| Ok((self.load_record(r)?, self.label_index(r))))
            .collect()
    }
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::png::load_png;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One input image with an optional reference. Pixels are decoded eagerly.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub input_path: Option<PathBuf>,
    pub reference_path: Option<PathBuf>,
    pub input: Tensor,
    pub reference: Option<Tensor>,
}

impl ImageRecord {
    pub fn in_memory(id: impl Into<String>, input: Tensor, reference: Option<Tensor>) -> Self {
        ImageRecord {
            id: id.into(),
            input_path: None,
            reference_path: None,
            input,
            reference,
        }
    }

    pub fn load(id: impl Into<String>, input_path: &Path, reference_path: Option<&Path>) -> Result<Self> {
        let input = load_png(input_path)?;
        let reference = reference_path.map(load_png).transpose()?;
        if let Some(r) = &reference {
            if r.shape() != input.shape() {
                return Err(Error::Shape(format!(
                    "input {} is {} but reference {} is {}",
                    input_path.display(),
                    input.shape(),
                    reference_path.expect("present").display(),
                    r.shape()
                )));
            }
        }
        Ok(ImageRecord {
            id: id.into(),
            input_path: Some(input_path.to_path_buf()),
            reference_path: reference_path.map(Path::to_path_buf),
            input,
            reference,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

impl Dataset {
    /// Loads `dir/low/*.png` with references from `dir/high/{id}.png` when
    /// present. Without a `low` subdirectory the PNGs of `dir` itself are
    /// inputs without references.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::io(dir, "not a directory"));
        }
        let low = dir.join("low");
        let (input_dir, ref_dir) = if low.is_dir() {
            (low, Some(dir.join("high")))
        } else {
            (dir.to_path_buf(), None)
        };
        let ids = png_ids(&input_dir)?;
        if ids.is_empty() {
            return Err(Error::Config(format!("no PNG images in {}", input_dir.display())));
        }
        let records = ids
            .into_iter()
            .map(|id| {
                let input = input_dir.join(format!("{id}.png"));
                let reference = ref_dir
                    .as_ref()
                    .map(|d| d.join(format!("{id}.png")))
                    .filter(|p| p.is_file());
                ImageRecord::load(id, &input, reference.as_deref())
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

/// Disjoint, nonempty training and validation sets.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
}

impl SplitDataset {
    pub fn new(train: Vec<ImageRecord>, val: Vec<ImageRecord>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "search needs nonempty training and validation sets, got {} and {}",
                train.len(),
                val.len()
            )));
        }
        let ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
        if let Some(r) = val.iter().find(|r| ids.contains(r.id.as_str())) {
            return Err(Error::Config(format!("image {} is in both splits", r.id)));
        }
        Ok(SplitDataset { train, val })
    }

    /// Validation set is the listed ids; everything else trains.
    pub fn from_ids(data: &Dataset, val_ids: &[String]) -> Result<Self> {
        let val: HashSet<&str> = val_ids.iter().map(String::as_str).collect();
        let known: HashSet<&str> = data.records.iter().map(|r| r.id.as_str()).collect();
        if let Some(missing) = val_ids.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::Config(format!("split names unknown image {missing}")));
        }
        let (v, t): (Vec<_>, Vec<_>) = data
            .records
            .iter()
            .cloned()
            .partition(|r| val.contains(r.id.as_str()));
        Self::new(t, v)
    }

    /// Every fourth image (starting at the fourth) validates.
    pub fn interleaved(data: &Dataset) -> Result<Self> {
        let (mut t, mut v) = (Vec::new(), Vec::new());
        for (i, r) in data.records.iter().enumerate() {
            if i % 4 == 3 {
                v.push(r.clone());
            } else {
                t.push(r.clone());
            }
        }
        Self::new(t, v)
    }

    /// Uses `dir/split.txt` when present, otherwise the interleaved split.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let data = Dataset::load_dir(dir)?;
        let split = dir.join("split.txt");
        if split.is_file() {
            Self::from_ids(&data, &read_split(&split)?)
        } else {
            Self::interleaved(&data)
        }
    }
}

/// Newline-separated ids; blank lines and `#` comments are ignored.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

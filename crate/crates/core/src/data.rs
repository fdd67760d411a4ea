//! Batch datasets: a directory of tensor JSON files plus `manifest.json`.
//!
//! The manifest is either a JSON array of file names or an object
//! `{"files": [...], "labels": [[...], ...]}` with one label list per file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn unlabeled(input: Tensor) -> Self {
        Self { input, labels: None }
    }

    pub fn labeled(input: Tensor, labels: Vec<usize>) -> Self {
        Self {
            input,
            labels: Some(labels),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub batches: Vec<Batch>,
}

impl Dataset {
    pub fn new(batches: Vec<Batch>) -> Self {
        Self { batches }
    }

    pub fn from_inputs(inputs: Vec<Tensor>) -> Self {
        Self::new(inputs.into_iter().map(Batch::unlabeled).collect())
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Tensor> {
        self.batches.iter().map(|b| &b.input)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Manifest {
    Files(Vec<String>),
    Full {
        files: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<Vec<Vec<usize>>>,
    },
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
        path: manifest_path.display().to_string(),
        message: e.to_string(),
    })?;
    let (files, labels) = match manifest {
        Manifest::Files(f) => (f, None),
        Manifest::Full { files, labels } => (files, labels),
    };
    if let Some(l) = &labels {
        if l.len() != files.len() {
            return Err(Error::Schema {
                path: format!("{}: labels", manifest_path.display()),
                message: format!("{} label lists for {} files", l.len(), files.len()),
            });
        }
    }
    let mut batches = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let input = Tensor::load(dir.join(f))?;
        let labels = labels.as_ref().map(|l| l[i].clone());
        if let Some(l) = &labels {
            if input.rank() == 0 || l.len() != input.shape()[0] {
                return Err(Error::Schema {
                    path: format!("{}: labels[{i}]", manifest_path.display()),
                    message: format!("{} labels for batch shape {:?}", l.len(), input.shape()),
                });
            }
        }
        batches.push(Batch { input, labels });
    }
    Ok(Dataset { batches })
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.len());
    for (i, b) in ds.batches.iter().enumerate() {
        let name = format!("batch{i:04}.json");
        b.input.save(dir.join(&name))?;
        files.push(name);
    }
    let labels: Option<Vec<Vec<usize>>> = ds.batches.iter().map(|b| b.labels.clone()).collect();
    let manifest = Manifest::Full { files, labels };
    let path = dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

//! Dataset directories: one subdirectory of tensor files per label plus a
//! `manifest.tsv` with `<relative-path>\t<label-name>` records. Label ids
//! follow first appearance in the manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path};

use tlrate_core::data::{Example, LabeledDataset};

use crate::error::{io_at, Error, Result};
use crate::tensor_io::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.tsv";

fn dir_name(label: &str, id: usize) -> String {
    let clean: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{id:04}-{clean}")
}

pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    for name in &ds.label_names {
        if name.contains(['\t', '\n', '\r']) || name.is_empty() {
            return Err(Error::Format {
                what: "label name",
                reason: format!("{name:?} cannot be written to a manifest"),
            });
        }
    }
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| ds.examples[i].label);
    let mut manifest = String::new();
    let mut next = vec![0usize; ds.num_labels()];
    for i in order {
        let e = &ds.examples[i];
        let sub = dir_name(&ds.label_names[e.label], e.label);
        let sub_path = dir.join(&sub);
        if next[e.label] == 0 {
            fs::create_dir_all(&sub_path).map_err(io_at(&sub_path))?;
        }
        let file = format!("{:06}.ftt", next[e.label]);
        next[e.label] += 1;
        write_tensor(&sub_path.join(&file), &e.features)?;
        manifest.push_str(&format!("{sub}/{file}\t{}\n", ds.label_names[e.label]));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(io_at(&path))
}

/// Loads `dir`; the domain is named after the directory.
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_at(&path))?;
    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut examples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::Manifest {
            path: path.clone(),
            line: n + 1,
            reason: reason.into(),
        };
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `<path>\\t<label>`"))?;
        let rel = Path::new(rel);
        if label.is_empty() || rel.as_os_str().is_empty() {
            return Err(bad("empty path or label"));
        }
        if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(bad("path must be relative to the dataset directory"));
        }
        let id = *ids.entry(label.to_owned()).or_insert_with(|| {
            names.push(label.to_owned());
            names.len() - 1
        });
        examples.push(Example {
            features: read_tensor(&dir.join(rel))?,
            label: id,
        });
    }
    let domain = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if examples.is_empty() {
        return Err(tlrate_core::Error::EmptyDataset.into());
    }
    Ok(LabeledDataset::new(domain, names, examples)?)
}

//! Directory ingestion for the VOC-style layout described in
//! [`crate::data::synth::generate_synthetic`]: image folder, split lists,
//! image-level label file, class list, and optional dense masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{DatasetManifest, ManifestEntry, Split};
use crate::error::{PccError, Result};

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| PccError::format(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Build a manifest for one split of a dataset rooted at `root`.
///
/// Expected layout:
/// ```text
/// root/JPEGImages/{id}.png
/// root/SegmentationClass/{id}.png    optional for train, required for val
/// root/ImageSets/Segmentation/{split}.txt
/// root/image_labels.txt              "{id} name1,name2" per line
/// root/classes.txt                   foreground class names, one per line
/// ```
///
/// The returned manifest's `classes` are the foreground names; class 0
/// (background) is implicit. Masks index classes as 1 + position in
/// `classes.txt`.
pub fn ingest_voc_style(root: &Path, split: Split) -> Result<DatasetManifest> {
    let classes = read_lines(&root.join("classes.txt"))?;
    if classes.is_empty() {
        return Err(PccError::format(format!(
            "{}: no classes listed",
            root.join("classes.txt").display()
        )));
    }

    let mut labels_by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let labels_path = root.join("image_labels.txt");
    for line in read_lines(&labels_path)? {
        let (id, rest) = line.split_once(char::is_whitespace).unwrap_or((line.as_str(), ""));
        let mut labels = Vec::new();
        for raw in rest.split(',') {
            let name = raw.trim();
            if name.is_empty() {
                continue;
            }
            if !classes.iter().any(|c| c == name) {
                return Err(PccError::format(format!(
                    "{}: unknown class name {:?} for image {id}",
                    labels_path.display(),
                    name
                )));
            }
            if !labels.contains(&name.to_string()) {
                labels.push(name.to_string());
            }
        }
        labels_by_id.entry(id.to_string()).or_default().extend(labels);
    }

    let list_path = root.join(format!("ImageSets/Segmentation/{split}.txt"));
    let ids = read_lines(&list_path)?;

    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = root.join(format!("JPEGImages/{id}.png"));
        if !image_path.is_file() {
            return Err(PccError::format(format!(
                "{}: listed in {} but missing",
                image_path.display(),
                list_path.display()
            )));
        }
        // Training images must appear in the label file even when their
        // label set is empty (a background-only scene); a missing line is
        // indistinguishable from a typo'd id, so it stays an error.
        let labels = match labels_by_id.get(&id) {
            Some(labels) => labels.clone(),
            None if split == Split::Train => {
                return Err(PccError::format(format!(
                    "{}: no image-level label line for training image {id}",
                    labels_path.display()
                )));
            }
            None => Vec::new(),
        };
        let mask_path = root.join(format!("SegmentationClass/{id}.png"));
        let mask_path = if mask_path.is_file() {
            Some(mask_path)
        } else if split == Split::Val {
            return Err(PccError::format(format!(
                "{}: val split requires a ground-truth mask",
                mask_path.display()
            )));
        } else {
            None
        };
        entries.push(ManifestEntry { id, image_path, labels, mask_path });
    }

    Ok(DatasetManifest::new(split, entries, classes))
}

//! Image samples, dataset manifests, synthetic data, and directory ingestion.

pub mod synth;
pub mod voc;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{PccError, Result};

/// One image, normalized and ready for the encoder.
///
/// Pixels are row-major, RGB-interleaved, values in [0, 1]:
/// `pixels[(y * w + x) * 3 + c]`.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub identifier: String,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Image-level category names (training supervision). Empty when the
    /// split carries no labels.
    pub labels: Vec<String>,
}

impl ImageSample {
    pub fn new(
        identifier: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        labels: Vec<String>,
    ) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(PccError::shape(format!(
                "pixel buffer holds {} values, expected {}x{}x3 = {}",
                pixels.len(),
                width,
                height,
                width * height * 3
            )));
        }
        Ok(ImageSample {
            identifier: identifier.into(),
            width,
            height,
            pixels,
            labels,
        })
    }

    pub fn pixel(&self, y: usize, x: usize, channel: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + channel]
    }
}

/// Which part of the dataset an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = PccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(PccError::config(format!("unknown split: {other}"))),
        }
    }
}

/// One dataset entry: where the image lives, its image-level labels, and —
/// for evaluation only — where its dense ground-truth mask lives.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Vec<String>,
    pub mask_path: Option<PathBuf>,
}

/// A resolved dataset split.
///
/// Dense masks are evaluation-only signal. Every mask read goes through
/// [`DatasetManifest::load_mask`], which counts accesses; the training loop
/// asserts the counter stays at zero (and uses [`DatasetManifest::for_training`],
/// which drops mask paths entirely).
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
    mask_reads: Arc<AtomicU64>,
}

impl DatasetManifest {
    pub fn new(split: Split, entries: Vec<ManifestEntry>, classes: Vec<String>) -> Self {
        DatasetManifest {
            split,
            entries,
            classes,
            mask_reads: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mask reads observed through this manifest (shared across clones).
    pub fn mask_reads(&self) -> u64 {
        self.mask_reads.load(Ordering::SeqCst)
    }

    /// View with every mask path stripped, for handing to the training loop.
    /// The counter stays shared so an audit can still observe any read.
    pub fn for_training(&self) -> DatasetManifest {
        DatasetManifest {
            split: self.split,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry { mask_path: None, ..e.clone() })
                .collect(),
            classes: self.classes.clone(),
            mask_reads: Arc::clone(&self.mask_reads),
        }
    }

    /// Load one entry's image.
    pub fn load_image(&self, entry: &ManifestEntry) -> Result<ImageSample> {
        let (width, height, rgb) = crate::pseudo::read_rgb_png(&entry.image_path)?;
        let pixels = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageSample::new(entry.id.clone(), width, height, pixels, entry.labels.clone())
    }

    /// Load one entry's ground-truth mask (class index per pixel). Counts
    /// the access for the supervision audit.
    pub fn load_mask(&self, entry: &ManifestEntry) -> Result<Vec<Vec<u8>>> {
        let path = entry.mask_path.as_ref().ok_or_else(|| {
            PccError::config(format!("entry {} carries no ground-truth mask", entry.id))
        })?;
        self.mask_reads.fetch_add(1, Ordering::SeqCst);
        let map = crate::pseudo::read_mask_png(path)?;
        Ok(map)
    }
}

//! COCO-format annotation loading, box-convention conversion, and seeded
//! drawing of the evaluation subset.
//!
//! The subset is stratified over the standard COCO object size buckets and
//! persisted as a manifest so every sweep configuration scores the exact
//! same (image, annotation) pairs.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::BBox;
use crate::raster::{ImageBuffer, RasterError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid COCO annotation JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(u64),
    #[error("duplicate annotation id {0}")]
    DuplicateAnnotation(u64),
    #[error("duplicate category id {0}")]
    DuplicateCategory(u64),
    #[error("image {0} has zero width or height")]
    BadImageDims(u64),
    #[error("annotation {annotation_id} references unknown image {image_id}")]
    DanglingImage { annotation_id: u64, image_id: u64 },
    #[error("annotation {annotation_id} references unknown category {category_id}")]
    DanglingCategory {
        annotation_id: u64,
        category_id: u64,
    },
    #[error("box has non-positive width or height ({w} x {h})")]
    NonPositiveBox { w: f64, h: f64 },
    #[error("requested {requested} images but only {available} have annotations")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("unknown image id {0}")]
    UnknownImage(u64),
    #[error("image {image_id}: index says {expected:?} but file decodes to {actual:?}")]
    DimensionMismatch {
        image_id: u64,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("manifest {path} line {line}: {reason}")]
    BadManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("manifest entry ({image_id}, {annotation_id}) not present in the dataset index")]
    ForeignEntry { image_id: u64, annotation_id: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// COCO convention: (x, y, w, h) with the origin at the top-left corner.
    pub bbox: [f64; 4],
    pub area: f64,
}

/// COCO object size buckets by annotation area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn of_area(area: f64) -> SizeBucket {
        if area < 32.0 * 32.0 {
            SizeBucket::Small
        } else if area > 96.0 * 96.0 {
            SizeBucket::Large
        } else {
            SizeBucket::Medium
        }
    }
}

// raw serde mirrors of the COCO instances schema; extra keys are ignored
#[derive(Deserialize)]
struct RawCoco {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

/// Cross-referenced, immutable view of one COCO annotation file.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    images: BTreeMap<u64, ImageInfo>,
    annotations: BTreeMap<u64, Annotation>,
    categories: BTreeMap<u64, String>,
    by_image: BTreeMap<u64, Vec<u64>>,
    dropped: usize,
    source_hash: String,
}

impl DatasetIndex {
    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.get(&id)
    }

    pub fn annotation(&self, id: u64) -> Option<&Annotation> {
        self.annotations.get(&id)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.get(&id).map(String::as_str)
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.len()
    }

    /// Annotations dropped at load time for non-positive width or height.
    pub fn dropped_invalid(&self) -> usize {
        self.dropped
    }

    /// Hex sha-256 of the annotation file bytes; pins manifests and run
    /// records to the exact dataset revision they were drawn from.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Annotation ids for one image, ascending. Empty for unknown images.
    pub fn annotations_of(&self, image_id: u64) -> &[u64] {
        self.by_image
            .get(&image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Image ids with at least one valid annotation, ascending.
    pub fn eligible_images(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_image
            .iter()
            .filter(|(_, anns)| !anns.is_empty())
            .map(|(&id, _)| id)
    }

    /// Size bucket of an image, taken as the bucket of its lower-median
    /// annotation area.
    pub fn image_bucket(&self, image_id: u64) -> Option<SizeBucket> {
        let anns = self.by_image.get(&image_id)?;
        if anns.is_empty() {
            return None;
        }
        let mut areas: Vec<f64> = anns
            .iter()
            .map(|id| self.annotations[id].area)
            .collect();
        areas.sort_by(|a, b| a.total_cmp(b));
        Some(SizeBucket::of_area(areas[(areas.len() - 1) / 2]))
    }
}

pub fn load_annotations(path: &Path) -> Result<DatasetIndex, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let source_hash = hex::encode(Sha256::digest(&bytes));
    let raw: RawCoco = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })?;

    let mut images = BTreeMap::new();
    let mut by_image = BTreeMap::new();
    for img in raw.images {
        if img.width == 0 || img.height == 0 {
            return Err(DatasetError::BadImageDims(img.id));
        }
        let id = img.id;
        let prev = images.insert(
            id,
            ImageInfo {
                id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
            },
        );
        if prev.is_some() {
            return Err(DatasetError::DuplicateImage(id));
        }
        by_image.insert(id, Vec::new());
    }

    let mut categories = BTreeMap::new();
    for cat in raw.categories {
        if categories.insert(cat.id, cat.name).is_some() {
            return Err(DatasetError::DuplicateCategory(cat.id));
        }
    }

    let mut annotations = BTreeMap::new();
    let mut dropped = 0usize;
    for ann in raw.annotations {
        if !images.contains_key(&ann.image_id) {
            return Err(DatasetError::DanglingImage {
                annotation_id: ann.id,
                image_id: ann.image_id,
            });
        }
        if !categories.contains_key(&ann.category_id) {
            return Err(DatasetError::DanglingCategory {
                annotation_id: ann.id,
                category_id: ann.category_id,
            });
        }
        let [_, _, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) {
            dropped += 1;
            continue;
        }
        let id = ann.id;
        let prev = annotations.insert(
            id,
            Annotation {
                id,
                image_id: ann.image_id,
                category_id: ann.category_id,
                bbox: ann.bbox,
                area: ann.area.unwrap_or(w * h),
            },
        );
        if prev.is_some() {
            return Err(DatasetError::DuplicateAnnotation(id));
        }
        by_image.get_mut(&ann.image_id).unwrap().push(id);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} annotations with non-positive box dimensions");
    }

    Ok(DatasetIndex {
        images,
        annotations,
        categories,
        by_image,
        dropped,
        source_hash,
    })
}

/// COCO (x, y, w, h) to corner form (x, y, x+w, y+h).
pub fn coco_to_corners(bbox: [f64; 4]) -> Result<BBox, DatasetError> {
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(DatasetError::NonPositiveBox { w, h });
    }
    BBox::new(x, y, x + w, y + h).map_err(|_| DatasetError::NonPositiveBox { w, h })
}

pub fn corners_to_coco(bbox: &BBox) -> [f64; 4] {
    [bbox.x1(), bbox.y1(), bbox.width(), bbox.height()]
}

/// Frozen draw of evaluation targets: every annotation of each sampled
/// image, keyed back to the dataset by its source hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSubset {
    seed: u64,
    source_hash: String,
    entries: Vec<(u64, u64)>,
    counts: BTreeMap<u64, usize>,
}

impl EvalSubset {
    fn from_entries(seed: u64, source_hash: String, mut entries: Vec<(u64, u64)>) -> Self {
        entries.sort_unstable();
        entries.dedup();
        let mut counts = BTreeMap::new();
        for &(image_id, _) in &entries {
            *counts.entry(image_id).or_insert(0usize) += 1;
        }
        Self {
            seed,
            source_hash,
            entries,
            counts,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// (image_id, annotation_id) pairs in ascending order.
    pub fn entries(&self) -> &[(u64, u64)] {
        &self.entries
    }

    pub fn image_count(&self) -> usize {
        self.counts.len()
    }

    pub fn object_counts(&self) -> &BTreeMap<u64, usize> {
        &self.counts
    }

    /// Diagnostic reported alongside runs; COCO-val-scale samples land near
    /// the mid single digits.
    pub fn mean_objects_per_image(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.entries.len() as f64 / self.counts.len() as f64
    }

    /// Checks referential integrity against the index the subset claims to
    /// have been drawn from.
    pub fn validate_against(&self, index: &DatasetIndex) -> Result<(), DatasetError> {
        for &(image_id, annotation_id) in &self.entries {
            let ok = index.image(image_id).is_some()
                && index
                    .annotation(annotation_id)
                    .is_some_and(|a| a.image_id == image_id);
            if !ok {
                return Err(DatasetError::ForeignEntry {
                    image_id,
                    annotation_id,
                });
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header {
        seed: u64,
        source_hash: String,
        n_images: usize,
        n_entries: usize,
    },
    Entry {
        image_id: u64,
        annotation_id: u64,
    },
}

/// Draws `n` images stratified across size buckets proportionally to their
/// prevalence (largest-remainder rounding), uniformly within each bucket,
/// then enumerates every annotation of the selected images.
///
/// Deterministic for a given (index, n, seed): one ChaCha8 stream is
/// consumed in fixed bucket order.
pub fn sample_subset(
    index: &DatasetIndex,
    n: usize,
    seed: u64,
) -> Result<EvalSubset, DatasetError> {
    let mut buckets: BTreeMap<SizeBucket, Vec<u64>> = BTreeMap::new();
    for image_id in index.eligible_images() {
        let bucket = index.image_bucket(image_id).unwrap();
        buckets.entry(bucket).or_default().push(image_id);
    }
    let available: usize = buckets.values().map(Vec::len).sum();
    if n > available {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            available,
        });
    }

    // proportional quotas with largest-remainder rounding, capped at bucket
    // size with overflow spilled to the emptiest-quota buckets
    let mut quotas: BTreeMap<SizeBucket, usize> = BTreeMap::new();
    let mut remainders: Vec<(SizeBucket, u128)> = Vec::new();
    let mut assigned = 0usize;
    for bucket in SizeBucket::ALL {
        let count = buckets.get(&bucket).map_or(0, Vec::len);
        let exact = n as u128 * count as u128;
        let quota = (exact / available as u128) as usize;
        quotas.insert(bucket, quota);
        remainders.push((bucket, exact % available as u128));
        assigned += quota;
    }
    remainders.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut leftover = n - assigned;
    for (bucket, _) in remainders.iter().cycle() {
        if leftover == 0 {
            break;
        }
        let cap = buckets.get(bucket).map_or(0, Vec::len);
        let q = quotas.get_mut(bucket).unwrap();
        if *q < cap {
            *q += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<u64> = Vec::with_capacity(n);
    for bucket in SizeBucket::ALL {
        let pool = match buckets.get(&bucket) {
            Some(pool) => pool,
            None => continue,
        };
        let quota = quotas[&bucket];
        let picks = rand::seq::index::sample(&mut rng, pool.len(), quota);
        selected.extend(picks.iter().map(|i| pool[i]));
    }

    let mut entries = Vec::new();
    for image_id in selected {
        for &annotation_id in index.annotations_of(image_id) {
            entries.push((image_id, annotation_id));
        }
    }
    Ok(EvalSubset::from_entries(
        seed,
        index.source_hash().to_owned(),
        entries,
    ))
}

/// Writes the subset as line-delimited JSON: a header record carrying the
/// seed and source hash, then one record per (image, annotation) entry.
pub fn write_manifest(subset: &EvalSubset, path: &Path) -> Result<(), DatasetError> {
    let wrap = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(wrap)?);
    let header = ManifestLine::Header {
        seed: subset.seed,
        source_hash: subset.source_hash.clone(),
        n_images: subset.image_count(),
        n_entries: subset.entries.len(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).unwrap()).map_err(wrap)?;
    for &(image_id, annotation_id) in &subset.entries {
        let line = ManifestLine::Entry {
            image_id,
            annotation_id,
        };
        writeln!(out, "{}", serde_json::to_string(&line).unwrap()).map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

pub fn read_manifest(path: &Path) -> Result<EvalSubset, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, reason: String| DatasetError::BadManifest {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut header = None;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestLine =
            serde_json::from_str(&line).map_err(|e| bad(idx + 1, e.to_string()))?;
        match record {
            ManifestLine::Header { .. } if idx != 0 => {
                return Err(bad(idx + 1, "header after first line".into()));
            }
            ManifestLine::Header {
                seed,
                source_hash,
                n_images,
                n_entries,
            } => header = Some((seed, source_hash, n_images, n_entries)),
            ManifestLine::Entry { .. } if header.is_none() => {
                return Err(bad(idx + 1, "entry before header".into()));
            }
            ManifestLine::Entry {
                image_id,
                annotation_id,
            } => entries.push((image_id, annotation_id)),
        }
    }
    let (seed, source_hash, n_images, n_entries) =
        header.ok_or_else(|| bad(0, "missing header".into()))?;
    let subset = EvalSubset::from_entries(seed, source_hash, entries);
    if subset.entries.len() != n_entries || subset.image_count() != n_images {
        return Err(bad(
            1,
            format!(
                "header says {n_images} images / {n_entries} entries, found {} / {}",
                subset.image_count(),
                subset.entries.len()
            ),
        ));
    }
    Ok(subset)
}

/// Decodes an indexed image and verifies it matches the recorded dimensions.
pub fn resolve_image(
    index: &DatasetIndex,
    image_id: u64,
    image_root: &Path,
) -> Result<ImageBuffer, DatasetError> {
    let info = index
        .image(image_id)
        .ok_or(DatasetError::UnknownImage(image_id))?;
    let image = ImageBuffer::load(&image_root.join(&info.file_name))?;
    if (image.width(), image.height()) != (info.width, info.height) {
        return Err(DatasetError::DimensionMismatch {
            image_id,
            expected: (info.width, info.height),
            actual: (image.width(), image.height()),
        });
    }
    Ok(image)
}

//! Synthetic detection-style dataset fixture shared by integration tests.
//!
//! Twelve images with deterministic pixel content and two boxed objects
//! each, spread evenly across the small / medium / large object strata so
//! stratified sampling has something to stratify.

use std::path::{Path, PathBuf};

use gridprobe_core::raster::ImageBuffer;
use tempfile::TempDir;

pub struct Fixture {
    _dir: TempDir,
    pub annotations: PathBuf,
    pub image_root: PathBuf,
}

fn pattern(id: u64, x: u32, y: u32) -> [u8; 3] {
    let (id, x, y) = (id as u32, x, y);
    [
        ((x * 7 + y * 3 + id * 13) % 256) as u8,
        ((x * 5 + y * 11 + id * 7) % 256) as u8,
        ((x * 13 + y * 17 + id * 29) % 251) as u8,
    ]
}

pub fn patterned_image(id: u64, width: u32, height: u32) -> ImageBuffer {
    let mut image = ImageBuffer::filled(width, height, [0, 0, 0]).unwrap();
    for y in 0..height {
        for x in 0..width {
            image.set_pixel(x, y, pattern(id, x, y));
        }
    }
    image
}

/// Builds the fixture on disk: `images/img_NNNN.png` plus an annotation
/// file in COCO instances layout.
pub fn build() -> Fixture {
    let dir = TempDir::new().unwrap();
    let image_root = dir.path().join("images");
    std::fs::create_dir(&image_root).unwrap();

    // (width, height) cycled per image; every box below fits in 200x200
    let dims = [(200u32, 200u32), (224, 208), (208, 224), (240, 200)];
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for id in 1u64..=12 {
        let (width, height) = dims[(id as usize - 1) % dims.len()];
        let file_name = format!("img_{id:04}.png");
        patterned_image(id, width, height)
            .save_png(&image_root.join(&file_name))
            .unwrap();
        images.push(serde_json::json!({
            "id": id, "width": width, "height": height, "file_name": file_name,
        }));

        // stratum is set by the smaller box: images 1-4 small, 5-8 medium,
        // 9-12 large
        let boxes: [[f64; 4]; 2] = match (id - 1) / 4 {
            0 => [[10.0, 10.0, 20.0, 20.0], [80.0, 80.0, 60.0, 60.0]],
            1 => [[20.0, 20.0, 60.0, 60.0], [90.0, 60.0, 100.0, 100.0]],
            _ => [[50.0, 50.0, 100.0, 100.0], [70.0, 70.0, 110.0, 110.0]],
        };
        for (slot, bbox) in boxes.iter().enumerate() {
            let ann_id = (id - 1) * 2 + slot as u64 + 1;
            let category_id = 1 + (ann_id % 3);
            annotations.push(serde_json::json!({
                "id": ann_id, "image_id": id, "category_id": category_id,
                "bbox": bbox, "area": bbox[2] * bbox[3],
            }));
        }
    }

    let doc = serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": 1, "name": "person"},
            {"id": 2, "name": "dog"},
            {"id": 3, "name": "car"},
        ],
    });
    let annotations_path = dir.path().join("instances.json");
    std::fs::write(&annotations_path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();

    Fixture {
        _dir: dir,
        annotations: annotations_path,
        image_root,
    }
}

impl Fixture {
    pub fn image_root(&self) -> &Path {
        &self.image_root
    }
}

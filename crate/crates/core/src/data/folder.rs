use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Normalization};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let ingest = |e: std::io::Error| Error::Ingestion { path: dir.to_path_buf(), reason: e.to_string() };
    let mut entries = std::fs::read_dir(dir)
        .map_err(ingest)?
        .map(|e| e.map(|e| e.path()).map_err(ingest))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect())
}

/// Decodes every image under `root/<class>/`, resized to `side` x `side`
/// RGB, appending planar bytes and labels.
fn read_tree(root: &Path, classes: &[String], side: usize, images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            continue;
        }
        for path in sorted_entries(&dir)? {
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let img = image::open(&path)
                .map_err(|e| Error::Ingestion { path: path.clone(), reason: e.to_string() })?
                .to_rgb8();
            let img = if img.width() as usize == side && img.height() as usize == side {
                img
            } else {
                image::imageops::resize(&img, side as u32, side as u32, FilterType::Triangle)
            };
            let plane = side * side;
            let start = images.len();
            images.resize(start + 3 * plane, 0);
            for (i, px) in img.pixels().enumerate() {
                for c in 0..3 {
                    images[start + c * plane + i] = px[c];
                }
            }
            labels.push(label);
        }
    }
    Ok(())
}

/// Loads `root/{train,test}/<class>/*` when a `train` directory exists,
/// otherwise `root/<class>/*` with a seeded 80/20 train/test partition.
pub(super) fn load_folder(root: &Path, side: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if side == 0 {
        return Err(Error::invalid("image side must be positive"));
    }
    let split_root = root.join("train");
    let class_root = if split_root.is_dir() { split_root.clone() } else { root.to_path_buf() };
    let classes: Vec<String> = class_dirs(&class_root)?
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .filter(|n| !(class_root == root && (n == "test" || n == "val")))
        .collect();
    if classes.is_empty() {
        return Err(Error::Ingestion { path: class_root, reason: "no class directories".into() });
    }
    let n = classes.len();
    let build = |images, labels| Dataset::from_raw(n, side, classes.clone(), Normalization::UNIT, images, labels);

    if split_root.is_dir() {
        let (mut ti, mut tl) = (Vec::new(), Vec::new());
        read_tree(&split_root, &classes, side, &mut ti, &mut tl)?;
        let test_root = [root.join("test"), root.join("val")].into_iter().find(|p| p.is_dir());
        let (mut si, mut sl) = (Vec::new(), Vec::new());
        if let Some(test_root) = test_root {
            read_tree(&test_root, &classes, side, &mut si, &mut sl)?;
        }
        if tl.is_empty() {
            return Err(Error::Ingestion { path: root.to_path_buf(), reason: "no images found".into() });
        }
        return Ok((build(ti, tl)?, build(si, sl)?));
    }

    let (mut images, mut labels) = (Vec::new(), Vec::new());
    read_tree(root, &classes, side, &mut images, &mut labels)?;
    if labels.is_empty() {
        return Err(Error::Ingestion { path: root.to_path_buf(), reason: "no images found".into() });
    }
    let all = build(images, labels)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f01d));
    let cut = all.len() - all.len() / 5;
    Ok((all.subset(&order[..cut]), all.subset(&order[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, value: u8) {
        let img = image::RgbImage::from_pixel(5, 5, image::Rgb([value, value / 2, 255 - value]));
        img.save(path).unwrap();
    }

    #[test]
    fn classes_come_from_directory_names() {
        let dir = tempfile::tempdir().unwrap();
        for (class, count) in [("zebra", 3), ("apple", 2)] {
            let d = dir.path().join(class);
            std::fs::create_dir(&d).unwrap();
            for i in 0..count {
                write_png(&d.join(format!("{i}.png")), 40 * i as u8);
            }
        }
        std::fs::write(dir.path().join("apple/notes.txt"), "ignored").unwrap();
        let (train, test) = load_folder(dir.path(), 4, 1).unwrap();
        assert_eq!(train.class_names, vec!["apple".to_string(), "zebra".to_string()]);
        assert_eq!(train.len() + test.len(), 5);
        assert_eq!(train.side, 4);
    }

    #[test]
    fn corrupt_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("cls");
        std::fs::create_dir(&d).unwrap();
        std::fs::write(d.join("broken.png"), b"not a png").unwrap();
        let err = load_folder(dir.path(), 8, 0).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use super::{imageops, DatasetManifest, Label, SampleRef, Source, Split};
use crate::error::{Error, Result};

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Layout(p.to_path_buf()))
    }
}

/// Sorted image files of a directory.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut out: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Index an MVTec-AD style tree:
///
/// ```text
/// <root>/<category>/train/good/*.png
/// <root>/<category>/test/<defect_type>/*.png
/// <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
/// ```
///
/// Pixels are not decoded here; mask pairing is checked eagerly.
pub fn load_mvtec_layout(root: &Path, categories: &[String], seed: u64) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        samples: Vec::new(),
        categories: categories.to_vec(),
        seed,
    };
    if categories.is_empty() {
        return Ok(manifest);
    }
    require_dir(root)?;
    for cat in categories {
        let cat_dir = root.join(cat);
        require_dir(&cat_dir)?;
        let train_dir = cat_dir.join("train").join("good");
        require_dir(&train_dir)?;
        for img in list_images(&train_dir)? {
            manifest.samples.push(SampleRef {
                id: format!("{cat}/train/good/{}", stem(&img)),
                category: cat.clone(),
                split: Split::Train,
                label: Label::Normal,
                defect_type: "good".into(),
                source: Source::File {
                    image: img,
                    mask: None,
                },
            });
        }
        let test_dir = cat_dir.join("test");
        require_dir(&test_dir)?;
        for defect in sorted_subdirs(&test_dir)? {
            let normal = defect == "good";
            let gt_dir = cat_dir.join("ground_truth").join(&defect);
            if !normal {
                require_dir(&gt_dir)?;
            }
            for img in list_images(&test_dir.join(&defect))? {
                let mask = if normal {
                    None
                } else {
                    let m = gt_dir.join(format!("{}_mask.png", stem(&img)));
                    if !m.is_file() {
                        return Err(Error::MaskPairing(img));
                    }
                    Some(m)
                };
                manifest.samples.push(SampleRef {
                    id: format!("{cat}/test/{defect}/{}", stem(&img)),
                    category: cat.clone(),
                    split: Split::Test,
                    label: if normal { Label::Normal } else { Label::Anomalous },
                    defect_type: defect.clone(),
                    source: Source::File { image: img, mask },
                });
            }
        }
    }
    Ok(manifest)
}

/// Write every sample of `manifest` to disk in the MVTec layout.
pub fn materialize_mvtec_layout(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    for s in &manifest.samples {
        let sample = s.load()?;
        let name = s.id.rsplit('/').next().unwrap_or(&s.id).to_string();
        let cat_dir = root.join(&s.category);
        let img_dir = match s.split {
            Split::Train => cat_dir.join("train").join("good"),
            Split::Test => cat_dir.join("test").join(&s.defect_type),
        };
        fs::create_dir_all(&img_dir)?;
        imageops::write_rgb(&img_dir.join(format!("{name}.png")), sample.pixels.view())?;
        if let Some(mask) = &sample.gt_mask {
            let gt_dir = cat_dir.join("ground_truth").join(&s.defect_type);
            fs::create_dir_all(&gt_dir)?;
            imageops::write_mask(&gt_dir.join(format!("{name}_mask.png")), mask.view())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn write_img(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        imageops::write_rgb(p, Array3::from_elem((8, 8, 3), 0.5).view()).unwrap();
    }

    fn write_m(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        let mut m = Array2::from_elem((8, 8), false);
        m[[2, 3]] = true;
        imageops::write_mask(p, m.view()).unwrap();
    }

    fn build_tree(root: &Path, with_masks: bool) {
        for i in 0..5 {
            write_img(&root.join(format!("bottle/train/good/{i:03}.png")));
        }
        for i in 0..2 {
            write_img(&root.join(format!("bottle/test/good/{i:03}.png")));
        }
        for i in 0..3 {
            write_img(&root.join(format!("bottle/test/crack/{i:03}.png")));
            if with_masks {
                write_m(&root.join(format!("bottle/ground_truth/crack/{i:03}_mask.png")));
            }
        }
    }

    #[test]
    fn counts_one_category() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), true);
        let m = load_mvtec_layout(dir.path(), &["bottle".into()], 0).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.mask_count(), 3);
        let c = m.counts()["bottle"];
        assert_eq!((c.train, c.test_normal, c.test_anomalous), (5, 2, 3));
        for s in &m.samples {
            s.load().unwrap();
        }
    }

    #[test]
    fn empty_category_list_is_empty_manifest() {
        let m = load_mvtec_layout(Path::new("/definitely/not/here"), &[], 0).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn missing_directory_names_path() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), true);
        let err = load_mvtec_layout(dir.path(), &["cable".into()], 0).unwrap_err();
        match err {
            Error::Layout(p) => assert!(p.ends_with("cable")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_mask_is_pairing_error() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), true);
        fs::remove_file(dir.path().join("bottle/ground_truth/crack/001_mask.png")).unwrap();
        let err = load_mvtec_layout(dir.path(), &["bottle".into()], 0).unwrap_err();
        assert!(matches!(err, Error::MaskPairing(p) if p.ends_with("001.png")));
    }
}

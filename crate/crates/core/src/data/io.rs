//! PNG dataset layout: `<dir>/images/<stem>.png` with `<dir>/labels/<stem>.png`.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Rgb};

use super::{DomainSample, DomainSet, Image, LabelMap, Role, IGNORE_ID};
use crate::error::{Error, Result};

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

fn read_label(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let gray = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let ids = gray.into_raw();
    if let Some(&bad) = ids.iter().find(|&&id| id != IGNORE_ID && id as usize >= num_classes) {
        return Err(Error::Data(format!(
            "{}: label id {bad} outside 0..{num_classes} and not {IGNORE_ID}",
            path.display()
        )));
    }
    LabelMap::new(h, w, ids)
}

/// Loads one domain split. Samples are ordered by image filename; a source
/// domain needs a label for every image, a target domain needs at least
/// `n_labelled` labels.
pub fn load_domain(dir: &Path, role: Role, n_labelled: usize, num_classes: usize) -> Result<DomainSet> {
    let name = dir
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| dir.file_name())
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let label_dir = dir.join("labels");
    let mut samples = Vec::new();
    for path in png_files(&dir.join("images"))? {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let label_path = label_dir.join(format!("{stem}.png"));
        let label = if label_path.is_file() {
            Some(read_label(&label_path, num_classes)?)
        } else if role == Role::Source {
            return Err(Error::Data(format!(
                "source domain {name}: {} has no label at {}",
                path.display(),
                label_path.display()
            )));
        } else {
            None
        };
        let image = read_image(&path)?;
        samples.push(
            DomainSample::new(stem, image, label)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        );
    }
    match role {
        Role::Source => DomainSet::source(name, samples),
        Role::Target => DomainSet::target(name, samples, n_labelled),
    }
}

/// Writes samples in the layout read by [`load_domain`]. Pixel values are
/// quantized to 8 bits.
pub fn write_domain(dir: &Path, samples: &[DomainSample]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for s in samples {
        let (h, w) = (s.image.height, s.image.width);
        let plane = h * w;
        let rgb = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|c| (s.image.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let path = images.join(format!("{}.png", s.id));
        rgb.save(&path).map_err(|source| Error::Image { path, source })?;
        if let Some(label) = &s.label {
            let gray = GrayImage::from_raw(w as u32, h as u32, label.ids.clone())
                .ok_or_else(|| Error::State(format!("{}: label buffer size mismatch", s.id)))?;
            let path = labels.join(format!("{}.png", s.id));
            gray.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}

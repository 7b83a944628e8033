//! PNG I/O: 8-bit RGB images mapped to [0, 1] tensors, single-channel
//! labelmaps (pixel value = label id), and binary masks (0 / 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::parsing::{Labelmap, Mask};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut t = Tensor::zeros(3, h as usize, w as usize);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(c, y as usize, x as usize) = px.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    if t.channels() != 3 {
        return Err(Error::Dimension("image tensor must have 3 channels".into()));
    }
    let mut img = image::RgbImage::new(t.width() as u32, t.height() as u32);
    for y in 0..t.height() {
        for x in 0..t.width() {
            let px = |c: usize| (t.at(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

pub fn load_labelmap(path: &Path) -> Result<Labelmap> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Labelmap::new(h as usize, w as usize, gray.into_raw()).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn save_labelmap(labels: &Labelmap, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.data().to_vec(),
    )
    .ok_or_else(|| Error::Internal("labelmap buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().iter().map(|&v| v >= 128).collect();
    Mask::new(h as usize, w as usize, data)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let data: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .ok_or_else(|| Error::Internal("mask buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

// --- confidence maps ---
//
// Per-pixel class confidences travel as JSON:
//   {"classes": K, "height": H, "width": W, "data": [...]}
// with data flattened class-major, then row-major within each class.

#[derive(serde::Serialize, serde::Deserialize)]
struct ConfidenceFile {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub fn load_confidence(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: ConfidenceFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let t = Tensor::from_vec(file.classes, file.height, file.width, file.data)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    t.check_finite("confidence map")?;
    Ok(t)
}

pub fn save_confidence(conf: &Tensor, path: &Path) -> Result<()> {
    let (classes, height, width) = conf.shape();
    let file = ConfidenceFile {
        classes,
        height,
        width,
        data: conf.data().to_vec(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut t = Tensor::zeros(3, 4, 5);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        save_image(&t, &path).unwrap();
        let loaded = load_image(&path).unwrap();
        for (a, b) in t.data().iter().zip(loaded.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn labelmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.png");
        let labels = Labelmap::new(2, 3, vec![0, 1, 7, 8, 9, 10]).unwrap();
        save_labelmap(&labels, &path).unwrap();
        assert_eq!(load_labelmap(&path).unwrap(), labels);
    }

    #[test]
    fn labelmap_with_out_of_range_pixels_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let img = image::GrayImage::from_raw(2, 1, vec![0, 200]).unwrap();
        img.save(&path).unwrap();
        assert!(matches!(load_labelmap(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn confidence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conf.json");
        let conf = Tensor::from_vec(2, 1, 2, vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        save_confidence(&conf, &path).unwrap();
        let loaded = load_confidence(&path).unwrap();
        assert_eq!(loaded.shape(), conf.shape());
        assert_eq!(loaded.data(), conf.data());
    }

    #[test]
    fn confidence_with_bad_length_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"classes":2,"height":1,"width":2,"data":[0.5]}"#).unwrap();
        assert!(matches!(load_confidence(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mask = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }
}

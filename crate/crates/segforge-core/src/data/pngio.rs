//! PNG decode/encode and the `images/<id>.png` + `masks/<id>.png` layout.
//! Decoders take raw bytes so corrupt inputs can be exercised directly;
//! only 8-bit gray, RGB, and RGBA files are accepted.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ImageEncoder, ImageFormat};

use super::Sample;
use crate::element::Element;
use crate::error::DataError;
use crate::tensor::{Shape, Tensor};

fn decode(bytes: &[u8], label: &str) -> Result<DynamicImage, DataError> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| DataError::Decode {
        path: label.to_string(),
        message: e.to_string(),
    })
}

/// 8-bit pixels as (r, g, b) rows regardless of source layout; gray
/// replicates, RGBA drops alpha.
fn rgb8(img: DynamicImage, label: &str) -> Result<(usize, usize, Vec<[u8; 3]>), DataError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = match img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| [v, v, v]).collect(),
        DynamicImage::ImageRgb8(rgb) => rgb.as_raw().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        DynamicImage::ImageRgba8(rgba) => rgba.as_raw().chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
        other => {
            return Err(DataError::UnsupportedPixelFormat {
                path: label.to_string(),
                kind: format!("{:?}", other.color()),
            })
        }
    };
    Ok((w, h, px))
}

/// Image tensor [3,H,W] scaled to [0,1].
pub fn decode_image_bytes<T: Element>(bytes: &[u8], label: &str) -> Result<Tensor<T>, DataError> {
    let (w, h, px) = rgb8(decode(bytes, label)?, label)?;
    let mut data = vec![T::ZERO; 3 * h * w];
    for (i, p) in px.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = T::from_f64(p[ch] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(Shape::new(vec![3, h, w]).unwrap(), data).expect("sized buffer"))
}

/// Mask tensor [1,H,W]: luminance >= 128 becomes 1. Color masks use
/// integer-rounded Rec. 601 luma, so results are platform independent.
pub fn decode_mask_bytes<T: Element>(bytes: &[u8], label: &str) -> Result<Tensor<T>, DataError> {
    let (w, h, px) = rgb8(decode(bytes, label)?, label)?;
    let mut data = vec![T::ZERO; h * w];
    for (i, &[r, g, b]) in px.iter().enumerate() {
        let luma = (299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000;
        data[i] = if luma >= 128 { T::ONE } else { T::ZERO };
    }
    Ok(Tensor::new(Shape::new(vec![1, h, w]).unwrap(), data).expect("sized buffer"))
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_pair<T: Element>(image_path: &Path, mask_path: &Path) -> Result<Sample<T>, DataError> {
    let image = decode_image_bytes(&read(image_path)?, &image_path.display().to_string())?;
    let mask = decode_mask_bytes(&read(mask_path)?, &mask_path.display().to_string())?;
    let (ih, iw) = (image.shape().dims()[1], image.shape().dims()[2]);
    let (mh, mw) = (mask.shape().dims()[1], mask.shape().dims()[2]);
    if (ih, iw) != (mh, mw) {
        return Err(DataError::PairSizeMismatch {
            image: image_path.display().to_string(),
            mask: mask_path.display().to_string(),
            iw: iw as u32,
            ih: ih as u32,
            mw: mw as u32,
            mh: mh as u32,
        });
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image_path.display().to_string());
    Ok(Sample { id, image, mask })
}

/// Pair ids with their image/mask paths, sorted by id for a stable order.
pub fn scan_pairs(dir: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, DataError> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let entries = fs::read_dir(&images_dir).map_err(|e| DataError::Io {
        path: images_dir.display().to_string(),
        source: e,
    })?;
    let mut pairs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io {
            path: images_dir.display().to_string(),
            source: e,
        })?;
        let path = entry.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mask = masks_dir.join(format!("{id}.png"));
        if !mask.is_file() {
            return Err(DataError::MissingMask {
                image: path.display().to_string(),
                expected: mask.display().to_string(),
            });
        }
        pairs.push((id, path, mask));
    }
    if pairs.is_empty() {
        return Err(DataError::EmptyDataset {
            dir: dir.display().to_string(),
        });
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(pairs)
}

pub fn load_dir<T: Element>(dir: &Path) -> Result<Vec<Sample<T>>, DataError> {
    scan_pairs(dir)?
        .iter()
        .map(|(_, image, mask)| load_pair(image, mask))
        .collect()
}

pub fn encode_gray_png(values: &[u8], w: u32, h: u32) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(values, w, h, ColorType::L8)
        .expect("in-memory png write cannot fail");
    out
}

pub fn encode_rgb_png(values: &[u8], w: u32, h: u32) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(values, w, h, ColorType::Rgb8)
        .expect("in-memory png write cannot fail");
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Materialize samples in the standard layout. Masks become 0/255 gray PNGs,
/// so a reload reproduces them exactly; images quantize to 8 bits.
pub fn write_dataset<T: Element>(dir: &Path, samples: &[Sample<T>]) -> Result<(), DataError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |e: std::io::Error| DataError::Io { path, source: e }
    };
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;
    for s in samples {
        let (h, w) = s.size();
        let mut rgb = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for ch in 0..3 {
                rgb[3 * i + ch] = quantize(s.image.data()[ch * h * w + i].to_f64());
            }
        }
        let gray: Vec<u8> = s
            .mask
            .data()
            .iter()
            .map(|&v| if v == T::ONE { 255 } else { 0 })
            .collect();
        let ipath = images_dir.join(format!("{}.png", s.id));
        let mpath = masks_dir.join(format!("{}.png", s.id));
        fs::write(&ipath, encode_rgb_png(&rgb, w as u32, h as u32)).map_err(io_err(&ipath))?;
        fs::write(&mpath, encode_gray_png(&gray, w as u32, h as u32)).map_err(io_err(&mpath))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_dataset;

    #[test]
    fn gray_threshold_sits_at_128() {
        let bytes = encode_gray_png(&[0, 127, 128, 255], 2, 2);
        let mask = decode_mask_bytes::<f64>(&bytes, "t").unwrap();
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn image_decode_scales_to_unit_range_and_chw() {
        let bytes = encode_rgb_png(&[255, 0, 0, 0, 255, 0], 2, 1);
        let img = decode_image_bytes::<f64>(&bytes, "t").unwrap();
        assert_eq!(img.shape().dims(), &[3, 1, 2]);
        // Channel planes: r = [1, 0], g = [0, 1], b = [0, 0].
        assert_eq!(img.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn garbage_bytes_are_a_decode_error() {
        let err = decode_image_bytes::<f32>(b"not a png", "junk").unwrap_err();
        assert!(matches!(err, DataError::Decode { .. }));
    }

    #[test]
    fn sixteen_bit_gray_is_unsupported() {
        // Encode a 16-bit gray PNG through the image crate directly.
        let mut out = Vec::new();
        PngEncoder::new(&mut out)
            .write_image(&[0, 1, 2, 3], 2, 1, ColorType::L16)
            .unwrap();
        let err = decode_mask_bytes::<f32>(&out, "deep").unwrap_err();
        assert!(matches!(err, DataError::UnsupportedPixelFormat { .. }));
    }

    #[test]
    fn dataset_round_trip_preserves_masks_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset::<f32>(3, 24, 5).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dir::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.mask.data(), back.mask.data());
            // Images only survive 8-bit quantization.
            for (&a, &b) in orig.image.data().iter().zip(back.image.data()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_pair_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("i.png");
        let mpath = dir.path().join("m.png");
        std::fs::write(&ipath, encode_rgb_png(&[0; 12], 2, 2)).unwrap();
        std::fs::write(&mpath, encode_gray_png(&[0; 6], 2, 3)).unwrap();
        let err = load_pair::<f32>(&ipath, &mpath).unwrap_err();
        assert!(matches!(err, DataError::PairSizeMismatch { .. }));
    }

    #[test]
    fn missing_mask_and_empty_dir_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(matches!(
            scan_pairs(dir.path()).unwrap_err(),
            DataError::EmptyDataset { .. }
        ));
        let ipath = dir.path().join("images/a.png");
        std::fs::write(&ipath, encode_rgb_png(&[0; 3], 1, 1)).unwrap();
        assert!(matches!(
            scan_pairs(dir.path()).unwrap_err(),
            DataError::MissingMask { .. }
        ));
    }
}

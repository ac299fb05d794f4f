//! IDX container parsing (big-endian header, raw `u8` payload).

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Header and payload of an IDX3 `u8` image file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdxImages<'a> {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: &'a [u8],
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<IdxImages<'a>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "truncated IDX header"))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x} (u8 images)"),
        ));
    }
    let header = |at| be_u32(bytes, at).ok_or_else(|| Error::format(path, "truncated IDX header"));
    let count = header(4)? as usize;
    let rows = header(8)? as usize;
    let cols = header(12)? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(path, "IDX dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes, header promises {count}×{rows}×{cols} = {expected}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload,
    })
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "truncated IDX header"))?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x} (u8 labels)"),
        ));
    }
    let count = be_u32(bytes, 4).ok_or_else(|| Error::format(path, "truncated IDX header"))? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header promises {count} labels", payload.len()),
        ));
    }
    Ok(payload)
}

/// Builds a 10-class dataset from already-read IDX bytes.
pub(crate) fn mnist_from_bytes(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
    split: Split,
) -> Result<Dataset> {
    let img = parse_idx_images(images, images_path)?;
    let lab = parse_idx_labels(labels, labels_path)?;
    if img.count != lab.len() {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {} images in {}", lab.len(), img.count, images_path.display()),
        ));
    }
    if let Some(&bad) = lab.iter().find(|&&l| l > 9) {
        return Err(Error::format(labels_path, format!("label {bad} outside 0..10")));
    }
    let pixels = img.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let tensor = Tensor::new(vec![img.count, 1, img.rows, img.cols], pixels)?;
    Dataset::new(tensor, lab.to_vec(), 10, split)
}

pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    mnist_from_bytes(&images, ip, &labels, lp, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn labels_file(labels: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn scales_bytes_to_unit_interval() {
        let imgs = images_file(2, 1, 2, &[0, 255, 128, 1]);
        let labs = labels_file(&[7, 3]);
        let ds = mnist_from_bytes(&imgs, Path::new("i"), &labs, Path::new("l"), Split::Test).unwrap();
        assert_eq!(ds.image_shape(), [1, 1, 2]);
        assert_eq!(ds.image(0), &[0.0, 1.0]);
        assert_eq!(ds.label(0), 7);
        // Lossless modulo scaling.
        let back: Vec<u8> = ds.images().data().iter().map(|p| (p * 255.0).round() as u8).collect();
        assert_eq!(back, vec![0, 255, 128, 1]);
    }

    #[test]
    fn errors_name_the_file() {
        let imgs = images_file(2, 1, 2, &[0, 255, 128]);
        let err = parse_idx_images(&imgs, Path::new("imgs.idx")).unwrap_err();
        assert!(err.to_string().contains("imgs.idx"), "{err}");

        let mut bad = labels_file(&[1]);
        bad[3] = 0x03;
        let err = parse_idx_labels(&bad, Path::new("labs.idx")).unwrap_err();
        assert!(err.to_string().contains("labs.idx") && err.to_string().contains("magic"), "{err}");

        assert!(parse_idx_labels(&[0, 0, 8], Path::new("x")).is_err());
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let imgs = images_file(2, 1, 1, &[0, 1]);
        let labs = labels_file(&[1]);
        let err = mnist_from_bytes(&imgs, Path::new("i"), &labs, Path::new("l"), Split::Test).unwrap_err();
        assert!(err.to_string().contains("1 labels for 2 images"), "{err}");
    }

    #[test]
    fn huge_header_does_not_overflow() {
        let imgs = images_file(u32::MAX, u32::MAX, u32::MAX, &[]);
        assert!(parse_idx_images(&imgs, Path::new("x")).is_err());
    }
}

use std::path::Path;

use super::{DataError, Dataset};
use crate::diffcore::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
            have: bytes.len(),
            need: at + 4,
        })
}

/// Parses the header (magic plus `dims` big-endian extents) and returns the
/// extents and the payload slice, which must have exactly `Π dims` bytes.
fn parse<'a>(bytes: &'a [u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found,
            expected: magic,
        });
    }
    let extents = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * dims;
    let need = header + extents.iter().product::<usize>();
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            have: bytes.len(),
            need,
        });
    }
    Ok((extents, &bytes[header..need]))
}

/// Loads an IDX image/label pair (unsigned-byte payloads). Pixels are
/// scaled by 1/255; the class count is `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(ip)?;
    let label_bytes = read(lp)?;
    let (dims, pixels) = parse(&image_bytes, ip, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = parse(&label_bytes, lp, IDX_LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: dims[0],
            labels: ldims[0],
        });
    }
    if dims.contains(&0) {
        return Err(DataError::Invalid(format!("IDX extents {dims:?} contain zero")));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new([dims[0], 1, dims[1], dims[2]], data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(images, labels, classes)
}

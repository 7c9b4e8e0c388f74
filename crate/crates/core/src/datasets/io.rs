//! Dataset file: `WLAB1` magic, u64-LE header length, JSON header, f64-LE
//! pixels, u32-LE factor indices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, FactorGrid, LabeledImageDataset};

pub const DATASET_MAGIC: &[u8; 5] = b"WLAB1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    width: usize,
    height: usize,
    num_images: usize,
    grid: FactorGrid,
}

pub fn save_dataset(ds: &LabeledImageDataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let header = Header {
        width: ds.width,
        height: ds.height,
        num_images: ds.len(),
        grid: ds.grid.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DatasetError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(
        DATASET_MAGIC.len() + 8 + json.len() + ds.pixels().len() * 8 + ds.factor_table().len() * 4,
    );
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in ds.pixels() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    for f in ds.factor_table() {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], DatasetError> {
    let available = bytes.len().saturating_sub(*pos);
    if available < n {
        return Err(DatasetError::Truncated {
            expected: *pos + n,
            found: bytes.len(),
        });
    }
    let out = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledImageDataset, DatasetError> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if bytes.len() >= DATASET_MAGIC.len() && &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    take(&bytes, &mut pos, DATASET_MAGIC.len())?;
    let len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, len)?)
        .map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.grid.counts != header.grid.values.iter().map(Vec::len).collect::<Vec<_>>() {
        return Err(DatasetError::Header("factor counts disagree with value lists".into()));
    }
    if header.num_images != header.grid.num_images() {
        return Err(DatasetError::Header(format!(
            "header declares {} images but the factor grid has {}",
            header.num_images,
            header.grid.num_images()
        )));
    }
    let n_pixels = header.num_images * header.width * header.height;
    let n_factors = header.num_images * header.grid.num_factors();
    let pixel_bytes = take(&bytes, &mut pos, n_pixels * 8)?;
    let factor_bytes = take(&bytes, &mut pos, n_factors * 4)?;
    if pos != bytes.len() {
        return Err(DatasetError::TrailingBytes(bytes.len() - pos));
    }
    let pixels = pixel_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let factors = factor_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabeledImageDataset::new(header.width, header.height, pixels, factors, header.grid)
}

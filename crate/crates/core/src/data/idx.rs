//! IDX container reader for 28×28 grayscale image sets (MNIST layout).

use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;

fn read_header(path: &Path, words: usize) -> Result<(File, Vec<u32>, u64)> {
    let mut f = File::open(path)?;
    let file_len = f.metadata()?.len();
    let mut buf = vec![0u8; words * 4];
    f.read_exact(&mut buf).map_err(|_| {
        Error::format(path, format!("truncated header ({file_len} bytes)"))
    })?;
    let header = buf
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    Ok((f, header, file_len))
}

fn read_body(mut f: File, path: &Path, len: usize) -> Result<Vec<u8>> {
    let mut body = vec![0u8; len];
    f.read_exact(&mut body)
        .map_err(|_| Error::format(path, format!("truncated body (expected {len} bytes)")))?;
    Ok(body)
}

fn check_magic(path: &Path, found: u32, want: u32, what: &str) -> Result<()> {
    if found != want {
        return Err(Error::format(
            path,
            format!("wrong magic for {what} file: 0x{found:08x} (expected 0x{want:08x})"),
        ));
    }
    Ok(())
}

/// Loads an IDX image/label pair, scaling pixels to [0, 1]. Headers and
/// sizes are validated before any sample storage is allocated.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());

    let (img_file, ih, img_len) = read_header(ip, 4)?;
    check_magic(ip, ih[0], IMAGE_MAGIC, "image")?;
    let (n, rows, cols) = (ih[1] as usize, ih[2] as usize, ih[3] as usize);
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::format(
            ip,
            format!("images are {rows}×{cols}, expected {IMAGE_SIDE}×{IMAGE_SIDE}"),
        ));
    }
    let img_bytes = n * rows * cols;
    if img_len < 16 + img_bytes as u64 {
        return Err(Error::format(
            ip,
            format!("truncated: header promises {n} images, file has {img_len} bytes"),
        ));
    }

    let (lab_file, lh, lab_len) = read_header(lp, 2)?;
    check_magic(lp, lh[0], LABEL_MAGIC, "label")?;
    let m = lh[1] as usize;
    if m != n {
        return Err(Error::format(
            lp,
            format!("count mismatch: {n} images but {m} labels"),
        ));
    }
    if lab_len < 8 + m as u64 {
        return Err(Error::format(
            lp,
            format!("truncated: header promises {m} labels, file has {lab_len} bytes"),
        ));
    }
    if n == 0 {
        return Err(Error::EmptyDataset(ip.display().to_string()));
    }

    let labels: Vec<usize> = read_body(lab_file, lp, m)?.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |&l| l + 1).max(10);
    let pixels = read_body(img_file, ip, img_bytes)?;
    let features = pixels.into_iter().map(|p| f64::from(p) / 255.0).collect();
    Dataset::new(
        features,
        vec![1, rows, cols],
        labels,
        num_classes,
        format!("idx:{}", ip.display()),
    )
}

/// Serialises images (already 0..=255) and labels as an IDX pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    images: &[[u8; IMAGE_SIDE * IMAGE_SIDE]],
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * 784);
    for w in [IMAGE_MAGIC, images.len() as u32, 28, 28] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    images.iter().for_each(|i| img.extend_from_slice(i));
    std::fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + labels.len());
    for w in [LABEL_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    std::fs::write(labels_path, lab)?;
    Ok(())
}

//! Hyperspectral scene container.
//!
//! Cube file: an ASCII header line `IPCUBE v1 <rows> <cols> <bands>\n`
//! followed by `rows · cols · bands` little-endian `f32` values, pixel-major
//! (all bands of pixel (0,0), then pixel (0,1), …, row by row).
//!
//! Label file: `rows · cols` whitespace-separated integers in the same pixel
//! order; 0 marks an unlabelled pixel and 1..=C are classes.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const INDIAN_PINES_ROWS: usize = 145;
pub const INDIAN_PINES_COLS: usize = 145;
pub const INDIAN_PINES_BANDS: usize = 200;
pub const INDIAN_PINES_CLASSES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeHeader {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
}

fn parse_header(path: &Path, line: &str) -> Result<CubeHeader> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["IPCUBE", "v1", r, c, b] => {
            let num = |s: &str| {
                s.parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::format(path, format!("bad header field {s:?}")))
            };
            Ok(CubeHeader {
                rows: num(r)?,
                cols: num(c)?,
                bands: num(b)?,
            })
        }
        _ => Err(Error::format(
            path,
            format!("expected header `IPCUBE v1 rows cols bands`, found {line:?}"),
        )),
    }
}

/// Writes a cube in the container format above.
pub fn write_cube(path: impl AsRef<Path>, header: CubeHeader, values: &[f32]) -> Result<()> {
    if values.len() != header.rows * header.cols * header.bands {
        return Err(Error::invalid("cube value count does not match header"));
    }
    let mut bytes = format!(
        "IPCUBE v1 {} {} {}\n",
        header.rows, header.cols, header.bands
    )
    .into_bytes();
    bytes.reserve(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, header: CubeHeader, labels: &[u16]) -> Result<()> {
    if labels.len() != header.rows * header.cols {
        return Err(Error::invalid("label count does not match header"));
    }
    let mut s = String::with_capacity(labels.len() * 3);
    for row in labels.chunks(header.cols) {
        let line: Vec<String> = row.iter().map(u16::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Loads the labelled pixels of a scene: unlabelled pixels (0) are dropped
/// and class `k` in the file becomes label `k − 1`.
pub fn load_hyperspectral(
    cube_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Dataset> {
    let (cp, lp) = (cube_path.as_ref(), labels_path.as_ref());
    let mut reader = BufReader::new(fs::File::open(cp)?);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|_| Error::format(cp, "unreadable header"))?;
    let header = parse_header(cp, line.trim_end())?;
    let pixels = header.rows * header.cols;

    let label_text = fs::read_to_string(lp)?;
    let mut raw = Vec::with_capacity(pixels);
    for tok in label_text.split_whitespace() {
        let v: usize = tok
            .parse()
            .map_err(|_| Error::format(lp, format!("non-integer label {tok:?}")))?;
        if v > num_classes {
            return Err(Error::format(
                lp,
                format!("label {v} outside 0..={num_classes}"),
            ));
        }
        raw.push(v);
    }
    if raw.len() != pixels {
        return Err(Error::format(
            lp,
            format!(
                "{} labels for a {}×{} scene ({pixels} pixels)",
                raw.len(),
                header.rows,
                header.cols
            ),
        ));
    }
    let labelled = raw.iter().filter(|&&v| v > 0).count();
    if labelled == 0 {
        return Err(Error::EmptyDataset(format!(
            "{}: no labelled pixels",
            lp.display()
        )));
    }

    let expected = pixels * header.bands * 4;
    let mut body = Vec::with_capacity(expected);
    reader.read_to_end(&mut body)?;
    if body.len() != expected {
        return Err(Error::format(
            cp,
            format!("expected {expected} payload bytes, found {}", body.len()),
        ));
    }

    let mut features = Vec::with_capacity(labelled * header.bands);
    let mut labels = Vec::with_capacity(labelled);
    for (p, &lab) in raw.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let px = &body[p * header.bands * 4..(p + 1) * header.bands * 4];
        features.extend(
            px.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))),
        );
        labels.push(lab - 1);
    }
    Dataset::new(
        features,
        vec![header.bands],
        labels,
        num_classes,
        format!("ipcube:{}", cp.display()),
    )
}

/// Like [`load_hyperspectral`] but insists on the 145×145×200, 16-class scene.
pub fn load_indian_pines(
    cube_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let cp = cube_path.as_ref();
    let mut line = String::new();
    BufReader::new(fs::File::open(cp)?).read_line(&mut line)?;
    let h = parse_header(cp, line.trim_end())?;
    let want = CubeHeader {
        rows: INDIAN_PINES_ROWS,
        cols: INDIAN_PINES_COLS,
        bands: INDIAN_PINES_BANDS,
    };
    if h != want {
        return Err(Error::format(
            cp,
            format!(
                "scene is {}×{}×{}, expected {}×{}×{}",
                h.rows, h.cols, h.bands, want.rows, want.cols, want.bands
            ),
        ));
    }
    load_hyperspectral(cp, labels_path, INDIAN_PINES_CLASSES)
}

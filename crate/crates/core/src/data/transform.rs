use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-feature min–max scaling fitted on one split and applied to any other.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(ds: &Dataset) -> Self {
        let d = ds.feature_dim();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for row in ds.features().chunks_exact(d) {
            for j in 0..d {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        MinMaxScaler { min, max }
    }

    /// Maps each feature to `(x − min)/(max − min)`; constant features map to 0.
    pub fn transform(&self, ds: &Dataset) -> Result<Dataset> {
        let d = ds.feature_dim();
        if d != self.min.len() {
            return Err(Error::shape("min-max transform", &[self.min.len()], &[d]));
        }
        let mut out = ds.clone();
        for row in out.features_mut().chunks_exact_mut(d) {
            for j in 0..d {
                let span = self.max[j] - self.min[j];
                row[j] = if span > 0.0 {
                    (row[j] - self.min[j]) / span
                } else {
                    0.0
                };
            }
        }
        Ok(out.with_note("min-max normalised per feature"))
    }
}

/// Fits min–max statistics on `train` and applies them to both splits.
pub fn min_max_normalize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(train);
    Ok((scaler.transform(train)?, scaler.transform(test)?, scaler))
}

/// `x ← (x − mean)/std` for every feature value.
pub fn standardize(ds: &Dataset, mean: f64, std: f64) -> Result<Dataset> {
    if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::invalid(format!("standardize needs std > 0, got {std}")));
    }
    let mut out = ds.clone();
    out.features_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - mean) / std);
    Ok(out.with_note(&format!("standardised (mean {mean}, std {std})")))
}

/// Train/test index sets of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class, `floor(fraction · n_c)` samples chosen by seeded shuffle go to
/// train and the rest to test. Indices are returned in ascending order.
pub fn stratified_indices(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((c, _)) = by_class.iter().enumerate().find(|(_, v)| v.len() == 1) {
        return Err(Error::invalid(format!(
            "class {c} has a single sample and cannot be split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices {
        train: Vec::new(),
        test: Vec::new(),
    };
    for mut members in by_class {
        members.shuffle(&mut rng);
        let k = (train_fraction * members.len() as f64).floor() as usize;
        split.train.extend_from_slice(&members[..k]);
        split.test.extend_from_slice(&members[k..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

pub fn stratified_split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let idx = stratified_indices(ds, train_fraction, seed)?;
    let note = format!("stratified split {train_fraction} (seed {seed})");
    Ok((
        ds.subset(&idx.train)?.with_note(&format!("{note}, train part")),
        ds.subset(&idx.test)?.with_note(&format!("{note}, test part")),
    ))
}

/// Training-time image augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Zero-pad by `CROP_PAD` pixels, then crop a random window of the original size.
    pub random_crop: bool,
    /// Mirror left–right with probability 1/2.
    pub horizontal_flip: bool,
    pub seed: u64,
}

pub const CROP_PAD: usize = 4;

impl AugmentConfig {
    pub fn light(seed: u64) -> Self {
        AugmentConfig {
            random_crop: true,
            horizontal_flip: true,
            seed,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.random_crop || self.horizontal_flip
    }
}

/// Mirrors one `h × w` plane left–right in place.
pub fn flip_plane(plane: &mut [f64], w: usize) {
    for row in plane.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Shifts a plane as if cropping the window at `(oy, ox)` out of a copy
/// zero-padded by [`CROP_PAD`]; `(CROP_PAD, CROP_PAD)` is the identity.
pub fn crop_plane(plane: &mut [f64], h: usize, w: usize, oy: usize, ox: usize) {
    let src = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            let sy = (y + oy) as isize - CROP_PAD as isize;
            let sx = (x + ox) as isize - CROP_PAD as isize;
            plane[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                src[sy as usize * w + sx as usize]
            } else {
                0.0
            };
        }
    }
}

/// Applies random crop and flip to an `n × c × h × w` batch in place. The
/// same transform is used for every channel of a sample.
pub fn augment<R: Rng>(batch: &mut Tensor, config: &AugmentConfig, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = match batch.shape() {
        &[n, c, h, w] => (n, c, h, w),
        other => {
            return Err(Error::invalid(format!(
                "augmentation needs image batches n×c×h×w, got {other:?}"
            )))
        }
    };
    if !config.is_enabled() {
        return Ok(());
    }
    let plane = h * w;
    for s in 0..n {
        let offset = config
            .random_crop
            .then(|| (rng.gen_range(0..=2 * CROP_PAD), rng.gen_range(0..=2 * CROP_PAD)));
        let flip = config.horizontal_flip && rng.gen_bool(0.5);
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            let p = &mut batch.data_mut()[start..start + plane];
            if let Some((oy, ox)) = offset {
                crop_plane(p, h, w, oy, ox);
            }
            if flip {
                flip_plane(p, w);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Dataset {
        Dataset::new(values.to_vec(), vec![1], vec![0; values.len()], 1, "col").unwrap()
    }

    #[test]
    fn min_max_cases() {
        let ds = column(&[0.0, 5.0, 10.0]);
        let out = MinMaxScaler::fit(&ds).transform(&ds).unwrap();
        assert_eq!(out.features(), &[0.0, 0.5, 1.0]);
        let ds = column(&[3.0, 3.0, 3.0]);
        let out = MinMaxScaler::fit(&ds).transform(&ds).unwrap();
        assert_eq!(out.features(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn min_max_uses_train_statistics() {
        let train = column(&[2.0, 4.0]);
        let test = column(&[3.0, 6.0]);
        let (tr, te, _) = min_max_normalize(&train, &test).unwrap();
        assert_eq!(tr.features(), &[0.0, 1.0]);
        assert_eq!(te.features(), &[0.5, 2.0]);
    }

    #[test]
    fn standardize_cases() {
        let ds = column(&[0.286, 0.639]);
        let out = standardize(&ds, 0.286, 0.353).unwrap();
        assert_eq!(out.features()[0], 0.0);
        assert!((out.features()[1] - 1.0).abs() < 1e-9);
        let id = standardize(&ds, 0.0, 1.0).unwrap();
        assert_eq!(id.features(), ds.features());
        assert!(standardize(&ds, 0.0, 0.0).is_err());
    }

    fn two_class(n0: usize, n1: usize) -> Dataset {
        let labels: Vec<usize> = (0..n0).map(|_| 0).chain((0..n1).map(|_| 1)).collect();
        let f = (0..labels.len()).map(|v| v as f64).collect();
        Dataset::new(f, vec![1], labels, 2, "two").unwrap()
    }

    #[test]
    fn stratified_counts_and_partition() {
        let ds = two_class(60, 40);
        let idx = stratified_indices(&ds, 0.7, 1).unwrap();
        let (tr, te) = stratified_split(&ds, 0.7, 1).unwrap();
        assert_eq!(tr.class_counts(), vec![42, 28]);
        assert_eq!(te.class_counts(), vec![18, 12]);
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(idx, stratified_indices(&ds, 0.7, 1).unwrap());
        assert_ne!(idx, stratified_indices(&ds, 0.7, 2).unwrap());
    }

    #[test]
    fn stratified_validation() {
        let ds = two_class(10, 1);
        let err = stratified_indices(&ds, 0.7, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
        assert!(stratified_indices(&two_class(5, 5), 1.0, 0).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let orig: Vec<f64> = (0..12).map(f64::from).collect();
        let mut p = orig.clone();
        flip_plane(&mut p, 4);
        assert_ne!(p, orig);
        flip_plane(&mut p, 4);
        assert_eq!(p, orig);
    }

    #[test]
    fn centre_crop_is_identity() {
        let orig: Vec<f64> = (0..784).map(|v| v as f64).collect();
        let mut p = orig.clone();
        crop_plane(&mut p, 28, 28, CROP_PAD, CROP_PAD);
        assert_eq!(p, orig);
        crop_plane(&mut p, 28, 28, 0, CROP_PAD);
        assert_eq!(&p[..28 * 4], &[0.0; 112][..]);
        assert_eq!(p[28 * 4], orig[0]);
    }

    #[test]
    fn disabled_augmentation_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Tensor::from_fn(&[2, 1, 28, 28], |i| i as f64);
        let before = b.clone();
        let cfg = AugmentConfig {
            random_crop: false,
            horizontal_flip: false,
            seed: 0,
        };
        augment(&mut b, &cfg, &mut rng).unwrap();
        assert_eq!(b, before);
        augment(&mut b, &AugmentConfig::light(0), &mut rng).unwrap();
        assert_ne!(b, before);
        assert!(augment(&mut Tensor::zeros(&[2, 4]), &cfg, &mut rng).is_err());
    }
}

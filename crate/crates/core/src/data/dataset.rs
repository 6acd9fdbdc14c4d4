use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Labelled samples stored contiguously, one `sample_shape` block per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let provenance = provenance.into();
        if labels.is_empty() {
            return Err(Error::EmptyDataset(provenance));
        }
        let dim: usize = sample_shape.iter().product();
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{provenance}: {} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "{provenance}: label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{provenance} features")));
        }
        Ok(Dataset {
            features,
            sample_shape,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_note(mut self, note: &str) -> Self {
        self.provenance.push_str("; ");
        self.provenance.push_str(note);
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let d = self.feature_dim();
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset::new(
            features,
            self.sample_shape.clone(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.provenance.clone(),
        )
    }

    /// Stacks the selected samples into a `k × sample_shape` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(shape, data).expect("batch shape matches data")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_contents() {
        assert!(matches!(
            Dataset::new(vec![], vec![2], vec![], 2, "x"),
            Err(Error::EmptyDataset(_))
        ));
        assert!(Dataset::new(vec![0.0; 3], vec![2], vec![0, 1], 2, "x").is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![2], vec![0, 2], 2, "x").is_err());
        assert!(Dataset::new(vec![f64::NAN, 0.0], vec![2], vec![0], 2, "x").is_err());
    }

    #[test]
    fn batch_and_subset() {
        let ds = Dataset::new((0..6).map(f64::from).collect(), vec![2], vec![0, 1, 1], 2, "t")
            .unwrap();
        let b = ds.batch(&[2, 0]);
        assert_eq!(b.shape(), &[2, 2]);
        assert_eq!(b.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = ds.subset(&[1]).unwrap();
        assert_eq!(s.labels(), &[1]);
        assert_eq!(ds.class_counts(), vec![1, 2]);
    }
}

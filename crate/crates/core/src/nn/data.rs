use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Row-major feature matrix with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub x: Vec<f64>,
    /// Class index (as a float) or regression target.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: usize, x: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if features == 0 || x.len() != features * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} samples of {} features",
                x.len(),
                labels.len(),
                features
            )));
        }
        Ok(Dataset { features, x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().fold(0usize, |m, &l| m.max(l as usize + 1))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.features);
        for &i in idx {
            x.extend_from_slice(self.sample(i));
        }
        Dataset {
            features: self.features,
            x,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Gaussian blobs: centers drawn from N(0, 1) per feature, samples from
    /// N(center, spread). Samples are interleaved by class.
    pub fn gaussian_clusters(classes: usize, per_class: usize, features: usize, spread: f64, seed: u64) -> Result<Self> {
        if classes < 2 || features == 0 || !(spread > 0.0) {
            return Err(Error::InvalidArgument("need >= 2 classes, >= 1 feature, spread > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f64> = (0..classes * features)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let noise = Normal::new(0.0, spread).expect("positive spread");
        let mut x = Vec::with_capacity(classes * per_class * features);
        let mut labels = Vec::with_capacity(classes * per_class);
        for _ in 0..per_class {
            for c in 0..classes {
                for f in 0..features {
                    x.push(centers[c * features + f] + noise.sample(&mut rng));
                }
                labels.push(c as f64);
            }
        }
        Self::new(features, x, labels)
    }

    /// The four XOR points.
    pub fn xor() -> Self {
        Dataset {
            features: 2,
            x: vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0],
            labels: vec![0.0, 1.0, 1.0, 0.0],
        }
    }

    /// Seeded shuffle, then the first `test_fraction` of samples form the
    /// test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let (test, train) = idx.split_at(n_test);
        (self.subset(train), self.subset(test))
    }

    /// CSV with a header row; the column named `label` holds labels, every
    /// other column is a feature.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == "label")
            .ok_or_else(|| Error::Csv("no `label` column".into()))?;
        let features = headers.len() - 1;
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}: `{field}` is not a number", row + 2)))?;
                if i == label_col {
                    labels.push(v);
                } else {
                    x.push(v);
                }
            }
        }
        Self::new(features, x, labels)
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.features).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.sample(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.labels[i]));
            w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

//! Synthetic data and the seeded reference network used by tests, examples
//! and `rankloss train-toy --fixture reference`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::{train_toy, Dataset, Network};

/// Seed for blob centers. Fixed so that train, calibration and held-out
/// sets drawn with different sample seeds share one distribution.
pub const CENTER_SEED: u64 = 7;
pub const CENTER_SPREAD: f64 = 2.0;
pub const DEFAULT_BLOB_DIMS: usize = 8;

/// Gaussian blobs: `classes` centers drawn from `N(0, 2²)`, each sample is
/// its center plus `N(0, 1)` noise, labels cycle `0, 1, .., classes-1`.
///
/// Text form: `blobs:<c>classes:<n>[:<d>dims]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobSpec {
    pub classes: usize,
    pub samples: usize,
    pub dims: usize,
}

impl BlobSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.classes < 2 || self.samples == 0 || self.dims == 0 {
            return Err(Error::invalid(format!("degenerate blob spec {self}")));
        }
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut crng = ChaCha8Rng::seed_from_u64(CENTER_SEED);
        let centers: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                (0..self.dims)
                    .map(|_| CENTER_SPREAD * unit.sample(&mut crng))
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        let inputs = labels
            .iter()
            .map(|&c| {
                centers[c]
                    .iter()
                    .map(|m| m + unit.sample(&mut rng))
                    .collect()
            })
            .collect();
        Dataset::classification(inputs, labels)
    }
}

impl fmt::Display for BlobSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blobs:{}classes:{}:{}dims",
            self.classes, self.samples, self.dims
        )
    }
}

impl FromStr for BlobSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "expected blobs:<c>classes:<n>[:<d>dims], got {s:?}"
            ))
        };
        let parts: Vec<&str> = s.split(':').collect();
        if !(3..=4).contains(&parts.len()) || parts[0] != "blobs" {
            return Err(bad());
        }
        let number = |p: &str, suffix: &str| -> Result<usize> {
            p.strip_suffix(suffix)
                .unwrap_or(if suffix.is_empty() { p } else { "" })
                .parse()
                .map_err(|_| bad())
        };
        Ok(BlobSpec {
            classes: number(parts[1], "classes")?,
            samples: number(parts[2], "")?,
            dims: match parts.get(3) {
                Some(p) => number(p, "dims")?,
                None => DEFAULT_BLOB_DIMS,
            },
        })
    }
}

/// Everything needed to rebuild a fixture bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub arch: Vec<usize>,
    pub blobs: BlobSpec,
    /// Training split size; the other splits use `blobs.samples`.
    pub train_samples: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    pub calibration_seed: u64,
    pub holdout_seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl FixtureConfig {
    /// Two tanh hidden layers of 64 units on 3-class, 8-dimensional blobs,
    /// seed 42. Trained on 300 samples; calibration and held-out splits
    /// hold 1000 each.
    pub fn reference() -> Self {
        FixtureConfig {
            arch: vec![8, 64, 64, 3],
            blobs: BlobSpec {
                classes: 3,
                samples: 1000,
                dims: 8,
            },
            train_samples: 300,
            init_seed: 42,
            train_seed: 1,
            calibration_seed: 2,
            holdout_seed: 3,
            steps: 1000,
            learning_rate: 0.1,
        }
    }

    /// The reference recipe with a different initialization seed.
    pub fn with_seed(seed: u64) -> Self {
        FixtureConfig {
            init_seed: seed,
            ..Self::reference()
        }
    }

    pub fn build(&self) -> Result<Fixture> {
        let train = BlobSpec {
            samples: self.train_samples,
            ..self.blobs
        }
        .generate(self.train_seed)?;
        let calibration = self.blobs.generate(self.calibration_seed)?;
        let holdout = self.blobs.generate(self.holdout_seed)?;
        let trained = train_toy(
            &self.arch,
            &train,
            self.steps,
            self.learning_rate,
            self.init_seed,
        )?;
        Ok(Fixture {
            config: self.clone(),
            network: trained.network,
            train,
            calibration,
            holdout,
            initial_loss: trained.initial_loss,
            final_loss: trained.final_loss,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub network: Network,
    pub train: Dataset,
    pub calibration: Dataset,
    pub holdout: Dataset,
    /// Training loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// The reference fixture, trained once per process.
pub fn reference() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        FixtureConfig::reference()
            .build()
            .expect("reference fixture trains")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let s: BlobSpec = "blobs:3classes:1000".parse().unwrap();
        assert_eq!(
            s,
            BlobSpec {
                classes: 3,
                samples: 1000,
                dims: 8
            }
        );
        let s: BlobSpec = "blobs:4classes:20:2dims".parse().unwrap();
        assert_eq!((s.classes, s.samples, s.dims), (4, 20, 2));
        assert_eq!(s.to_string().parse::<BlobSpec>().unwrap(), s);
        for bad in [
            "blob:3classes:10",
            "blobs:3:10",
            "blobs:3classes",
            "blobs:xclasses:1",
            "blobs:3classes:10:2",
        ] {
            assert!(bad.parse::<BlobSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn blobs_counts_and_labels() {
        let d = "blobs:3classes:1000"
            .parse::<BlobSpec>()
            .unwrap()
            .generate(5)
            .unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.feature_dim(), 8);
        let labels = d.labels().unwrap();
        assert!(labels.iter().all(|&l| l < 3));
        for c in 0..3 {
            assert!(labels.iter().filter(|&&l| l == c).count() >= 333);
        }
    }

    #[test]
    fn splits_share_centers() {
        let spec = BlobSpec {
            classes: 2,
            samples: 400,
            dims: 3,
        };
        let mean = |d: &Dataset, c: usize| -> Vec<f64> {
            let rows: Vec<&Vec<f64>> = d
                .inputs()
                .iter()
                .zip(d.labels().unwrap())
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x)
                .collect();
            (0..3)
                .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        let a = spec.generate(1).unwrap();
        let b = spec.generate(2).unwrap();
        assert_ne!(a.inputs(), b.inputs());
        for c in 0..2 {
            for (x, y) in mean(&a, c).iter().zip(mean(&b, c)) {
                assert!((x - y).abs() < 0.3);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = BlobSpec {
            classes: 3,
            samples: 50,
            dims: 4,
        };
        assert_eq!(
            spec.generate(9).unwrap().inputs(),
            spec.generate(9).unwrap().inputs()
        );
    }
}

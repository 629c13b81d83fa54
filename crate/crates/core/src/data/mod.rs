//! Datasets: synthetic generation, ISBI cephalometric ingestion, on-disk
//! storage and preprocessing.

pub mod isbi;
pub mod preprocess;
pub mod store;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Image, LandmarkSet};
use crate::error::{Error, Result};

pub use isbi::{load_isbi, parse_annotation, IsbiOptions};
pub use preprocess::{hist_equalize, pad_landmarks, resample, resample_landmarks, zero_pad};
pub use store::{load_dataset, save_dataset, Manifest};
pub use synth::{synth_generate, StructureKind, StructureSpec, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    /// Generation seed, for synthetic data.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>, seed: Option<u64>) -> Result<Self> {
        let ds = Self { items, seed };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else {
            return Ok(());
        };
        let mut ids = std::collections::HashSet::new();
        for item in &self.items {
            if item.landmarks.names != first.landmarks.names {
                return Err(Error::NameMismatch(format!(
                    "item {} has landmarks {:?}, expected {:?}",
                    item.id, item.landmarks.names, first.landmarks.names
                )));
            }
            if item.landmarks.dims() != item.image.dims() {
                return Err(Error::DimensionMismatch {
                    expected: item.image.dims(),
                    got: item.landmarks.dims(),
                });
            }
            if !ids.insert(item.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(())
    }

    pub fn landmark_names(&self) -> Vec<String> {
        self.items
            .first()
            .map(|i| i.landmarks.names.clone())
            .unwrap_or_default()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Randomly assign splits with the given fractions (train, validation;
    /// test receives the remainder). Counts are rounded to nearest.
    pub fn assign_splits(&mut self, train: f64, validation: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&train)
            || !(0.0..=1.0).contains(&validation)
            || train + validation > 1.0 + 1e-12
        {
            return Err(Error::InvalidConfig(format!(
                "invalid split fractions {train} / {validation}"
            )));
        }
        let n = self.items.len();
        let n_train = (train * n as f64).round() as usize;
        let n_val = ((validation * n as f64).round() as usize).min(n - n_train.min(n));
        self.assign_split_counts(n_train.min(n), n_val, seed)
    }

    /// Randomly assign exact split sizes; the rest becomes test data.
    pub fn assign_split_counts(&mut self, train: usize, validation: usize, seed: u64) -> Result<()> {
        let n = self.items.len();
        if train + validation > n {
            return Err(Error::InvalidConfig(format!(
                "{train} train + {validation} validation items exceed {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (rank, &i) in order.iter().enumerate() {
            self.items[i].split = if rank < train {
                Split::Train
            } else if rank < train + validation {
                Split::Validation
            } else {
                Split::Test
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| DatasetItem {
                id: format!("{i:04}"),
                image: Image::zeros(vec![2, 2], vec![1.0, 1.0]).unwrap(),
                landmarks: LandmarkSet::all_present(vec!["a".into()], vec![vec![0.0, 0.0]])
                    .unwrap(),
                split: Split::Train,
            })
            .collect();
        Dataset::new(items, None).unwrap()
    }

    #[test]
    fn split_fractions() {
        let mut ds = dummy(100);
        ds.assign_splits(0.7, 0.1, 1).unwrap();
        assert_eq!(
            (ds.count(Split::Train), ds.count(Split::Validation), ds.count(Split::Test)),
            (70, 10, 20)
        );
        let mut again = dummy(100);
        again.assign_splits(0.7, 0.1, 1).unwrap();
        assert_eq!(ds, again);
        assert!(ds.assign_splits(0.9, 0.2, 1).is_err());
    }

    #[test]
    fn mismatched_names_rejected() {
        let mut ds = dummy(2);
        ds.items[1].landmarks.names = vec!["b".into()];
        assert!(ds.validate().is_err());
        let mut ds = dummy(2);
        ds.items[1].id = ds.items[0].id.clone();
        assert!(ds.validate().is_err());
    }
}

//! Where a dataset came from, recorded so that it can be rebuilt.

use std::path::{Path, PathBuf};

use ossl_core::data::{
    generate_synthetic, load_cifar10_binary, make_open_set_split_with_test, write_dataset, DatasetManifest,
    OpenSetSplit, SyntheticConfig, CIFAR_ANIMAL_CLASSES,
};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Labeled samples per ID class for CIFAR imports, matching the 50-label setting.
pub const CIFAR_LABELED_PER_CLASS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Cifar10 {
        dir: PathBuf,
        id_classes: Vec<usize>,
        labeled_per_class: usize,
        seed: u64,
    },
}

impl DataSource {
    pub fn cifar(dir: PathBuf, id_classes: Option<Vec<usize>>, seed: u64) -> Self {
        DataSource::Cifar10 {
            dir,
            id_classes: id_classes.unwrap_or_else(|| CIFAR_ANIMAL_CLASSES.to_vec()),
            labeled_per_class: CIFAR_LABELED_PER_CLASS,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DataSource::Synthetic(c) => c.seed,
            DataSource::Cifar10 { seed, .. } => *seed,
        }
    }

    pub fn build(&self) -> CliResult<OpenSetSplit> {
        match self {
            DataSource::Synthetic(c) => {
                c.validate()?;
                Ok(generate_synthetic(c)?)
            }
            DataSource::Cifar10 {
                dir,
                id_classes,
                labeled_per_class,
                seed,
            } => {
                let mut train = Vec::new();
                for i in 1..=5 {
                    train.extend(load_cifar10_binary(batch(dir, &format!("data_batch_{i}.bin"))?)?);
                }
                let test = load_cifar10_binary(batch(dir, "test_batch.bin")?)?;
                Ok(make_open_set_split_with_test(train, test, id_classes, *labeled_per_class, *seed)?)
            }
        }
    }

    /// Builds the split and writes it to `dir`.
    pub fn materialize(&self, dir: &Path) -> CliResult<DatasetManifest> {
        let split = self.build()?;
        Ok(write_dataset(dir, &split, self.seed(), serde_json::to_value(self)?)?)
    }

    pub fn of_manifest(manifest: &DatasetManifest) -> CliResult<Self> {
        serde_json::from_value(manifest.source.clone())
            .map_err(|e| CliError::artifact(format!("dataset manifest has an unknown source: {e}")))
    }
}

fn batch(dir: &Path, name: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::usage(format!("CIFAR-10 batch {} not found", path.display())))
    }
}

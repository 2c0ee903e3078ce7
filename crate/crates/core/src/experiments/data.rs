use std::path::Path;

use crate::error::{Error, Result};
use crate::featurestore::{read_features, write_features, DatasetSpec, FeatureRecord};
use crate::trainer::DataSplits;

pub const TRAIN_DIR: &str = "train";
pub const DEV_DIR: &str = "dev";
pub const TEST_DIR: &str = "test";

/// Reads `train/`, `dev/` and the optional `test/` containers under `dir`.
pub fn load_splits(dir: &Path) -> Result<DataSplits> {
    let (spec, train) = read_features(&dir.join(TRAIN_DIR))?;
    let (dev_spec, dev) = read_features(&dir.join(DEV_DIR))?;
    let check = |other: &DatasetSpec, split: &str| -> Result<()> {
        if other != &spec {
            return Err(Error::data(format!("{split} split of {} has a different dataset spec than train", dir.display())));
        }
        Ok(())
    };
    check(&dev_spec, DEV_DIR)?;
    let test = if dir.join(TEST_DIR).exists() {
        let (test_spec, test) = read_features(&dir.join(TEST_DIR))?;
        check(&test_spec, TEST_DIR)?;
        Some(test)
    } else {
        None
    };
    Ok(DataSplits { spec, train, dev, test })
}

/// Writes the given record subsets as split containers under `dir`.
pub fn write_splits(dir: &Path, spec: &DatasetSpec, train: &[FeatureRecord], dev: &[FeatureRecord], test: Option<&[FeatureRecord]>) -> Result<()> {
    write_features(&dir.join(TRAIN_DIR), spec, train)?;
    write_features(&dir.join(DEV_DIR), spec, dev)?;
    if let Some(test) = test {
        write_features(&dir.join(TEST_DIR), spec, test)?;
    }
    Ok(())
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::usage(format!(
                "unknown split '{}', expected train, val or test",
                other
            ))),
        }
    }
}

/// Per-lesion partition of case ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn assignment(&self, case_id: &str) -> Option<SplitName> {
        [SplitName::Train, SplitName::Val, SplitName::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|c| c == case_id))
    }
}

/// Seeded shuffle followed by a contiguous partition. Train and validation
/// counts are `round(fraction · n)`; test takes the remainder.
pub fn split_dataset(case_ids: &[String], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::usage(format!(
            "split fractions must be in [0,1] and sum to 1, got {:?}",
            fractions
        )));
    }
    let n = case_ids.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::usage(format!(
            "{} cases cannot fill train/val/test with fractions {:?}",
            n, fractions
        )));
    }
    let mut ids = case_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit {
        train: ids,
        val,
        test,
        fractions,
        seed,
    })
}

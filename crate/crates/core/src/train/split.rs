//! Train / validation / test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac_of_train: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac_of_train: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train_frac", self.train_frac), ("val_frac_of_train", self.val_frac_of_train)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Contract(format!("{name} = {f} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Row indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Orders rows by timestamp when given (stable on ties), otherwise shuffles
/// them with `seed`; the test split is the tail, validation the tail of
/// what remains.
pub fn split(n: usize, timestamps: Option<&[i64]>, config: &SplitConfig, seed: u64) -> Result<Splits> {
    config.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    match timestamps {
        Some(ts) => {
            if ts.len() != n {
                return Err(Error::Data(format!("{} timestamps for {n} rows", ts.len())));
            }
            order.sort_by_key(|&i| ts[i]);
        }
        None => order.shuffle(&mut ModelRng::seed_from_u64(seed)),
    }
    let n_trainval = (n as f64 * config.train_frac).round() as usize;
    let n_val = (n_trainval as f64 * config.val_frac_of_train).round() as usize;
    let n_train = n_trainval.saturating_sub(n_val);
    if n_train == 0 || n_val == 0 || n_trainval >= n {
        return Err(Error::Data(format!(
            "{n} rows are too few for a train/val/test split"
        )));
    }
    Ok(Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_trainval].to_vec(),
        test: order[n_trainval..].to_vec(),
    })
}

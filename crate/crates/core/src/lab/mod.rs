//! Experiment runners, their configuration, and the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod grad_skew;
pub mod ham;
pub mod idx;
pub mod output;
pub mod train;

use std::path::PathBuf;

use crate::error::Result;
use crate::exec::Exec;
use crate::numerics::Rng;
use config::{DatasetKind, Experiment, ExperimentConfig};
use data::Dataset;

/// Runs the configured experiment and returns the files it wrote.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::GradSkew => grad_skew::run_grad_skew(cfg)?.write(cfg),
        Experiment::LnCheck => grad_skew::run_ln_check(cfg)?.write(cfg),
        Experiment::HamSim => ham::run_ham_sim(cfg)?.write(cfg),
        Experiment::DstTrain => train::run_dst_train(cfg)?.write(cfg),
        Experiment::ItopReport => train::run_itop_report(cfg)?.write(cfg),
    }
}

pub(crate) fn exec_of(cfg: &ExperimentConfig) -> Exec {
    Exec::from_flag(cfg.parallel)
}

/// Train and test sets for `cfg`. IDX files that cannot be read fall back to
/// synthetic Gaussian data with a warning. Without test files the test set
/// is carved off the end of the training set.
pub fn load_datasets(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let synthetic = |rng: &mut Rng| -> Result<(Dataset, Dataset)> {
        let n = cfg.samples + cfg.test_samples;
        let all = match cfg.dataset {
            DatasetKind::SyntheticClassification => {
                data::synth_classification(n, cfg.input_dim, cfg.classes, cfg.class_std, rng)?
            }
            _ => data::synthetic_gaussian(n, cfg.input_dim, cfg.classes, rng),
        };
        Ok(split(all, cfg.samples))
    };
    if cfg.dataset != DatasetKind::IdxFiles {
        return synthetic(rng);
    }
    let (Some(img), Some(lab)) = (&cfg.train_images, &cfg.train_labels) else {
        log::warn!("idx-files selected without train_images/train_labels; using synthetic data");
        return synthetic(rng);
    };
    let train = match idx::load_idx(img, lab) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("{e}; using synthetic data");
            return synthetic(rng);
        }
    };
    if let (Some(ti), Some(tl)) = (&cfg.test_images, &cfg.test_labels) {
        if let Ok(test) = idx::load_idx(ti, tl) {
            return Ok((train, test));
        }
        log::warn!("test idx files unreadable; splitting the training set");
    }
    let keep = train.len().saturating_sub(cfg.test_samples.min(train.len() / 2));
    Ok(split(train, keep))
}

fn split(all: Dataset, n_train: usize) -> (Dataset, Dataset) {
    let n = all.len();
    let train_idx: Vec<usize> = (0..n_train.min(n)).collect();
    let test_idx: Vec<usize> = (n_train.min(n)..n).collect();
    let (xa, la) = all.subset(&train_idx);
    let (xb, lb) = all.subset(&test_idx);
    (
        Dataset { x: xa, labels: la, classes: all.classes },
        Dataset { x: xb, labels: lb, classes: all.classes },
    )
}

/// FNV-1a over the bit patterns of `values`.
pub fn hash_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

//! Desk-scale dynamic sparse training and the ITOP comparison.

use std::path::PathBuf;
use std::time::Instant;

use crate::dst::{mask_update, DstMethod, ItopTracker, MaskUpdateEvent, RegrowSource};
use crate::error::{LabError, Result};
use crate::lab::config::ExperimentConfig;
use crate::lab::output::{cell, line_chart, write_text, Series, Table};
use crate::lab::{exec_of, hash_f64s, load_datasets};
use crate::nn::{accuracy, Mlp, Normalization, Targets};
use crate::numerics::Rng;
use crate::optim::Optimizer;
use crate::sparsity::{erk_densities, neuron_sparsities, random_mask, InitScheme, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub active: usize,
    pub s_mean: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl LayerStats {
    pub fn of(mask: &Mask) -> Self {
        let s = neuron_sparsities(mask);
        LayerStats {
            active: mask.active_count(),
            s_mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
            s_min: s.iter().copied().fold(f64::INFINITY, f64::min),
            s_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Rate used on the epoch's last step.
    pub lr: f64,
    pub itop_rate: f64,
    pub layers: Vec<LayerStats>,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

/// Hashes around one mask update: parameters just before it and masks just after.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: usize,
    pub params_hash: u64,
    pub masks_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub name: String,
    pub initial_density: f64,
    pub records: Vec<EpochRecord>,
    pub events: Vec<MaskUpdateEvent>,
    pub trace: Vec<TraceEntry>,
    pub wall_time: bool,
    pub svg: bool,
}

fn params_hash(model: &mut Mlp) -> u64 {
    let params = model.params_mut();
    hash_f64s(params.iter().flat_map(|p| p.values.iter()))
}

fn masks_hash(model: &Mlp) -> u64 {
    let mut h: u64 = 0;
    for l in model.linear_indices() {
        h = h.rotate_left(17) ^ model.linear(l).expect("linear index").mask().fingerprint();
    }
    h
}

fn masks(model: &Mlp) -> Vec<Mask> {
    model
        .linear_indices()
        .into_iter()
        .map(|l| model.linear(l).expect("linear index").mask().clone())
        .collect()
}

/// ERK-allocated random masks for `widths` at global sparsity `sparsity`.
pub fn erk_masks(widths: &[usize], sparsity: f64, rng: &mut Rng) -> Result<Vec<Mask>> {
    let dims: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[0], w[1])).collect();
    let densities = erk_densities(&dims, sparsity)?;
    dims.iter()
        .zip(densities)
        .map(|(&(i, o), d)| if d >= 1.0 { Ok(Mask::ones(o, i)) } else { random_mask(o, i, d, rng) })
        .collect()
}

/// One full training run under `cfg`, labelled `name`.
pub fn train(cfg: &ExperimentConfig, name: &str) -> Result<TrainRun> {
    let mut data_rng = Rng::new(Rng::derive_seed(cfg.seed, 1));
    let mut model_rng = Rng::new(Rng::derive_seed(cfg.seed, 2));
    let mut dst_rng = Rng::new(Rng::derive_seed(cfg.seed, 3));
    let mut batch_rng = Rng::new(Rng::derive_seed(cfg.seed, 4));

    let (train, test) = load_datasets(cfg, &mut data_rng)?;
    let classes = train.classes.max(cfg.classes);
    let mut widths = vec![train.dim()];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let init_masks = erk_masks(&widths, cfg.sparsity, &mut model_rng)?;
    let total: usize = init_masks.iter().map(Mask::len).sum();
    let initial_density = init_masks.iter().map(Mask::active_count).sum::<usize>() as f64 / total as f64;
    let mut model = Mlp::classifier(&widths, cfg.normalization, init_masks, InitScheme::DenseKaiming, &mut model_rng)?;

    let mut opt = Optimizer::new(cfg.optimizer.kind, cfg.momentum, cfg.weight_decay);
    opt.ham_alpha = cfg.optimizer.ham.then_some(cfg.ham_alpha);
    opt.renormalize = cfg.renormalize_grads;
    let schedule = cfg.lr_schedule()?;
    let dst = cfg.dst();

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut tracker = ItopTracker::new();
    tracker.observe_model(&model)?;

    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut trace = Vec::new();
    let mut step = 0usize;
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in train.epoch_batches(cfg.batch_size, &mut batch_rng) {
            if idx.len() < 2 && cfg.normalization == Normalization::BatchNorm {
                continue;
            }
            let (x, y) = train.subset(&idx);
            lr = match &schedule {
                Some(s) => s.lr_at(step as f64 / steps_per_epoch as f64, cfg.batch_size),
                None => cfg.lr,
            };
            let (loss, mut grads) = model.forward_backward(&x, Targets::Labels(&y))?;
            if !loss.is_finite() {
                return Err(LabError::NonFinite { step });
            }
            {
                let mut params = model.params_mut();
                let mut g = grads.slices_mut();
                opt.step(&mut params, &mut g, lr)?;
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            step += 1;
            if dst.is_update_step(step, total_steps) {
                let params_hash = params_hash(&mut model);
                let ev = mask_update(&mut model, &grads, &dst, step, total_steps, &mut dst_rng, Some(&mut opt))?;
                tracker.observe_model(&model)?;
                trace.push(TraceEntry { step, params_hash, masks_hash: masks_hash(&model) });
                events.extend(ev);
            }
        }
        let train_acc = accuracy(&model.predict(&train.x)?, &train.labels);
        let test_acc = if test.is_empty() { f64::NAN } else { accuracy(&model.predict(&test.x)?, &test.labels) };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc,
            test_acc,
            lr,
            itop_rate: tracker.rate(),
            layers: masks(&model).iter().map(LayerStats::of).collect(),
            wall_time: start.elapsed().as_secs_f64(),
        });
        log::info!("{name} epoch {epoch}: loss {:.4} test acc {:.4}", loss_sum / seen.max(1) as f64, test_acc);
    }
    Ok(TrainRun {
        name: name.to_string(),
        initial_density,
        records,
        events,
        trace,
        wall_time: cfg.wall_time,
        svg: cfg.svg,
    })
}

pub fn run_dst_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    train(cfg, "dst_train")
}

impl TrainRun {
    /// First epoch whose mean training loss is at most `threshold`.
    pub fn epochs_to_loss(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.train_loss <= threshold).map(|r| r.epoch)
    }

    pub fn final_test_acc(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.test_acc)
    }

    pub fn record_table(&self) -> Table {
        let mut header: Vec<String> = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "itop_rate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let n_layers = self.records.first().map_or(0, |r| r.layers.len());
        for l in 0..n_layers {
            for f in ["active", "s_mean", "s_min", "s_max"] {
                header.push(format!("layer{l}_{f}"));
            }
        }
        if self.wall_time {
            header.push("wall_time".into());
        }
        let mut t = Table::with_header(header);
        for r in &self.records {
            let mut row = vec![
                cell(r.epoch),
                cell(r.train_loss),
                cell(r.train_acc),
                cell(r.test_acc),
                cell(r.lr),
                cell(r.itop_rate),
            ];
            for s in &r.layers {
                row.extend([cell(s.active), cell(s.s_mean), cell(s.s_min), cell(s.s_max)]);
            }
            if self.wall_time {
                row.push(cell(r.wall_time));
            }
            t.push(row);
        }
        t
    }

    pub fn event_table(&self) -> Table {
        let mut t = Table::new(&["step", "layer", "dropped", "grown", "repaired_rows", "s_min", "s_max", "s_mean"]);
        for e in &self.events {
            let (min, max, mean) = e.s_summary();
            t.push(vec![
                cell(e.step),
                cell(e.layer),
                cell(e.dropped),
                cell(e.grown),
                cell(e.repaired_rows),
                cell(min),
                cell(max),
                cell(mean),
            ]);
        }
        t
    }

    pub fn trace_table(&self) -> Table {
        let mut t = Table::new(&["step", "params_hash", "masks_hash"]);
        for e in &self.trace {
            t.push(vec![cell(e.step), format!("{:016x}", e.params_hash), format!("{:016x}", e.masks_hash)]);
        }
        t
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let files = vec![
            cfg.out.join(format!("{}.csv", self.name)),
            cfg.out.join(format!("{}_events.csv", self.name)),
            cfg.out.join(format!("{}_trace.csv", self.name)),
        ];
        self.record_table().write(&files[0])?;
        self.event_table().write(&files[1])?;
        self.trace_table().write(&files[2])?;
        let mut files = files;
        if self.svg {
            let p = cfg.out.join(format!("{}.svg", self.name));
            let pts = |f: fn(&EpochRecord) -> f64| self.records.iter().map(|r| (r.epoch as f64, f(r))).collect();
            let svg = line_chart(
                &self.name,
                "epoch",
                "value",
                &[
                    Series { name: "train loss", points: pts(|r| r.train_loss) },
                    Series { name: "test acc", points: pts(|r| r.test_acc) },
                    Series { name: "ITOP rate", points: pts(|r| r.itop_rate) },
                ],
            );
            write_text(&p, &svg)?;
            files.push(p);
        }
        Ok(files)
    }
}

/// First update step at which two runs, identical in parameters up to that
/// update, end up with different masks.
pub fn first_mask_divergence(a: &TrainRun, b: &TrainRun) -> Option<usize> {
    for (x, y) in a.trace.iter().zip(&b.trace) {
        if x.step != y.step || x.params_hash != y.params_hash {
            return None;
        }
        if x.masks_hash != y.masks_hash {
            return Some(x.step);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItopReport {
    pub runs: Vec<TrainRun>,
    /// Update step where RigL with the corrected regrow source first departs from the original.
    pub regrow_divergence: Option<usize>,
    pub svg: bool,
}

pub const ITOP_RUNS: [(&str, DstMethod, RegrowSource); 3] = [
    ("set", DstMethod::Set, RegrowSource::Original),
    ("rigl_original", DstMethod::Rigl, RegrowSource::Original),
    ("rigl_corrected", DstMethod::Rigl, RegrowSource::Corrected),
];

pub fn run_itop_report(cfg: &ExperimentConfig) -> Result<ItopReport> {
    let runs = exec_of(cfg).map(ITOP_RUNS.to_vec(), |(name, method, source)| {
        let mut c = cfg.clone();
        c.dst_method = method;
        c.regrow_source = source;
        train(&c, name)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let regrow_divergence = first_mask_divergence(&runs[1], &runs[2]);
    Ok(ItopReport { runs, regrow_divergence, svg: cfg.svg })
}

impl ItopReport {
    pub fn curve_table(&self) -> Table {
        let mut t = Table::new(&["run", "epoch", "itop_rate", "train_loss", "test_acc"]);
        for r in &self.runs {
            for e in &r.records {
                t.push(vec![cell(&r.name), cell(e.epoch), cell(e.itop_rate), cell(e.train_loss), cell(e.test_acc)]);
            }
        }
        t
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&["run", "initial_density", "final_itop_rate", "final_test_acc", "mask_updates", "first_divergence_step"]);
        for r in &self.runs {
            let div = match (r.name.as_str(), self.regrow_divergence) {
                ("rigl_corrected", Some(s)) => cell(s),
                _ => String::new(),
            };
            t.push(vec![
                cell(&r.name),
                cell(r.initial_density),
                cell(r.records.last().map_or(f64::NAN, |e| e.itop_rate)),
                cell(r.final_test_acc()),
                cell(r.trace.len()),
                div,
            ]);
        }
        t
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let mut files = vec![cfg.out.join("itop_report.csv"), cfg.out.join("itop_summary.csv")];
        self.curve_table().write(&files[0])?;
        self.summary_table().write(&files[1])?;
        if self.svg {
            let series: Vec<Series<'_>> = self
                .runs
                .iter()
                .map(|r| Series { name: &r.name, points: r.records.iter().map(|e| (e.epoch as f64, e.itop_rate)).collect() })
                .collect();
            let p = cfg.out.join("itop_report.svg");
            write_text(&p, &line_chart("ITOP rate", "epoch", "R_m", &series))?;
            files.push(p);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::Experiment;
    use crate::optim::OptimizerKind;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::for_experiment(Experiment::DstTrain);
        c.samples = 256;
        c.test_samples = 64;
        c.hidden = vec![32];
        c.epochs = 3;
        c.batch_size = 32;
        c.update_every = 5;
        c.warmup_epochs = 1.0;
        c
    }

    #[test]
    fn active_counts_constant_and_itop_monotone() {
        let r = run_dst_train(&small()).unwrap();
        assert_eq!(r.records.len(), 3);
        assert!(!r.events.is_empty());
        let first: Vec<usize> = r.records[0].layers.iter().map(|l| l.active).collect();
        for w in r.records.windows(2) {
            assert!(w[1].itop_rate >= w[0].itop_rate);
            assert_eq!(w[1].layers.iter().map(|l| l.active).collect::<Vec<_>>(), first);
        }
        assert!(r.records.last().unwrap().itop_rate > r.initial_density);
    }

    #[test]
    fn dense_sgd_and_sparseopt_agree() {
        let mut c = small();
        c.sparsity = 0.0;
        c.optimizer.kind = OptimizerKind::Sgd;
        let a = run_dst_train(&c).unwrap();
        c.optimizer.kind = OptimizerKind::SparseOpt;
        let b = run_dst_train(&c).unwrap();
        assert_eq!(a.record_table(), b.record_table());
    }

    #[test]
    fn nan_aborts_with_step() {
        let mut c = small();
        c.lr = 1e300;
        c.schedule = "constant".parse().unwrap();
        c.momentum = 0.0;
        match run_dst_train(&c) {
            Err(LabError::NonFinite { step }) => assert!(step < 3 * 8),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn erk_masks_hit_target() {
        let m = erk_masks(&[32, 64, 64, 8], 0.9, &mut Rng::new(0)).unwrap();
        let total: usize = m.iter().map(Mask::len).sum();
        let active: usize = m.iter().map(Mask::active_count).sum();
        assert!((active as f64 / total as f64 - 0.1).abs() < 0.01);
    }
}

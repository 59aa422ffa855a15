//! First-layer gradient magnitudes of sparse vs dense two-layer MLPs at
//! initialisation, with BatchNorm, LayerNorm or no normalisation.

use std::path::PathBuf;

use crate::error::{LabError, Result};
use crate::lab::config::ExperimentConfig;
use crate::lab::output::{cell, line_chart, write_text, Series, Table};
use crate::lab::{exec_of, load_datasets};
use crate::nn::{BatchNorm, Layer, LayerNorm, Mlp, Normalization, SparseLinear, Targets};
use crate::numerics::{Matrix, Rng};
use crate::sparsity::{build_preconditioner, init_weights, uniform_fan_in_mask, InitScheme, Mask};

/// Shared initialisation and batches for every model in one sweep.
#[derive(Clone, Debug)]
pub struct Probe {
    pub w1: Matrix,
    pub w2: Matrix,
    pub batches: Vec<(Matrix, Vec<usize>)>,
}

impl Probe {
    /// Two-layer probe `input → hidden[0] → classes` on `cfg`'s dataset.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 0));
        let mut c = cfg.clone();
        c.samples = cfg.batches * cfg.batch_size;
        c.test_samples = 0;
        let (train, _) = load_datasets(&c, &mut rng)?;
        if train.len() < cfg.batch_size {
            return Err(LabError::InvalidArgument(format!(
                "dataset has {} samples, batch size is {}",
                train.len(),
                cfg.batch_size
            )));
        }
        let hidden = *cfg.hidden.first().unwrap_or(&64);
        let classes = train.classes.max(cfg.classes);
        let w1 = init_weights(&Mask::ones(hidden, train.dim()), InitScheme::DenseKaiming, &mut rng);
        let w2 = init_weights(&Mask::ones(classes, hidden), InitScheme::DenseKaiming, &mut rng);
        let batches = (0..cfg.batches)
            .map(|b| {
                let idx: Vec<usize> = if train.len() == cfg.batches * cfg.batch_size {
                    (b * cfg.batch_size..(b + 1) * cfg.batch_size).collect()
                } else {
                    rng.sample_indices(train.len(), cfg.batch_size)
                };
                train.subset(&idx)
            })
            .collect();
        Ok(Probe { w1, w2, batches })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn model(&self, norm: Normalization, mask: Mask) -> Result<Mlp> {
        let h = self.hidden();
        let mut layers = vec![Layer::Linear(SparseLinear::new(self.w1.clone(), mask, None)?)];
        match norm {
            Normalization::BatchNorm => layers.push(Layer::BatchNorm(BatchNorm::new(h))),
            Normalization::LayerNorm => layers.push(Layer::LayerNorm(LayerNorm::new(h))),
            Normalization::None => {}
        }
        layers.push(Layer::Relu);
        layers.push(Layer::Linear(SparseLinear::dense(self.w2.clone())));
        Ok(Mlp::new(layers))
    }

    /// `Σ_batches |∂L/∂W1|` elementwise, with no parameter updates.
    pub fn abs_grad_sum(&self, norm: Normalization, mask: &Mask) -> Result<Matrix> {
        let mut model = self.model(norm, mask.clone())?;
        let mut acc = Matrix::zeros(self.hidden(), self.input_dim());
        for (x, y) in &self.batches {
            let (_, g) = model.forward_backward(x, Targets::Labels(y))?;
            let g1 = g.linear(0).expect("first layer is linear");
            for (a, v) in acc.data_mut().iter_mut().zip(g1.d_weights.data()) {
                *a += v.abs();
            }
        }
        Ok(acc)
    }
}

/// Mean of `abs` over the active entries of `mask`.
pub fn masked_mean(abs: &Matrix, mask: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (i, v) in abs.data().iter().enumerate() {
        if mask.is_active_flat(i) {
            s += v;
            n += 1;
        }
    }
    s / n.max(1) as f64
}

/// Per-row mean of `abs` over active entries; `NaN` for empty rows.
pub fn row_means(abs: &Matrix, mask: &Mask) -> Vec<f64> {
    (0..abs.rows())
        .map(|r| {
            let (mut s, mut n) = (0.0, 0usize);
            for (c, v) in abs.row(r).iter().enumerate() {
                if mask.is_active(r, c) {
                    s += v;
                    n += 1;
                }
            }
            if n == 0 { f64::NAN } else { s / n as f64 }
        })
        .collect()
}

/// The common fan-in of every row, or an error if rows differ.
pub fn uniform_fan_in(mask: &Mask) -> Result<usize> {
    let f = mask.fan_in();
    match f.first() {
        Some(&first) if f.iter().all(|&x| x == first) => Ok(first),
        _ => Err(LabError::InvalidArgument(format!(
            "mask fan-in is not uniform across neurons (min {}, max {})",
            f.iter().min().copied().unwrap_or(0),
            f.iter().max().copied().unwrap_or(0)
        ))),
    }
}

fn fan_in_for(s: f64, cols: usize) -> usize {
    (((1.0 - s) * cols as f64).round() as usize).clamp(1, cols)
}

/// Row `r` gets sparsity `levels[r % levels.len()]` at random positions.
pub fn mixed_fan_in_mask(rows: usize, cols: usize, levels: &[f64], rng: &mut Rng) -> Result<Mask> {
    if levels.is_empty() {
        return Err(LabError::InvalidArgument("no sparsity levels".into()));
    }
    let mut mask = Mask::zeros(rows, cols);
    for r in 0..rows {
        for c in rng.sample_indices(cols, fan_in_for(levels[r % levels.len()], cols)) {
            mask.set(r, c, true);
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkewPoint {
    /// Requested sparsity.
    pub s: f64,
    /// `1 − fan_in / in_features` after rounding the fan-in.
    pub s_actual: f64,
    pub theory: f64,
    pub ratio_bn: f64,
    pub ratio_no_bn: f64,
    pub ratio_bn_preconditioned: f64,
    pub neuron_ratio_bn: Vec<f64>,
}

/// Per-bin mean-abs gradient under a mixed-sparsity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBin {
    pub s: f64,
    pub neurons: usize,
    pub raw: f64,
    pub preconditioned: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSkewReport {
    pub points: Vec<SkewPoint>,
    pub mixed: Vec<MixedBin>,
    pub spread_raw: f64,
    pub spread_preconditioned: f64,
    pub svg: bool,
}

fn spread(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = values.fold(f64::INFINITY, f64::min);
    max / min
}

/// Sweeps `cfg.sparsity_grid` and the `cfg.mixed_sparsity` layout.
pub fn run_grad_skew(cfg: &ExperimentConfig) -> Result<GradSkewReport> {
    let probe = Probe::from_config(cfg)?;
    let exec = exec_of(cfg);
    let (h, d) = (probe.hidden(), probe.input_dim());
    let ones = Mask::ones(h, d);

    let dense = exec.map(vec![Normalization::BatchNorm, Normalization::None], |n| probe.abs_grad_sum(n, &ones));
    let mut dense = dense.into_iter();
    let dense_bn = dense.next().expect("two runs")?;
    let dense_plain = dense.next().expect("two runs")?;

    let tasks: Vec<(usize, f64)> = cfg.sparsity_grid.iter().copied().enumerate().collect();
    let points = exec.map(tasks, |(i, s)| -> Result<SkewPoint> {
        let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 100 + i as u64));
        let fan = fan_in_for(s, d);
        let mask = uniform_fan_in_mask(h, d, fan, &mut rng)?;
        let bn = probe.abs_grad_sum(Normalization::BatchNorm, &mask)?;
        let plain = probe.abs_grad_sum(Normalization::None, &mask)?;
        let pc = build_preconditioner(&mask)?;
        let mut pre = bn.clone();
        pc.apply_in_place(pre.data_mut())?;
        let base_bn = masked_mean(&dense_bn, &mask);
        let s_actual = 1.0 - fan as f64 / d as f64;
        let neuron_ratio_bn = row_means(&bn, &mask)
            .into_iter()
            .zip(row_means(&dense_bn, &mask))
            .map(|(a, b)| a / b)
            .collect();
        Ok(SkewPoint {
            s,
            s_actual,
            theory: (1.0 - s_actual).powf(-0.5),
            ratio_bn: masked_mean(&bn, &mask) / base_bn,
            ratio_no_bn: masked_mean(&plain, &mask) / masked_mean(&dense_plain, &mask),
            ratio_bn_preconditioned: masked_mean(&pre, &mask) / base_bn,
            neuron_ratio_bn,
        })
    });
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;

    let (mixed, spread_raw, spread_preconditioned) = if cfg.mixed_sparsity.is_empty() {
        (Vec::new(), f64::NAN, f64::NAN)
    } else {
        mixed_spread(&probe, &cfg.mixed_sparsity, cfg.seed)?
    };
    Ok(GradSkewReport { points, mixed, spread_raw, spread_preconditioned, svg: cfg.svg })
}

/// BN gradients under a mask whose rows cycle through `levels`. Neurons are
/// binned by sparsity; returns the bins and the max/min spread of bin means
/// before and after preconditioning.
pub fn mixed_spread(probe: &Probe, levels: &[f64], seed: u64) -> Result<(Vec<MixedBin>, f64, f64)> {
    let mut rng = Rng::new(Rng::derive_seed(seed, 99));
    let mask = mixed_fan_in_mask(probe.hidden(), probe.input_dim(), levels, &mut rng)?;
    let raw = probe.abs_grad_sum(Normalization::BatchNorm, &mask)?;
    let mut pre = raw.clone();
    build_preconditioner(&mask)?.apply_in_place(pre.data_mut())?;
    let (raw_rows, pre_rows) = (row_means(&raw, &mask), row_means(&pre, &mask));
    let mut bins: Vec<MixedBin> = Vec::new();
    for &s in levels {
        if bins.iter().any(|b| b.s == s) {
            continue;
        }
        let rows: Vec<usize> = (0..probe.hidden()).filter(|r| levels[r % levels.len()] == s).collect();
        let mean = |v: &[f64]| rows.iter().map(|&r| v[r]).sum::<f64>() / rows.len().max(1) as f64;
        bins.push(MixedBin { s, neurons: rows.len(), raw: mean(&raw_rows), preconditioned: mean(&pre_rows) });
    }
    let sr = spread(bins.iter().map(|b| b.raw));
    let sp = spread(bins.iter().map(|b| b.preconditioned));
    Ok((bins, sr, sp))
}

impl GradSkewReport {
    pub fn grid_table(&self) -> Table {
        let mut t = Table::new(&["s", "s_actual", "theory", "ratio_bn", "ratio_no_bn", "ratio_bn_preconditioned"]);
        for p in &self.points {
            t.push(vec![
                cell(p.s),
                cell(p.s_actual),
                cell(p.theory),
                cell(p.ratio_bn),
                cell(p.ratio_no_bn),
                cell(p.ratio_bn_preconditioned),
            ]);
        }
        t
    }

    pub fn neuron_table(&self) -> Table {
        let mut t = Table::new(&["s", "neuron", "ratio_bn"]);
        for p in &self.points {
            for (i, r) in p.neuron_ratio_bn.iter().enumerate() {
                t.push(vec![cell(p.s), cell(i), cell(r)]);
            }
        }
        t
    }

    pub fn mixed_table(&self) -> Table {
        let mut t = Table::new(&["s", "neurons", "mean_abs_grad", "mean_abs_grad_preconditioned"]);
        for b in &self.mixed {
            t.push(vec![cell(b.s), cell(b.neurons), cell(b.raw), cell(b.preconditioned)]);
        }
        t
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let out = &cfg.out;
        let mut files = vec![out.join("grad_skew.csv"), out.join("grad_skew_neurons.csv"), out.join("grad_skew_mixed.csv")];
        self.grid_table().write(&files[0])?;
        self.neuron_table().write(&files[1])?;
        self.mixed_table().write(&files[2])?;
        if self.svg {
            let pts = |f: fn(&SkewPoint) -> f64| self.points.iter().map(|p| (p.s, f(p))).collect();
            let svg = line_chart(
                "first-layer gradient ratio, sparse / dense",
                "sparsity",
                "ratio",
                &[
                    Series { name: "theory", points: pts(|p| p.theory) },
                    Series { name: "batchnorm", points: pts(|p| p.ratio_bn) },
                    Series { name: "no norm", points: pts(|p| p.ratio_no_bn) },
                    Series { name: "preconditioned", points: pts(|p| p.ratio_bn_preconditioned) },
                ],
            );
            let p = out.join("grad_skew.svg");
            write_text(&p, &svg)?;
            files.push(p);
        }
        Ok(files)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnPoint {
    pub s: f64,
    pub s_actual: f64,
    pub theory: f64,
    pub ratio_ln: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnCheckReport {
    pub points: Vec<LnPoint>,
    pub svg: bool,
}

/// Active-entry gradient ratio of a LayerNorm probe under `mask` against the
/// dense sum `dense_abs`. Masks with unequal fan-in are rejected.
pub fn ln_ratio(probe: &Probe, mask: &Mask, dense_abs: &Matrix) -> Result<f64> {
    uniform_fan_in(mask)?;
    let sparse = probe.abs_grad_sum(Normalization::LayerNorm, mask)?;
    Ok(masked_mean(&sparse, mask) / masked_mean(dense_abs, mask))
}

pub fn run_ln_check(cfg: &ExperimentConfig) -> Result<LnCheckReport> {
    let probe = Probe::from_config(cfg)?;
    let (h, d) = (probe.hidden(), probe.input_dim());
    let dense = probe.abs_grad_sum(Normalization::LayerNorm, &Mask::ones(h, d))?;
    let tasks: Vec<(usize, f64)> = cfg.sparsity_grid.iter().copied().enumerate().collect();
    let points = exec_of(cfg).map(tasks, |(i, s)| -> Result<LnPoint> {
        let mut rng = Rng::new(Rng::derive_seed(cfg.seed, 100 + i as u64));
        let fan = fan_in_for(s, d);
        let mask = uniform_fan_in_mask(h, d, fan, &mut rng)?;
        let s_actual = 1.0 - fan as f64 / d as f64;
        Ok(LnPoint { s, s_actual, theory: (1.0 - s_actual).powf(-0.5), ratio_ln: ln_ratio(&probe, &mask, &dense)? })
    });
    Ok(LnCheckReport { points: points.into_iter().collect::<Result<_>>()?, svg: cfg.svg })
}

impl LnCheckReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(&["s", "s_actual", "theory", "ratio_ln"]);
        for p in &self.points {
            t.push(vec![cell(p.s), cell(p.s_actual), cell(p.theory), cell(p.ratio_ln)]);
        }
        t
    }

    pub fn write(&self, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
        let mut files = vec![cfg.out.join("ln_check.csv")];
        self.table().write(&files[0])?;
        if self.svg {
            let svg = line_chart(
                "LayerNorm gradient ratio, sparse / dense",
                "sparsity",
                "ratio",
                &[
                    Series { name: "theory", points: self.points.iter().map(|p| (p.s, p.theory)).collect() },
                    Series { name: "layernorm", points: self.points.iter().map(|p| (p.s, p.ratio_ln)).collect() },
                ],
            );
            let p = cfg.out.join("ln_check.svg");
            write_text(&p, &svg)?;
            files.push(p);
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::config::Experiment;

    fn small(e: Experiment) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_experiment(e);
        c.input_dim = 64;
        c.hidden = vec![16];
        c.batches = 4;
        c.batch_size = 16;
        c.sparsity_grid = vec![0.0, 0.5];
        c
    }

    #[test]
    fn zero_sparsity_is_exactly_one() {
        let r = run_grad_skew(&small(Experiment::GradSkew)).unwrap();
        let p = &r.points[0];
        assert_eq!(p.s_actual, 0.0);
        assert!((p.ratio_bn - 1.0).abs() < 1e-12, "{}", p.ratio_bn);
        assert!((p.ratio_no_bn - 1.0).abs() < 1e-12);
        assert!((p.ratio_bn_preconditioned - 1.0).abs() < 1e-12);
        assert_eq!(r.mixed.len(), 2);
        assert_eq!(r.mixed.iter().map(|b| b.neurons).sum::<usize>(), 16);
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut c = small(Experiment::GradSkew);
        let a = run_grad_skew(&c).unwrap();
        c.parallel = false;
        assert_eq!(a, run_grad_skew(&c).unwrap());
    }

    #[test]
    fn ln_rejects_uneven_fan_in() {
        let c = small(Experiment::LnCheck);
        let probe = Probe::from_config(&c).unwrap();
        let dense = probe.abs_grad_sum(Normalization::LayerNorm, &Mask::ones(16, 64)).unwrap();
        let mask = mixed_fan_in_mask(16, 64, &[0.0, 0.5], &mut Rng::new(1)).unwrap();
        assert!(ln_ratio(&probe, &mask, &dense).is_err());
        let r = run_ln_check(&c).unwrap();
        assert!((r.points[0].ratio_ln - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_mask_levels() {
        let m = mixed_fan_in_mask(4, 8, &[0.0, 0.75], &mut Rng::new(0)).unwrap();
        assert_eq!(m.fan_in(), vec![8, 2, 8, 2]);
        assert_eq!(uniform_fan_in(&Mask::ones(3, 5)).unwrap(), 5);
    }
}

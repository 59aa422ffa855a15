//! SGD with momentum, the sparsity-aware preconditioned update, the HAM
//! metric step, global gradient renormalisation and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{LabError, Result};
use crate::sparsity::{build_preconditioner, Mask, Preconditioner};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    /// Only weight matrices feel the HAM metric.
    pub fn uses_metric(self) -> bool {
        self == ParamKind::Weight
    }
}

/// A mutable flat view of one parameter tensor.
#[derive(Debug)]
pub struct Param<'a> {
    pub layer: usize,
    pub kind: ParamKind,
    pub values: &'a mut [f64],
    /// Present for weights of linear layers.
    pub mask: Option<&'a Mask>,
}

/// Momentum buffers, one per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    buffers: Vec<Vec<f64>>,
    step: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes buffer entries that `mask` deactivates.
    pub fn remask(&mut self, index: usize, mask: &Mask) -> Result<()> {
        let Some(buf) = self.buffers.get_mut(index) else {
            return Ok(());
        };
        if buf.len() != mask.len() {
            return Err(LabError::shape("OptState::remask", buf.len(), mask.len()));
        }
        mask.apply(buf);
        Ok(())
    }

    fn ensure(&mut self, params: &[Param<'_>]) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
            return Ok(());
        }
        if self.buffers.len() != params.len() {
            return Err(LabError::shape("optimizer state", self.buffers.len(), params.len()));
        }
        for (b, p) in self.buffers.iter().zip(params) {
            if b.len() != p.values.len() {
                return Err(LabError::shape("optimizer state", b.len(), p.values.len()));
            }
        }
        Ok(())
    }
}

/// Preconditioners for the sparse weight matrices, keyed by layer index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preconditioners(BTreeMap<usize, Preconditioner>);

impl Preconditioners {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds one preconditioner per masked weight parameter.
    pub fn for_params(params: &[Param<'_>]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for p in params {
            if let (ParamKind::Weight, Some(mask)) = (p.kind, p.mask) {
                map.insert(p.layer, build_preconditioner(mask)?);
            }
        }
        Ok(Preconditioners(map))
    }

    pub fn get(&self, layer: usize) -> Option<&Preconditioner> {
        self.0.get(&layer)
    }

    pub fn rebuild(&mut self, layer: usize, mask: &Mask) -> Result<()> {
        self.0.insert(layer, build_preconditioner(mask)?);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Preconditioner)> {
        self.0.iter().map(|(&k, v)| (k, v))
    }
}

struct StepRule<'a> {
    eta: f64,
    momentum: f64,
    weight_decay: f64,
    alpha: Option<f64>,
    preconditioners: Option<&'a Preconditioners>,
}

fn check_grads(params: &[Param<'_>], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(LabError::shape("optimizer step", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.len() {
            return Err(LabError::shape("optimizer step", p.values.len(), g.len()));
        }
    }
    Ok(())
}

fn apply_rule(params: &mut [Param<'_>], grads: &[&[f64]], mut buffers: Option<&mut [Vec<f64>]>, rule: &StepRule<'_>) -> Result<()> {
    check_grads(params, grads)?;
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let pre = match (rule.preconditioners, p.kind, p.mask) {
            (Some(pc), ParamKind::Weight, Some(mask)) => {
                let pre = pc.get(p.layer).ok_or(LabError::StalePreconditioner)?;
                if !pre.matches(mask) {
                    return Err(LabError::StalePreconditioner);
                }
                Some(pre)
            }
            _ => None,
        };
        let cols = p.mask.map_or(1, |m| m.cols().max(1));
        let metric = rule.alpha.filter(|_| p.kind.uses_metric());
        let mut buf = buffers.as_mut().map(|b| b[idx].as_mut_slice());
        for j in 0..p.values.len() {
            if let Some(mask) = p.mask {
                if !mask.is_active_flat(j) {
                    p.values[j] = 0.0;
                    if let Some(b) = buf.as_mut() {
                        b[j] = 0.0;
                    }
                    continue;
                }
            }
            let w = p.values[j];
            let mut d = g[j] + rule.weight_decay * w;
            if let Some(pre) = pre {
                d = d * pre.factors()[j / cols] * pre.global_scale();
            }
            if let Some(alpha) = metric {
                d *= 1.0 + alpha * w.abs();
            }
            if let Some(b) = buf.as_mut() {
                b[j] = rule.momentum * b[j] + d;
                d = b[j];
            }
            p.values[j] = w - rule.eta * d;
        }
    }
    Ok(())
}

/// `v ← μ v + (g + λ w)`, `w ← w − η v`. Masked entries stay 0.
pub fn sgd_step(params: &mut [Param<'_>], grads: &[&[f64]], state: &mut OptState, eta: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    state.ensure(params)?;
    let rule = StepRule {
        eta,
        momentum,
        weight_decay,
        alpha: None,
        preconditioners: None,
    };
    apply_rule(params, grads, Some(&mut state.buffers), &rule)?;
    state.step += 1;
    Ok(())
}

/// Like [`sgd_step`], but every masked weight gradient (plus its decay term)
/// passes through its layer's preconditioner before entering the momentum buffer.
pub fn sparseopt_step(
    params: &mut [Param<'_>],
    grads: &[&[f64]],
    preconditioners: &Preconditioners,
    state: &mut OptState,
    eta: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    state.ensure(params)?;
    let rule = StepRule {
        eta,
        momentum,
        weight_decay,
        alpha: None,
        preconditioners: Some(preconditioners),
    };
    apply_rule(params, grads, Some(&mut state.buffers), &rule)?;
    state.step += 1;
    Ok(())
}

/// Plain gradient step under the metric `1 + α|w|` for weights; normalisation
/// parameters and biases take the Euclidean step.
pub fn ham_step(params: &mut [Param<'_>], grads: &[&[f64]], eta: f64, alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) {
        return Err(LabError::InvalidArgument(format!("alpha must be non-negative, got {alpha}")));
    }
    let rule = StepRule {
        eta,
        momentum: 0.0,
        weight_decay: 0.0,
        alpha: Some(alpha),
        preconditioners: None,
    };
    apply_rule(params, grads, None, &rule)
}

/// Multiplies every gradient by `1/max(‖g‖₂, 1)` over the concatenation; returns the original norm.
pub fn grad_renormalize(grads: &mut [&mut [f64]]) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > 1.0 {
        let k = 1.0 / norm;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    SparseOpt,
}

impl std::str::FromStr for OptimizerKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sparseopt" => Ok(OptimizerKind::SparseOpt),
            other => Err(LabError::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SparseOpt => "sparseopt",
        })
    }
}

/// Stateful optimizer combining SGD or SparseOpt with an optional HAM metric
/// and optional global gradient renormalisation.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// HAM metric strength; `None` disables the metric.
    pub ham_alpha: Option<f64>,
    pub renormalize: bool,
    pub state: OptState,
    pub preconditioners: Preconditioners,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            ham_alpha: None,
            renormalize: false,
            state: OptState::new(),
            preconditioners: Preconditioners::new(),
        }
    }

    /// Rebuilds every preconditioner from the current masks.
    pub fn sync_masks(&mut self, params: &[Param<'_>]) -> Result<()> {
        if self.kind == OptimizerKind::SparseOpt {
            self.preconditioners = Preconditioners::for_params(params)?;
        }
        Ok(())
    }

    /// Called after a mask update: zeroes stale momentum and rebuilds the layer's preconditioner.
    pub fn on_mask_change(&mut self, param_index: usize, layer: usize, mask: &Mask) -> Result<()> {
        self.state.remask(param_index, mask)?;
        if self.kind == OptimizerKind::SparseOpt {
            self.preconditioners.rebuild(layer, mask)?;
        }
        Ok(())
    }

    /// One update. `grads` may be rescaled in place by renormalisation.
    pub fn step(&mut self, params: &mut [Param<'_>], grads: &mut [&mut [f64]], eta: f64) -> Result<f64> {
        let norm = if self.renormalize {
            grad_renormalize(grads)
        } else {
            grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
        };
        let views: Vec<&[f64]> = grads.iter().map(|g| &**g).collect();
        if self.kind == OptimizerKind::SparseOpt && self.preconditioners.0.is_empty() {
            self.sync_masks(params)?;
        }
        self.state.ensure(params)?;
        let rule = StepRule {
            eta,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            alpha: self.ham_alpha,
            preconditioners: (self.kind == OptimizerKind::SparseOpt).then_some(&self.preconditioners),
        };
        apply_rule(params, &views, Some(&mut self.state.buffers), &rule)?;
        self.state.step += 1;
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleVariant {
    /// Peak rate scaled by batch size, warmup from `eta_init`.
    ImagenetStyle,
    /// Warmup from 0 to `eta_base`.
    CifarStyle,
}

/// Linear warmup followed by cosine decay, in epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub variant: ScheduleVariant,
    pub eta_base: f64,
    pub eta_init: f64,
    pub eta_end: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub batch_scale_ref: usize,
}

impl LrSchedule {
    pub fn imagenet(eta_base: f64, warmup_epochs: f64, total_epochs: f64) -> Result<Self> {
        LrSchedule {
            variant: ScheduleVariant::ImagenetStyle,
            eta_base,
            eta_init: 1e-5,
            eta_end: 1e-5,
            warmup_epochs,
            total_epochs,
            batch_scale_ref: 256,
        }
        .validated()
    }

    pub fn cifar(eta_base: f64, warmup_epochs: f64, total_epochs: f64) -> Result<Self> {
        LrSchedule {
            variant: ScheduleVariant::CifarStyle,
            eta_base,
            eta_init: 0.0,
            eta_end: 1e-6,
            warmup_epochs,
            total_epochs,
            batch_scale_ref: 256,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(LabError::InvalidArgument(format!(
                "warmup {} must be below total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if [self.eta_base, self.eta_init, self.eta_end].iter().any(|&v| !(v >= 0.0)) || self.batch_scale_ref == 0 {
            return Err(LabError::InvalidArgument("learning rates must be non-negative".into()));
        }
        Ok(self)
    }

    pub fn peak(&self, batch_size: usize) -> f64 {
        match self.variant {
            ScheduleVariant::ImagenetStyle => self.eta_base * batch_size as f64 / self.batch_scale_ref as f64,
            ScheduleVariant::CifarStyle => self.eta_base,
        }
    }

    /// Rate at fractional epoch `t` (clamped to `[0, total_epochs]`).
    pub fn lr_at(&self, t: f64, batch_size: usize) -> f64 {
        let t = t.clamp(0.0, self.total_epochs);
        let peak = self.peak(batch_size);
        if t < self.warmup_epochs {
            let start = match self.variant {
                ScheduleVariant::ImagenetStyle => self.eta_init,
                ScheduleVariant::CifarStyle => 0.0,
            };
            return start + (peak - start) * t / self.warmup_epochs;
        }
        let progress = (t - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs);
        if progress >= 1.0 {
            return self.eta_end;
        }
        self.eta_end + 0.5 * (peak - self.eta_end) * (1.0 + (PI * progress).cos())
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch_fraction: f64, batch_size: usize) -> f64 {
    schedule.lr_at(epoch_fraction, batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weight<'a>(values: &'a mut [f64], mask: &'a Mask) -> Param<'a> {
        Param {
            layer: 0,
            kind: ParamKind::Weight,
            values,
            mask: Some(mask),
        }
    }

    #[test]
    fn sgd_trivial_steps() {
        let mask = Mask::ones(1, 1);
        let mut w = [1.0];
        let mut st = OptState::new();
        sgd_step(&mut [weight(&mut w, &mask)], &[&[0.5]], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, [0.95]);
        sgd_step(&mut [weight(&mut w, &mask)], &[&[0.0]], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, [0.95]);
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn sgd_momentum_matches_hand_unroll() {
        let mask = Mask::ones(1, 2);
        let mut w = [0.3, -1.2];
        let (g1, g2) = ([0.4, -0.7], [1.1, 0.2]);
        let (eta, mu, wd) = (0.05, 0.9, 1e-3);
        let mut st = OptState::new();
        sgd_step(&mut [weight(&mut w, &mask)], &[&g1], &mut st, eta, mu, wd).unwrap();
        sgd_step(&mut [weight(&mut w, &mask)], &[&g2], &mut st, eta, mu, wd).unwrap();
        for (i, w0) in [0.3f64, -1.2].into_iter().enumerate() {
            let v1 = g1[i] + wd * w0;
            let w1 = w0 - eta * v1;
            let v2 = mu * v1 + g2[i] + wd * w1;
            let w2 = w1 - eta * v2;
            assert!((w[i] - w2).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mask = Mask::ones(1, 2);
        let mut w = [0.0, 0.0];
        let mut st = OptState::new();
        assert!(sgd_step(&mut [weight(&mut w, &mask)], &[&[1.0]], &mut st, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn sparseopt_mixed_rows() {
        let mask = Mask::from_rows(&[&[1, 1, 1, 1], &[1, 0, 0, 0]]);
        let mut w = [0.0; 8];
        let mut params = [weight(&mut w, &mask)];
        let pc = Preconditioners::for_params(&params).unwrap();
        let mut st = OptState::new();
        sparseopt_step(&mut params, &[&[1.0; 8]], &pc, &mut st, 0.1, 0.0, 0.0).unwrap();
        assert!((w[0] + 0.126491).abs() < 1e-6);
        assert!((w[4] + 0.063246).abs() < 1e-6);
        assert_eq!(&w[5..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sparseopt_uniform_sparsity_equals_sgd() {
        let mask = Mask::from_rows(&[&[1, 0, 1, 0], &[0, 1, 0, 1], &[1, 1, 0, 0]]);
        let g: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut b = a.clone();
        let mut sa = OptState::new();
        let mut sb = OptState::new();
        for _ in 0..3 {
            let mut pa = [weight(&mut a, &mask)];
            let pc = Preconditioners::for_params(&pa).unwrap();
            sparseopt_step(&mut pa, &[&g], &pc, &mut sa, 0.1, 0.9, 1e-4).unwrap();
            sgd_step(&mut [weight(&mut b, &mask)], &[&g], &mut sb, 0.1, 0.9, 1e-4).unwrap();
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn stale_preconditioner_is_rejected() {
        let old = Mask::from_rows(&[&[1, 1], &[1, 0]]);
        let new = Mask::from_rows(&[&[1, 0], &[1, 1]]);
        let mut w = [0.0; 4];
        let pc = Preconditioners::for_params(&[weight(&mut w.clone(), &old)]).unwrap();
        let err = sparseopt_step(&mut [weight(&mut w, &new)], &[&[1.0; 4]], &pc, &mut OptState::new(), 0.1, 0.0, 0.0);
        assert!(matches!(err, Err(LabError::StalePreconditioner)));
    }

    #[test]
    fn ham_steps() {
        let mask = Mask::ones(1, 1);
        let mut w = [1.0];
        ham_step(&mut [weight(&mut w, &mask)], &[&[1.0]], 0.1, 4.0).unwrap();
        assert_eq!(w, [0.5]);

        let mut gamma = [1.0];
        let mut p = [Param {
            layer: 1,
            kind: ParamKind::Gamma,
            values: &mut gamma,
            mask: None,
        }];
        ham_step(&mut p, &[&[1.0]], 0.1, 4.0).unwrap();
        assert_eq!(gamma, [0.9]);

        let mut w = [-0.7, 2.0];
        let m2 = Mask::ones(1, 2);
        ham_step(&mut [weight(&mut w, &m2)], &[&[0.3, -0.5]], 0.2, 0.0).unwrap();
        assert_eq!(w, [-0.7 - 0.2 * 0.3, 2.0 - 0.2 * -0.5]);
        assert!(ham_step(&mut [weight(&mut w, &m2)], &[&[0.0, 0.0]], 0.2, -1.0).is_err());
    }

    #[test]
    fn renormalize_cases() {
        let mut a = [2.0, 0.0];
        let mut b = [0.0];
        let n = grad_renormalize(&mut [&mut a, &mut b]);
        assert_eq!(n, 2.0);
        assert_eq!(a, [1.0, 0.0]);
        let mut c = [0.3, 0.4];
        assert_eq!(grad_renormalize(&mut [&mut c]), 0.5);
        assert_eq!(c, [0.3, 0.4]);
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::imagenet(0.1, 5.0, 90.0).unwrap();
        assert_eq!(s.lr_at(0.0, 1024), 1e-5);
        assert_eq!(s.lr_at(5.0, 1024), 0.4);
        assert_eq!(s.lr_at(90.0, 1024), 1e-5);
        let c = LrSchedule::cifar(0.2, 5.0, 100.0).unwrap();
        assert_eq!(c.lr_at(0.0, 128), 0.0);
        assert_eq!(c.lr_at(5.0, 128), 0.2);
        assert_eq!(c.lr_at(100.0, 128), 1e-6);
        assert!(LrSchedule::cifar(0.2, 5.0, 5.0).is_err());
        for sched in [s, c] {
            let w = sched.warmup_epochs;
            let left = sched.lr_at(w - 1e-13, 256);
            let right = sched.lr_at(w + 1e-13, 256);
            assert!((left - sched.peak(256)).abs() < 1e-12);
            assert!((right - sched.peak(256)).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_remasks_momentum() {
        let mut mask = Mask::ones(1, 3);
        let mut w = [1.0, 1.0, 1.0];
        let mut opt = Optimizer::new(OptimizerKind::SparseOpt, 0.9, 0.0);
        let mut g = [1.0, 1.0, 1.0];
        opt.step(&mut [weight(&mut w, &mask)], &mut [&mut g], 0.1).unwrap();
        mask.set(0, 1, false);
        opt.on_mask_change(0, 0, &mask).unwrap();
        assert_eq!(opt.state.buffers()[0][1], 0.0);
        let mut g = [1.0, 1.0, 1.0];
        opt.step(&mut [weight(&mut w, &mask)], &mut [&mut g], 0.1).unwrap();
        assert_eq!(w[1], 0.0);
    }

    proptest! {
        #[test]
        fn dense_sparseopt_is_sgd_bit_for_bit(
            w0 in prop::collection::vec(-3.0f64..3.0, 6),
            gs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 1..4),
            mu in 0.0f64..0.99,
            wd in 0.0f64..0.01,
        ) {
            let mask = Mask::ones(2, 3);
            let mut a = w0.clone();
            let mut b = w0;
            let (mut sa, mut sb) = (OptState::new(), OptState::new());
            for g in &gs {
                let mut pa = [weight(&mut a, &mask)];
                let pc = Preconditioners::for_params(&pa).unwrap();
                sparseopt_step(&mut pa, &[g], &pc, &mut sa, 0.05, mu, wd).unwrap();
                sgd_step(&mut [weight(&mut b, &mask)], &[g], &mut sb, 0.05, mu, wd).unwrap();
            }
            prop_assert_eq!(a, b);
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn masked_entries_stay_zero(
            bits in prop::collection::vec(any::<bool>(), 8),
            gs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 8), 1..5),
            sparse in any::<bool>(),
        ) {
            let mut bits = bits;
            bits[0] = true;
            bits[4] = true;
            let mask = Mask::from_bools(2, 4, &bits).unwrap();
            let mut w = vec![0.5; 8];
            let mut opt = Optimizer::new(if sparse { OptimizerKind::SparseOpt } else { OptimizerKind::Sgd }, 0.9, 1e-3);
            opt.ham_alpha = Some(4.0);
            for g in &gs {
                let mut g = g.clone();
                opt.step(&mut [weight(&mut w, &mask)], &mut [&mut g], 0.1).unwrap();
                for i in 0..8 {
                    if !bits[i] {
                        prop_assert_eq!(w[i], 0.0);
                        prop_assert_eq!(opt.state.buffers()[0][i], 0.0);
                    }
                }
            }
        }

        #[test]
        fn ham_alpha_zero_is_gd(w0 in prop::collection::vec(-3.0f64..3.0, 4), g in prop::collection::vec(-3.0f64..3.0, 4), eta in 0.0f64..1.0) {
            let mask = Mask::ones(1, 4);
            let mut w = w0.clone();
            ham_step(&mut [weight(&mut w, &mask)], &[&g], eta, 0.0).unwrap();
            for i in 0..4 {
                prop_assert_eq!(w[i], w0[i] - eta * g[i]);
            }
        }

        #[test]
        fn renormalize_bounds_and_idempotence(a in prop::collection::vec(-5.0f64..5.0, 1..10), b in prop::collection::vec(-5.0f64..5.0, 0..10)) {
            let (mut a, mut b) = (a, b);
            let before = grad_renormalize(&mut [&mut a, &mut b]);
            let after = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((after - before.min(1.0)).abs() < 1e-12);
            let (ca, cb) = (a.clone(), b.clone());
            grad_renormalize(&mut [&mut a, &mut b]);
            if after <= 1.0 {
                prop_assert_eq!(a, ca);
                prop_assert_eq!(b, cb);
            }
        }
    }
}

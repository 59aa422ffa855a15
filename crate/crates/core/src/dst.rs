//! Dynamic sparse training: magnitude pruning, SET and RigL regrowth, the
//! per-layer mask update and ITOP (union-of-masks) tracking.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::nn::{Gradients, Mlp};
use crate::numerics::{Matrix, Rng};
use crate::optim::{Optimizer, OptimizerKind, ParamKind};
use crate::sparsity::{neuron_sparsities, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DstMethod {
    Set,
    #[default]
    Rigl,
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegrowSource {
    /// Raw dense gradients.
    #[default]
    Original,
    /// Dense gradients after the layer's preconditioner.
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DropDecay {
    #[default]
    Constant,
    Cosine,
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl FromStr for $ty {
            type Err = LabError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(LabError::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($variant => $name,)+
                })
            }
        }
    };
}

string_enum!(DstMethod, "dst method", DstMethod::Set => "set", DstMethod::Rigl => "rigl", DstMethod::Static => "static");
string_enum!(RegrowSource, "regrow source", RegrowSource::Original => "original", RegrowSource::Corrected => "corrected");
string_enum!(DropDecay, "drop decay", DropDecay::Constant => "constant", DropDecay::Cosine => "cosine");

#[derive(Clone, Debug, PartialEq)]
pub struct DstConfig {
    pub method: DstMethod,
    pub drop_fraction: f64,
    pub update_every: usize,
    /// Fraction of total training after which masks freeze.
    pub stop_after: f64,
    pub regrow_source: RegrowSource,
    pub decay: DropDecay,
}

impl Default for DstConfig {
    fn default() -> Self {
        DstConfig {
            method: DstMethod::Rigl,
            drop_fraction: 0.3,
            update_every: 100,
            stop_after: 0.75,
            regrow_source: RegrowSource::Original,
            decay: DropDecay::Constant,
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_fraction > 0.0 && self.drop_fraction < 1.0) {
            return Err(LabError::Config(format!("drop_fraction {} must lie in (0, 1)", self.drop_fraction)));
        }
        if self.update_every == 0 {
            return Err(LabError::Config("update_every must be at least 1".into()));
        }
        if !(self.stop_after > 0.0 && self.stop_after <= 1.0) {
            return Err(LabError::Config(format!("stop_after {} must lie in (0, 1]", self.stop_after)));
        }
        Ok(())
    }

    fn stop_step(&self, total_steps: usize) -> f64 {
        self.stop_after * total_steps as f64
    }

    pub fn is_update_step(&self, step: usize, total_steps: usize) -> bool {
        self.method != DstMethod::Static
            && step > 0
            && step.is_multiple_of(self.update_every)
            && (step as f64) < self.stop_step(total_steps)
    }

    pub fn drop_fraction_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.decay {
            DropDecay::Constant => self.drop_fraction,
            DropDecay::Cosine => {
                let t = (step as f64 / self.stop_step(total_steps)).min(1.0);
                self.drop_fraction * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Record of one layer's mask update.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskUpdateEvent {
    pub step: usize,
    pub layer: usize,
    pub dropped: usize,
    pub grown: usize,
    /// Rows that pruning emptied and that were refilled first.
    pub repaired_rows: usize,
    pub s_before: Vec<f64>,
    pub s_after: Vec<f64>,
}

impl MaskUpdateEvent {
    /// `(min, max, mean)` of the post-update neuron sparsities.
    pub fn s_summary(&self) -> (f64, f64, f64) {
        let min = self.s_after.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.s_after.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.s_after.iter().sum::<f64>() / self.s_after.len().max(1) as f64;
        (min, max, mean)
    }
}

/// `k` indices with the smallest `key`, ties broken by index.
fn lowest_k(mut candidates: Vec<usize>, k: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    candidates.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

fn active_indices(mask: &Mask) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask.is_active_flat(i)).collect()
}

fn inactive_indices(mask: &Mask) -> Vec<usize> {
    (0..mask.len()).filter(|&i| !mask.is_active_flat(i)).collect()
}

fn check_shape(op: &'static str, mask: &Mask, m: &Matrix) -> Result<()> {
    if mask.shape() != m.shape() {
        return Err(LabError::shape(op, format!("{:?}", mask.shape()), format!("{:?}", m.shape())));
    }
    Ok(())
}

/// Deactivates the `k` active entries of smallest `|w|`.
pub fn magnitude_prune(weights: &Matrix, mask: &Mask, k: usize) -> Result<Mask> {
    check_shape("magnitude_prune", mask, weights)?;
    let active = active_indices(mask);
    if k > active.len() {
        return Err(LabError::TooMany { k, available: active.len() });
    }
    let mut out = mask.clone();
    for i in lowest_k(active, k, |i| weights.data()[i].abs()) {
        out.set_flat(i, false);
    }
    Ok(out)
}

/// Activates `k` inactive entries chosen uniformly without replacement.
pub fn set_regrow(mask: &Mask, k: usize, rng: &mut Rng) -> Result<Mask> {
    let inactive = inactive_indices(mask);
    if k > inactive.len() {
        return Err(LabError::TooMany { k, available: inactive.len() });
    }
    let mut out = mask.clone();
    for j in rng.sample_indices(inactive.len(), k) {
        out.set_flat(inactive[j], true);
    }
    Ok(out)
}

/// Activates the `k` inactive entries of largest `|grad|`.
pub fn rigl_regrow(mask: &Mask, dense_grad: &Matrix, k: usize) -> Result<Mask> {
    check_shape("rigl_regrow", mask, dense_grad)?;
    let inactive = inactive_indices(mask);
    if k > inactive.len() {
        return Err(LabError::TooMany { k, available: inactive.len() });
    }
    let mut out = mask.clone();
    for i in lowest_k(inactive, k, |i| -dense_grad.data()[i].abs()) {
        out.set_flat(i, true);
    }
    Ok(out)
}

/// Result of [`update_layer_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerUpdate {
    pub mask: Mask,
    pub dropped: usize,
    pub grown: usize,
    pub repaired_rows: usize,
}

/// Prune-and-regrow for one layer. Entries are regrown only from the set that
/// was inactive before pruning, so nothing is dropped and regrown in one update.
/// Rows emptied by pruning get one entry back before the global regrowth.
pub fn update_layer_mask(
    weights: &Matrix,
    mask: &Mask,
    scores: Option<&Matrix>,
    drop_fraction: f64,
    rng: &mut Rng,
) -> Result<LayerUpdate> {
    let cols = mask.cols();
    let old_inactive: Vec<usize> = inactive_indices(mask);
    let active = mask.active_count();
    let k = ((drop_fraction * active as f64).round() as usize).min(old_inactive.len());
    if k == 0 {
        return Ok(LayerUpdate {
            mask: mask.clone(),
            dropped: 0,
            grown: 0,
            repaired_rows: 0,
        });
    }
    if let Some(s) = scores {
        check_shape("mask_update", mask, s)?;
    }
    let mut new = magnitude_prune(weights, mask, k)?;
    let mut dropped: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.is_active_flat(i) && !new.is_active_flat(i))
        .collect();
    let mut budget = dropped.len();
    let mut candidates: Vec<bool> = (0..mask.len()).map(|i| !mask.is_active_flat(i)).collect();
    let mut repaired = 0;

    for r in 0..mask.rows() {
        if new.row_active_count(r) > 0 || mask.row_active_count(r) == 0 {
            continue;
        }
        repaired += 1;
        let row_pool: Vec<usize> = (r * cols..(r + 1) * cols).filter(|&i| candidates[i]).collect();
        if row_pool.is_empty() {
            // the row had no inactive entries: restore its largest dropped weight
            let back = dropped
                .iter()
                .copied()
                .filter(|&i| i / cols == r)
                .min_by(|&a, &b| weights.data()[b].abs().total_cmp(&weights.data()[a].abs()).then(a.cmp(&b)))
                .expect("an emptied row lost at least one entry");
            new.set_flat(back, true);
            dropped.retain(|&i| i != back);
            budget -= 1;
            continue;
        }
        let pick = match scores {
            Some(s) => lowest_k(row_pool, 1, |i| -s.data()[i].abs())[0],
            None => row_pool[rng.below(row_pool.len())],
        };
        new.set_flat(pick, true);
        candidates[pick] = false;
        budget -= 1;
    }

    let pool: Vec<usize> = (0..mask.len()).filter(|&i| candidates[i]).collect();
    let chosen = match scores {
        Some(s) => lowest_k(pool, budget, |i| -s.data()[i].abs()),
        None => rng.sample_indices(pool.len(), budget).into_iter().map(|j| pool[j]).collect(),
    };
    let grown = dropped.len() - budget + chosen.len();
    for i in chosen {
        new.set_flat(i, true);
    }
    Ok(LayerUpdate {
        mask: new,
        dropped: dropped.len(),
        grown,
        repaired_rows: repaired,
    })
}

fn weight_param_index(model: &mut Mlp, layer: usize) -> Option<usize> {
    model
        .params_mut()
        .iter()
        .position(|p| p.layer == layer && p.kind == ParamKind::Weight)
}

/// Runs one DST update on every linear layer. Newly grown weights start at 0;
/// momentum on changed entries is cleared and preconditioners rebuilt through
/// `opt`.
pub fn mask_update(
    model: &mut Mlp,
    grads: &Gradients,
    cfg: &DstConfig,
    step: usize,
    total_steps: usize,
    rng: &mut Rng,
    mut opt: Option<&mut Optimizer>,
) -> Result<Vec<MaskUpdateEvent>> {
    if cfg.method == DstMethod::Static {
        return Ok(Vec::new());
    }
    let f = cfg.drop_fraction_at(step, total_steps);
    let mut events = Vec::new();
    for layer in model.linear_indices() {
        let lin = model.linear(layer).expect("linear index");
        let old = lin.mask().clone();
        if old.is_dense() {
            continue;
        }
        let scores = match cfg.method {
            DstMethod::Rigl => {
                let g = grads
                    .linear(layer)
                    .ok_or_else(|| LabError::InvalidArgument(format!("no gradients for layer {layer}")))?;
                let mut s = g.d_weights_dense.clone();
                if cfg.regrow_source == RegrowSource::Corrected {
                    if let Some(o) = opt.as_deref() {
                        if o.kind == OptimizerKind::SparseOpt {
                            let pc = o.preconditioners.get(layer).ok_or(LabError::StalePreconditioner)?;
                            if !pc.matches(&old) {
                                return Err(LabError::StalePreconditioner);
                            }
                            pc.apply_in_place(s.data_mut())?;
                        }
                    }
                }
                Some(s)
            }
            _ => None,
        };
        let s_before = neuron_sparsities(&old);
        let upd = update_layer_mask(lin.weights(), &old, scores.as_ref(), f, rng)?;
        let (new, dropped) = (upd.mask, upd.dropped);
        if dropped == 0 {
            continue;
        }
        let lin = model.linear_mut(layer).expect("linear index");
        lin.set_mask(new.clone())?;
        for i in 0..new.len() {
            if new.is_active_flat(i) && !old.is_active_flat(i) {
                lin.weights.data_mut()[i] = 0.0;
            }
        }
        if let Some(o) = opt.as_deref_mut() {
            if let Some(idx) = weight_param_index(model, layer) {
                o.on_mask_change(idx, layer, &new)?;
            }
        }
        events.push(MaskUpdateEvent {
            step,
            layer,
            dropped,
            grown: upd.grown,
            repaired_rows: upd.repaired_rows,
            s_before,
            s_after: neuron_sparsities(&new),
        });
    }
    Ok(events)
}

/// Union of every mask seen, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItopTracker {
    unions: BTreeMap<usize, Mask>,
}

impl ItopTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, layer: usize, mask: &Mask) -> Result<()> {
        let next = match self.unions.get(&layer) {
            Some(u) => u.union(mask)?,
            None => mask.clone(),
        };
        self.unions.insert(layer, next);
        Ok(())
    }

    pub fn observe_model(&mut self, model: &Mlp) -> Result<()> {
        for layer in model.linear_indices() {
            self.observe(layer, model.linear(layer).expect("linear index").mask())?;
        }
        Ok(())
    }

    pub fn total_params(&self) -> usize {
        self.unions.values().map(Mask::len).sum()
    }

    /// Active entries of the union over all tracked parameters.
    pub fn rate(&self) -> f64 {
        let total = self.total_params();
        if total == 0 {
            return 0.0;
        }
        self.unions.values().map(Mask::active_count).sum::<usize>() as f64 / total as f64
    }
}

pub fn itop_update(tracker: &mut ItopTracker, masks: &[(usize, &Mask)]) -> Result<()> {
    for &(layer, m) in masks {
        tracker.observe(layer, m)?;
    }
    Ok(())
}

pub fn itop_rate(tracker: &ItopTracker) -> f64 {
    tracker.rate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Normalization, Targets};
    use crate::numerics::gaussian;
    use crate::sparsity::{random_mask, InitScheme};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn sorted_oracle(vals: &[f64], pool: &[usize], k: usize, largest: bool) -> Vec<usize> {
        let mut v: Vec<(f64, usize)> = pool.iter().map(|&i| (vals[i].abs(), i)).collect();
        // insertion sort keeps this independent of the library sort
        for a in 1..v.len() {
            let mut b = a;
            while b > 0 {
                let (x, y) = (v[b - 1], v[b]);
                let swap = if largest { y.0 > x.0 || (y.0 == x.0 && y.1 < x.1) } else { y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) };
                if !swap {
                    break;
                }
                v.swap(b - 1, b);
                b -= 1;
            }
        }
        let mut out: Vec<usize> = v.into_iter().take(k).map(|p| p.1).collect();
        out.sort_unstable();
        out
    }

    fn flipped(a: &Mask, b: &Mask) -> Vec<usize> {
        (0..a.len()).filter(|&i| a.is_active_flat(i) != b.is_active_flat(i)).collect()
    }

    #[test]
    fn prune_examples() {
        let w = Matrix::from_rows(&[&[0.5, -0.1, 0.3, -0.9]]);
        let m = Mask::ones(1, 4);
        assert_eq!(magnitude_prune(&w, &m, 0).unwrap(), m);
        let p = magnitude_prune(&w, &m, 2).unwrap();
        assert_eq!(p, Mask::from_rows(&[&[1, 0, 0, 1]]));
        assert!(matches!(magnitude_prune(&w, &m, 5), Err(LabError::TooMany { .. })));
    }

    #[test]
    fn prune_ties_are_lexicographic() {
        let w = Matrix::from_rows(&[&[0.2, 0.2], &[0.2, 0.2]]);
        let p = magnitude_prune(&w, &Mask::ones(2, 2), 3).unwrap();
        assert_eq!(p, Mask::from_rows(&[&[0, 0], &[0, 1]]));
    }

    #[test]
    fn regrow_examples() {
        let m = Mask::from_rows(&[&[1, 0, 0], &[0, 1, 1]]);
        let mut rng = Rng::new(4);
        assert_eq!(set_regrow(&m, 0, &mut rng).unwrap(), m);
        assert!(set_regrow(&m, 3, &mut rng).unwrap().is_dense());
        assert!(set_regrow(&m, 4, &mut rng).is_err());
        assert_eq!(set_regrow(&m, 2, &mut Rng::new(9)).unwrap(), set_regrow(&m, 2, &mut Rng::new(9)).unwrap());

        let m = Mask::from_rows(&[&[1, 0, 0]]);
        let g = Matrix::from_rows(&[&[9.0, -0.2, 0.7]]);
        assert_eq!(rigl_regrow(&m, &g, 1).unwrap(), Mask::from_rows(&[&[1, 0, 1]]));
        assert_eq!(rigl_regrow(&m, &g, 0).unwrap(), m);
    }

    #[test]
    fn itop_examples() {
        let mut t = ItopTracker::new();
        let a = Mask::from_rows(&[&[1, 0, 1, 0]]);
        t.observe(0, &a).unwrap();
        assert_eq!(t.rate(), 0.5);
        itop_update(&mut t, &[(0, &Mask::from_rows(&[&[0, 1, 1, 0]]))]).unwrap();
        assert_eq!(itop_rate(&t), 0.75);
    }

    #[test]
    fn drop_fraction_schedule() {
        let cfg = DstConfig {
            decay: DropDecay::Cosine,
            ..DstConfig::default()
        };
        assert_eq!(cfg.drop_fraction_at(0, 1000), 0.3);
        assert!(cfg.drop_fraction_at(750, 1000).abs() < 1e-15);
        assert!(cfg.is_update_step(100, 1000));
        assert!(!cfg.is_update_step(0, 1000));
        assert!(!cfg.is_update_step(750, 1000));
        assert!(DstConfig { drop_fraction: 1.0, ..DstConfig::default() }.validate().is_err());
        assert!(DstConfig { update_every: 0, ..DstConfig::default() }.validate().is_err());
        assert_eq!("corrected".parse::<RegrowSource>().unwrap(), RegrowSource::Corrected);
        assert!("magic".parse::<DstMethod>().is_err());
    }

    #[test]
    fn emptied_row_is_repaired() {
        // row 0 holds the two smallest weights and loses both to pruning
        let w = Matrix::from_rows(&[&[0.01, 0.02, 0.0, 0.0], &[0.0, 5.0, 6.0, 7.0]]);
        let m = Mask::from_rows(&[&[1, 1, 0, 0], &[0, 1, 1, 1]]);
        let g = Matrix::from_rows(&[&[0.0, 0.0, 0.1, 0.3], &[9.0, 0.0, 0.0, 0.0]]);
        let u = update_layer_mask(&w, &m, Some(&g), 0.4, &mut Rng::new(0)).unwrap();
        assert_eq!(u.dropped, 2);
        assert_eq!(u.grown, 2);
        assert_eq!(u.repaired_rows, 1);
        assert_eq!(u.mask, Mask::from_rows(&[&[0, 0, 0, 1], &[1, 1, 1, 1]]));
    }

    #[test]
    fn static_is_noop() {
        let mut rng = Rng::new(1);
        let masks = vec![random_mask(4, 6, 0.5, &mut rng).unwrap(), random_mask(2, 4, 0.5, &mut rng).unwrap()];
        let mut mlp = Mlp::classifier(&[6, 4, 2], Normalization::BatchNorm, masks, InitScheme::DenseKaiming, &mut rng).unwrap();
        let x = gaussian(&mut rng, 8, 6, 0.0, 1.0);
        let (_, g) = mlp.forward_backward(&x, Targets::Labels(&[0, 1, 0, 1, 0, 1, 0, 1])).unwrap();
        let before = mlp.clone();
        let cfg = DstConfig { method: DstMethod::Static, ..DstConfig::default() };
        assert!(mask_update(&mut mlp, &g, &cfg, 100, 1000, &mut rng, None).unwrap().is_empty());
        assert_eq!(mlp, before);
    }

    #[test]
    fn model_update_events_match_masks() {
        for method in [DstMethod::Set, DstMethod::Rigl] {
            let mut rng = Rng::new(21);
            let masks = vec![random_mask(10, 12, 0.3, &mut rng).unwrap(), random_mask(3, 10, 0.5, &mut rng).unwrap()];
            let mut mlp = Mlp::classifier(&[12, 10, 3], Normalization::BatchNorm, masks, InitScheme::DenseKaiming, &mut rng).unwrap();
            let mut opt = Optimizer::new(OptimizerKind::SparseOpt, 0.9, 0.0);
            let x = gaussian(&mut rng, 16, 12, 0.0, 1.0);
            let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
            let (_, mut g) = mlp.forward_backward(&x, Targets::Labels(&labels)).unwrap();
            {
                let mut params = mlp.params_mut();
                let mut gs = g.slices_mut();
                opt.step(&mut params, &mut gs, 0.1).unwrap();
            }
            let old: Vec<Mask> = mlp.linear_indices().iter().map(|&l| mlp.linear(l).unwrap().mask().clone()).collect();
            let cfg = DstConfig { method, ..DstConfig::default() };
            let events = mask_update(&mut mlp, &g, &cfg, 100, 1000, &mut rng, Some(&mut opt)).unwrap();
            assert_eq!(events.len(), 2);
            for (ev, old) in events.iter().zip(&old) {
                let lin = mlp.linear(ev.layer).unwrap();
                assert_eq!(ev.dropped, ev.grown);
                assert_eq!(lin.mask().active_count(), old.active_count());
                assert_eq!(ev.s_after, neuron_sparsities(lin.mask()));
                assert_eq!(ev.s_before, neuron_sparsities(old));
                for i in 0..old.len() {
                    if lin.mask().is_active_flat(i) && !old.is_active_flat(i) {
                        assert_eq!(lin.weights().data()[i], 0.0);
                    }
                }
                assert!(opt.preconditioners.get(ev.layer).unwrap().matches(lin.mask()));
            }
            // a further step must accept the rebuilt preconditioners
            let mut params = mlp.params_mut();
            let mut gs = g.slices_mut();
            opt.step(&mut params, &mut gs, 0.1).unwrap();
        }
    }

    proptest! {
        #[test]
        fn prune_matches_sort_oracle(vals in prop::collection::vec(-2i32..3, 24), bits in prop::collection::vec(any::<bool>(), 24), k in 0usize..24) {
            let w = Matrix::from_vec(4, 6, vals.iter().map(|&v| v as f64 * 0.5).collect()).unwrap();
            let m = Mask::from_bools(4, 6, &bits).unwrap();
            let active: Vec<usize> = (0..24).filter(|&i| bits[i]).collect();
            prop_assume!(k <= active.len());
            let p = magnitude_prune(&w, &m, k).unwrap();
            prop_assert_eq!(flipped(&m, &p), sorted_oracle(w.data(), &active, k, false));
        }

        #[test]
        fn rigl_matches_sort_oracle(vals in prop::collection::vec(-2i32..3, 24), bits in prop::collection::vec(any::<bool>(), 24), k in 0usize..24) {
            let g = Matrix::from_vec(4, 6, vals.iter().map(|&v| v as f64 * 0.5).collect()).unwrap();
            let m = Mask::from_bools(4, 6, &bits).unwrap();
            let inactive: Vec<usize> = (0..24).filter(|&i| !bits[i]).collect();
            prop_assume!(k <= inactive.len());
            let p = rigl_regrow(&m, &g, k).unwrap();
            prop_assert_eq!(flipped(&m, &p), sorted_oracle(g.data(), &inactive, k, true));
        }

        #[test]
        fn layer_update_conserves_and_is_disjoint(seed in 0u64..500, density in 0.1f64..0.9, f in 0.05f64..0.95, rigl in any::<bool>()) {
            let mut rng = Rng::new(seed);
            let m = random_mask(7, 9, density, &mut rng).unwrap();
            let w = gaussian(&mut rng, 7, 9, 0.0, 1.0).hadamard(m.as_matrix()).unwrap();
            let g = gaussian(&mut rng, 7, 9, 0.0, 1.0);
            let u = update_layer_mask(&w, &m, rigl.then_some(&g), f, &mut rng).unwrap();
            prop_assert_eq!(u.mask.active_count(), m.active_count());
            prop_assert_eq!(u.dropped, u.grown);
            for r in 0..7 {
                if m.row_active_count(r) > 0 {
                    prop_assert!(u.mask.row_active_count(r) > 0);
                }
            }
            // dropped and grown sets: exactly `dropped` entries switched each way
            let off = (0..m.len()).filter(|&i| m.is_active_flat(i) && !u.mask.is_active_flat(i)).count();
            let on = (0..m.len()).filter(|&i| !m.is_active_flat(i) && u.mask.is_active_flat(i)).count();
            prop_assert_eq!(off, u.dropped);
            prop_assert_eq!(on, u.grown);
        }

        #[test]
        fn itop_is_monotone(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let mut t = ItopTracker::new();
            let first = random_mask(5, 5, 0.3, &mut rng).unwrap();
            t.observe(0, &first).unwrap();
            let mut prev = t.rate();
            prop_assert!((prev - first.density()).abs() < 1e-15);
            for _ in 0..5 {
                t.observe(0, &random_mask(5, 5, 0.3, &mut rng).unwrap()).unwrap();
                prop_assert!(t.rate() >= prev && t.rate() <= 1.0);
                prev = t.rate();
            }
        }
    }
}

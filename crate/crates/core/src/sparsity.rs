//! Masks, per-neuron sparsity, ERK layer densities, and the sparsity-aware
//! diagonal preconditioner.
//!
//! Weight matrices are `out × in`, so the incoming weights of neuron `i` are
//! row `i`. A neuron's sparsity is `s_i = 1 − fan_in_i / in_features`.

use crate::error::{LabError, Result};
use crate::numerics::{Matrix, Rng};

/// Binary matrix congruent to a weight matrix. Entries are exactly 0.0 or 1.0.
#[derive(Clone, PartialEq, Debug)]
pub struct Mask(Matrix);

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask(Matrix::filled(rows, cols, 1.0))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mask(Matrix::zeros(rows, cols))
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if let Some(v) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(LabError::InvalidArgument(format!(
                "mask entries must be 0 or 1, found {v}"
            )));
        }
        Ok(Mask(m))
    }

    pub fn from_bools(rows: usize, cols: usize, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Mask(Matrix::from_vec(rows, cols, data)?))
    }

    /// Literal constructor for tests and examples: nonzero means active.
    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut m = Matrix::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), cols, "ragged mask rows");
            for (c, &v) in row.iter().enumerate() {
                if v != 0 {
                    m.set(r, c, 1.0);
                }
            }
        }
        Mask(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn is_active(&self, r: usize, c: usize) -> bool {
        self.0.get(r, c) != 0.0
    }

    #[inline]
    pub fn is_active_flat(&self, i: usize) -> bool {
        self.0.data()[i] != 0.0
    }

    pub fn set(&mut self, r: usize, c: usize, active: bool) {
        self.0.set(r, c, if active { 1.0 } else { 0.0 });
    }

    pub fn set_flat(&mut self, i: usize, active: bool) {
        self.0.data_mut()[i] = if active { 1.0 } else { 0.0 };
    }

    pub fn active_count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.len() as f64
    }

    pub fn row_active_count(&self, r: usize) -> usize {
        self.0.row(r).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn fan_in(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| self.row_active_count(r)).collect()
    }

    pub fn is_dense(&self) -> bool {
        self.0.data().iter().all(|&v| v != 0.0)
    }

    /// Zeroes every entry of `values` that this mask deactivates.
    pub fn apply(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.len());
        for (v, &m) in values.iter_mut().zip(self.0.data()) {
            if m == 0.0 {
                *v = 0.0;
            }
        }
    }

    /// FNV-1a over shape and active bits; identifies the mask a preconditioner was built from.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in (self.rows() as u64)
            .to_le_bytes()
            .into_iter()
            .chain((self.cols() as u64).to_le_bytes())
        {
            h = (h ^ b as u64).wrapping_mul(PRIME);
        }
        for &v in self.0.data() {
            h = (h ^ (v != 0.0) as u64).wrapping_mul(PRIME);
        }
        h
    }

    /// Entries active in `self` or `other`.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(LabError::shape(
                "Mask::union",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let data = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(&a, &b)| if a != 0.0 || b != 0.0 { 1.0 } else { 0.0 })
            .collect();
        Ok(Mask(Matrix::from_vec(self.rows(), self.cols(), data)?))
    }
}

/// `s_i = 1 − fan_in_i / in_features` for every output neuron.
pub fn neuron_sparsities(mask: &Mask) -> Vec<f64> {
    let width = mask.cols() as f64;
    mask.fan_in()
        .into_iter()
        .map(|f| 1.0 - f as f64 / width)
        .collect()
}

/// Per-neuron factors `√(1−s_i)` and the global rescale `1/√(1−s_avg)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Preconditioner {
    factors: Vec<f64>,
    s_avg: f64,
    global_scale: f64,
    shape: (usize, usize),
    fingerprint: u64,
}

impl Preconditioner {
    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn s_avg(&self) -> f64 {
        self.s_avg
    }

    pub fn global_scale(&self) -> f64 {
        self.global_scale
    }

    pub fn is_identity(&self) -> bool {
        self.global_scale == 1.0 && self.factors.iter().all(|&f| f == 1.0)
    }

    /// Whether this preconditioner was built from `mask`.
    pub fn matches(&self, mask: &Mask) -> bool {
        self.shape == mask.shape() && self.fingerprint == mask.fingerprint()
    }

    /// Scales row `i` of a flat `out × in` gradient by `factors[i]`, then everything by `global_scale`.
    pub fn apply_in_place(&self, grad: &mut [f64]) -> Result<()> {
        let (rows, cols) = self.shape;
        if grad.len() != rows * cols {
            return Err(LabError::shape("apply_preconditioner", rows * cols, grad.len()));
        }
        for (row, &f) in grad.chunks_mut(cols).zip(&self.factors) {
            for g in row {
                *g = *g * f * self.global_scale;
            }
        }
        Ok(())
    }
}

pub fn build_preconditioner(mask: &Mask) -> Result<Preconditioner> {
    if mask.is_empty() {
        return Err(LabError::InvalidArgument("empty mask".into()));
    }
    let s = neuron_sparsities(mask);
    if let Some(neuron) = s.iter().position(|&si| si >= 1.0) {
        return Err(LabError::FullyMaskedNeuron { neuron });
    }
    let s_avg = s.iter().sum::<f64>() / s.len() as f64;
    Ok(Preconditioner {
        factors: s.iter().map(|si| (1.0 - si).sqrt()).collect(),
        s_avg,
        global_scale: 1.0 / (1.0 - s_avg).sqrt(),
        shape: mask.shape(),
        fingerprint: mask.fingerprint(),
    })
}

pub fn apply_preconditioner(p: &Preconditioner, grad: &Matrix) -> Result<Matrix> {
    if grad.shape() != p.shape {
        return Err(LabError::shape(
            "apply_preconditioner",
            format!("{:?}", p.shape),
            format!("{:?}", grad.shape()),
        ));
    }
    let mut out = grad.clone();
    p.apply_in_place(out.data_mut())?;
    Ok(out)
}

/// Erdős–Rényi-kernel densities: `density_l ∝ (in_l + out_l) / (in_l · out_l)`,
/// normalised so the global active fraction is `1 − target_sparsity`. Layers
/// that would exceed density 1 are clamped and the rest re-solved.
pub fn erk_densities(layer_dims: &[(usize, usize)], target_sparsity: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(LabError::InvalidArgument(format!(
            "target sparsity {target_sparsity} outside [0, 1)"
        )));
    }
    if layer_dims.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(LabError::InvalidArgument("zero-sized layer".into()));
    }
    let sizes: Vec<f64> = layer_dims.iter().map(|&(i, o)| (i * o) as f64).collect();
    let raw: Vec<f64> = layer_dims
        .iter()
        .map(|&(i, o)| (i + o) as f64 / (i * o) as f64)
        .collect();
    let total: f64 = sizes.iter().sum();
    let required = (1.0 - target_sparsity) * total;
    if target_sparsity == 0.0 {
        return Ok(vec![1.0; layer_dims.len()]);
    }

    let mut dense = vec![false; layer_dims.len()];
    loop {
        let fixed: f64 = (0..sizes.len()).filter(|&l| dense[l]).map(|l| sizes[l]).sum();
        let weighted: f64 = (0..sizes.len())
            .filter(|&l| !dense[l])
            .map(|l| raw[l] * sizes[l])
            .sum();
        if weighted == 0.0 {
            if fixed + 1e-9 < required {
                return Err(LabError::InvalidArgument(format!(
                    "infeasible ERK target: capacity {fixed} < required {required}"
                )));
            }
            return Ok(vec![1.0; layer_dims.len()]);
        }
        let eps = (required - fixed) / weighted;
        let mut changed = false;
        for l in 0..sizes.len() {
            if !dense[l] && eps * raw[l] > 1.0 {
                dense[l] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok((0..sizes.len())
                .map(|l| if dense[l] { 1.0 } else { eps * raw[l] })
                .collect());
        }
    }
}

/// Exactly `round(density · size)` active entries drawn without replacement.
/// Rows left empty get one random entry; to keep the count exact, a random
/// entry is removed from the fullest row when one has more than one active.
pub fn random_mask(rows: usize, cols: usize, density: f64, rng: &mut Rng) -> Result<Mask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "density {density} outside (0, 1]"
        )));
    }
    let size = rows * cols;
    let k = ((density * size as f64).round() as usize).min(size);
    let mut mask = Mask::zeros(rows, cols);
    if k == size {
        return Ok(Mask::ones(rows, cols));
    }
    for i in rng.sample_indices(size, k) {
        mask.set_flat(i, true);
    }
    repair_empty_rows(&mut mask, rng);
    Ok(mask)
}

fn repair_empty_rows(mask: &mut Mask, rng: &mut Rng) {
    for r in 0..mask.rows() {
        if mask.row_active_count(r) > 0 {
            continue;
        }
        let c = rng.below(mask.cols());
        mask.set(r, c, true);
        let donor = (0..mask.rows())
            .filter(|&d| d != r)
            .max_by_key(|&d| (mask.row_active_count(d), std::cmp::Reverse(d)));
        match donor {
            Some(d) if mask.row_active_count(d) > 1 => {
                let active: Vec<usize> = (0..mask.cols()).filter(|&c| mask.is_active(d, c)).collect();
                let drop = active[rng.below(active.len())];
                mask.set(d, drop, false);
                log::debug!("mask repair: row {r} regrown at col {c}, row {d} col {drop} removed");
            }
            _ => log::debug!("mask repair: row {r} regrown at col {c}"),
        }
    }
}

/// Every row gets exactly `fan_in` active entries at random positions.
pub fn uniform_fan_in_mask(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Result<Mask> {
    if fan_in == 0 || fan_in > cols {
        return Err(LabError::InvalidArgument(format!(
            "fan-in {fan_in} outside 1..={cols}"
        )));
    }
    let mut mask = Mask::zeros(rows, cols);
    for r in 0..rows {
        for c in rng.sample_indices(cols, fan_in) {
            mask.set(r, c, true);
        }
    }
    Ok(mask)
}

/// Weight initialisation scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// `√(2 / in_features)` for every neuron.
    #[default]
    DenseKaiming,
    /// `√(2 / fan_in_i)` per neuron.
    SparseAware,
}

impl std::str::FromStr for InitScheme {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-kaiming" => Ok(InitScheme::DenseKaiming),
            "sparse-aware" => Ok(InitScheme::SparseAware),
            other => Err(LabError::Config(format!("unknown init scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitScheme::DenseKaiming => "dense-kaiming",
            InitScheme::SparseAware => "sparse-aware",
        })
    }
}

pub fn sparse_init_scale(mask: &Mask, scheme: InitScheme) -> Vec<f64> {
    match scheme {
        InitScheme::DenseKaiming => vec![(2.0 / mask.cols() as f64).sqrt(); mask.rows()],
        InitScheme::SparseAware => mask
            .fan_in()
            .into_iter()
            .map(|f| (2.0 / f.max(1) as f64).sqrt())
            .collect(),
    }
}

/// Gaussian weights with per-neuron std from `scheme`, zero on masked entries.
pub fn init_weights(mask: &Mask, scheme: InitScheme, rng: &mut Rng) -> Matrix {
    let stds = sparse_init_scale(mask, scheme);
    let mut w = crate::numerics::gaussian(rng, mask.rows(), mask.cols(), 0.0, 1.0);
    for (r, std) in stds.iter().enumerate() {
        w.row_mut(r).iter_mut().for_each(|v| *v *= std);
    }
    mask.apply(w.data_mut());
    w
}

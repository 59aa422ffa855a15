//! Exact forward and backward passes for masked linear layers, BatchNorm,
//! LayerNorm, ReLU and the two losses, plus their composition into an MLP.
//!
//! Activations are `batch × features` row-major matrices throughout.

use crate::error::{LabError, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, Rng};
use crate::optim::{Param, ParamKind};
use crate::sparsity::{init_weights, InitScheme, Mask};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Linear layer whose `out × in` weights are multiplied by a binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLinear {
    pub(crate) weights: Matrix,
    pub(crate) mask: Mask,
    pub(crate) bias: Option<Vec<f64>>,
}

/// Gradients of a [`SparseLinear`].
#[derive(Clone, Debug)]
pub struct LinearGrads {
    /// Zero on masked entries.
    pub d_weights: Matrix,
    /// The same gradient with the mask lifted; what RigL scores regrowth with.
    pub d_weights_dense: Matrix,
    pub d_input: Option<Matrix>,
    pub d_bias: Option<Vec<f64>>,
}

impl SparseLinear {
    /// Masked entries of `weights` are zeroed.
    pub fn new(mut weights: Matrix, mask: Mask, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.shape() != mask.shape() {
            return Err(LabError::shape(
                "SparseLinear::new",
                format!("{:?}", weights.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(LabError::shape("SparseLinear::new bias", weights.rows(), b.len()));
            }
        }
        mask.apply(weights.data_mut());
        Ok(SparseLinear {
            weights,
            mask,
            bias,
        })
    }

    pub fn dense(weights: Matrix) -> Self {
        let (r, c) = weights.shape();
        SparseLinear {
            weights,
            mask: Mask::ones(r, c),
            bias: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// Replaces the mask; weights on newly masked entries become zero.
    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        if mask.shape() != self.weights.shape() {
            return Err(LabError::shape(
                "SparseLinear::set_mask",
                format!("{:?}", self.weights.shape()),
                format!("{:?}", mask.shape()),
            ));
        }
        mask.apply(self.weights.data_mut());
        self.mask = mask;
        Ok(())
    }

    /// Sets a single weight; ignored on masked entries.
    pub fn set_weight(&mut self, r: usize, c: usize, v: f64) {
        if self.mask.is_active(r, c) {
            self.weights.set(r, c, v);
        }
    }

    pub fn effective_weights(&self) -> Matrix {
        self.weights
            .hadamard(self.mask.as_matrix())
            .expect("weights and mask share a shape")
    }

    pub fn forward(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.in_features() {
            return Err(LabError::shape("linear_forward", self.in_features(), h.cols()));
        }
        let mut x = matmul_nt(h, &self.effective_weights())?;
        if let Some(b) = &self.bias {
            for r in 0..x.rows() {
                x.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        Ok(x)
    }

    /// `need_input_grad = false` skips the `d_out · W` product (first layer).
    pub fn backward(&self, h: &Matrix, d_out: &Matrix, need_input_grad: bool) -> Result<LinearGrads> {
        if h.cols() != self.in_features() || d_out.cols() != self.out_features() || h.rows() != d_out.rows() {
            return Err(LabError::shape(
                "linear_backward",
                format!("h: m×{}, d_out: m×{}", self.in_features(), self.out_features()),
                format!("h: {:?}, d_out: {:?}", h.shape(), d_out.shape()),
            ));
        }
        let d_weights_dense = matmul_tn(d_out, h)?;
        let mut d_weights = d_weights_dense.clone();
        self.mask.apply(d_weights.data_mut());
        let d_input = if need_input_grad {
            Some(matmul(d_out, &self.effective_weights())?)
        } else {
            None
        };
        let d_bias = self.bias.as_ref().map(|_| d_out.col_sums());
        Ok(LinearGrads {
            d_weights,
            d_weights_dense,
            d_input,
            d_bias,
        })
    }
}

pub fn linear_forward(layer: &SparseLinear, h: &Matrix) -> Result<Matrix> {
    layer.forward(h)
}

pub fn linear_backward(layer: &SparseLinear, h: &Matrix, d_out: &Matrix) -> Result<LinearGrads> {
    layer.backward(h, d_out, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Train,
    Eval,
}

/// Per-feature batch normalisation with learnable `gamma`/`beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Vec<f64>,
    /// Unbiased (divisor `m − 1`) running variance.
    pub running_var: Vec<f64>,
    pub mode: NormMode,
}

/// Statistics from a normalisation forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub input: Matrix,
    pub mean: Vec<f64>,
    /// `√(σ² + ε)`
    pub std: Vec<f64>,
    pub xhat: Matrix,
    /// False when the forward pass used running statistics.
    pub batch_stats: bool,
}

/// Gradients of a normalisation layer.
#[derive(Clone, Debug)]
pub struct NormGrads {
    pub d_x: Matrix,
    pub d_gamma: Vec<f64>,
    pub d_beta: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self::with_eps(features, DEFAULT_BN_EPS)
    }

    pub fn with_eps(features: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps,
            momentum: DEFAULT_BN_MOMENTUM,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            mode: NormMode::Train,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalises with batch statistics (biased variance) and
    /// updates the running estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Matrix) -> Result<(Matrix, BnCache)> {
        match self.mode {
            NormMode::Train => {
                let (y, cache) = batchnorm_train(x, &self.gamma, &self.beta, self.eps)?;
                let m = x.rows() as f64;
                for i in 0..self.features() {
                    let var = cache.std[i] * cache.std[i] - self.eps;
                    self.running_mean[i] =
                        (1.0 - self.momentum) * self.running_mean[i] + self.momentum * cache.mean[i];
                    self.running_var[i] = (1.0 - self.momentum) * self.running_var[i]
                        + self.momentum * var.max(0.0) * m / (m - 1.0);
                }
                Ok((y, cache))
            }
            NormMode::Eval => self.forward_eval(x),
        }
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<(Matrix, BnCache)> {
        self.check(x)?;
        let std: Vec<f64> = self.running_var.iter().map(|v| (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let z = (x.get(r, c) - self.running_mean[c]) / std[c];
                xhat.set(r, c, z);
                y.set(r, c, self.gamma[c] * z + self.beta[c]);
            }
        }
        Ok((
            y,
            BnCache {
                input: x.clone(),
                mean: self.running_mean.clone(),
                std,
                xhat,
                batch_stats: false,
            },
        ))
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(LabError::InvalidArgument(format!("batchnorm eps {} must be positive", self.eps)));
        }
        if x.cols() != self.features() {
            return Err(LabError::shape("batchnorm_forward", self.features(), x.cols()));
        }
        Ok(())
    }
}

/// Batch-statistics normalisation without touching running estimates. `eps`
/// may be 0 here; the [`BatchNorm`] layer itself requires it positive.
pub fn batchnorm_train(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Matrix, BnCache)> {
    if x.rows() < 2 {
        return Err(LabError::InvalidArgument(format!(
            "batchnorm needs at least 2 samples in train mode, got {}",
            x.rows()
        )));
    }
    if eps < 0.0 {
        return Err(LabError::InvalidArgument(format!("negative eps {eps}")));
    }
    if x.cols() != gamma.len() || x.cols() != beta.len() {
        return Err(LabError::shape("batchnorm_forward", gamma.len(), x.cols()));
    }
    let m = x.rows() as f64;
    let mean = x.col_means();
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / m + eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let z = if std[c] > 0.0 { (x.get(r, c) - mean[c]) / std[c] } else { 0.0 };
            xhat.set(r, c, z);
            y.set(r, c, gamma[c] * z + beta[c]);
        }
    }
    Ok((
        y,
        BnCache {
            input: x.clone(),
            mean,
            std,
            xhat,
            batch_stats: true,
        },
    ))
}

pub fn batchnorm_forward(bn: &mut BatchNorm, x: &Matrix) -> Result<(Matrix, BnCache)> {
    bn.forward(x)
}

/// `∂L/∂x = (1/σ)(g − mean(g) − x̂·mean(g·x̂))` per column with `g = γ·∂L/∂y`.
pub fn batchnorm_backward(d_y: &Matrix, cache: &BnCache, gamma: &[f64]) -> Result<NormGrads> {
    if d_y.shape() != cache.xhat.shape() || gamma.len() != d_y.cols() {
        return Err(LabError::shape(
            "batchnorm_backward",
            format!("{:?}", cache.xhat.shape()),
            format!("{:?}", d_y.shape()),
        ));
    }
    let (m, n) = d_y.shape();
    let mut d_gamma = vec![0.0; n];
    let mut d_beta = vec![0.0; n];
    let mut mean_g = vec![0.0; n];
    let mut mean_gx = vec![0.0; n];
    for r in 0..m {
        for c in 0..n {
            let dy = d_y.get(r, c);
            let xh = cache.xhat.get(r, c);
            d_gamma[c] += dy * xh;
            d_beta[c] += dy;
            mean_g[c] += gamma[c] * dy;
            mean_gx[c] += gamma[c] * dy * xh;
        }
    }
    let mut d_x = Matrix::zeros(m, n);
    if !cache.batch_stats {
        for r in 0..m {
            for c in 0..n {
                d_x.set(r, c, gamma[c] * d_y.get(r, c) / cache.std[c]);
            }
        }
        return Ok(NormGrads { d_x, d_gamma, d_beta });
    }
    let mf = m as f64;
    mean_g.iter_mut().for_each(|v| *v /= mf);
    mean_gx.iter_mut().for_each(|v| *v /= mf);
    for r in 0..m {
        for c in 0..n {
            if cache.std[c] == 0.0 {
                continue;
            }
            let g = gamma[c] * d_y.get(r, c);
            let cterm = g - mean_g[c] - cache.xhat.get(r, c) * mean_gx[c];
            d_x.set(r, c, cterm / cache.std[c]);
        }
    }
    Ok(NormGrads { d_x, d_gamma, d_beta })
}

/// Per-sample normalisation over the feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

/// Per-row statistics of a LayerNorm forward pass.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub mean: Vec<f64>,
    /// `√(σ_LN² + ε)` per sample.
    pub std: Vec<f64>,
    pub xhat: Matrix,
}

impl LayerNorm {
    pub fn new(features: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LnCache)> {
        layernorm_forward(self, x)
    }
}

pub fn layernorm_forward(ln: &LayerNorm, x: &Matrix) -> Result<(Matrix, LnCache)> {
    let n = x.cols();
    if n < 2 {
        return Err(LabError::InvalidArgument(format!(
            "layernorm needs at least 2 features, got {n}"
        )));
    }
    if n != ln.features() {
        return Err(LabError::shape("layernorm_forward", ln.features(), n));
    }
    let nf = n as f64;
    let mut mean = Vec::with_capacity(x.rows());
    let mut std = Vec::with_capacity(x.rows());
    let mut xhat = Matrix::zeros(x.rows(), n);
    let mut y = Matrix::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / nf;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / nf;
        let sd = (var + ln.eps).sqrt();
        for c in 0..n {
            let z = if sd > 0.0 { (row[c] - mu) / sd } else { 0.0 };
            xhat.set(r, c, z);
            y.set(r, c, ln.gamma[c] * z + ln.beta[c]);
        }
        mean.push(mu);
        std.push(sd);
    }
    Ok((y, LnCache { mean, std, xhat }))
}

/// Per sample with `N` features and `g_j = γ_j ∂L/∂y_j`:
/// `∂L/∂x_i = Σ_j g_j (N δ_ij − 1 − x̂_i x̂_j) / (N σ_LN)`,
/// `∂L/∂γ_j = Σ_b ∂L/∂y_j x̂_j`, `∂L/∂β_j = Σ_b ∂L/∂y_j`.
pub fn layernorm_backward(d_y: &Matrix, cache: &LnCache, gamma: &[f64]) -> Result<NormGrads> {
    if d_y.shape() != cache.xhat.shape() || gamma.len() != d_y.cols() {
        return Err(LabError::shape(
            "layernorm_backward",
            format!("{:?}", cache.xhat.shape()),
            format!("{:?}", d_y.shape()),
        ));
    }
    let (m, n) = d_y.shape();
    let nf = n as f64;
    let mut d_gamma = vec![0.0; n];
    let mut d_beta = vec![0.0; n];
    let mut d_x = Matrix::zeros(m, n);
    for r in 0..m {
        let xh = cache.xhat.row(r);
        let dy = d_y.row(r);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..n {
            d_gamma[j] += dy[j] * xh[j];
            d_beta[j] += dy[j];
            let g = gamma[j] * dy[j];
            sum_g += g;
            sum_gx += g * xh[j];
        }
        let sd = cache.std[r];
        if sd == 0.0 {
            continue;
        }
        let out = d_x.row_mut(r);
        for i in 0..n {
            let g = gamma[i] * dy[i];
            out[i] = (nf * g - sum_g - xh[i] * sum_gx) / (nf * sd);
        }
    }
    Ok(NormGrads { d_x, d_gamma, d_beta })
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Subgradient at 0 is 0.
#[inline]
pub fn relu_prime(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(relu)
}

pub fn relu_backward(x: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    if x.shape() != d_out.shape() {
        return Err(LabError::shape(
            "relu_backward",
            format!("{:?}", x.shape()),
            format!("{:?}", d_out.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&xi, &d)| relu_prime(xi) * d)
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// `(1/2m) Σ (target − pred)²` and its gradient `(pred − target)/m` with respect to `pred`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(LabError::shape(
            "mse_loss",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let m = pred.rows() as f64;
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let r = *g - t;
        loss += r * r;
        *g = r / m;
    }
    Ok((loss / (2.0 * m), grad))
}

/// Mean softmax cross-entropy over the batch; max-subtracted for stability.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(LabError::shape("softmax_cross_entropy", logits.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(LabError::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    let m = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] - max);
        let g = grad.row_mut(r);
        for (c, e) in exps.iter().enumerate() {
            g[c] = (e / z - if c == label { 1.0 } else { 0.0 }) / m;
        }
    }
    Ok((loss / m, grad))
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = logits.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Which normalisation follows each hidden linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    BatchNorm,
    LayerNorm,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batchnorm" => Ok(Normalization::BatchNorm),
            "layernorm" => Ok(Normalization::LayerNorm),
            "none" => Ok(Normalization::None),
            other => Err(LabError::Config(format!("unknown normalization '{other}'"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::BatchNorm => "batchnorm",
            Normalization::LayerNorm => "layernorm",
            Normalization::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(SparseLinear),
    BatchNorm(BatchNorm),
    LayerNorm(LayerNorm),
    Relu,
}

#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Class indices; softmax cross-entropy.
    Labels(&'a [usize]),
    /// Regression targets; mean squared error.
    Values(&'a Matrix),
}

#[derive(Clone, Debug)]
pub enum LayerGrads {
    Linear(LinearGrads),
    Norm(NormGrads),
    None,
}

/// Gradients for every layer of an [`Mlp`], in layer order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Flat views in the same order as [`Mlp::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrads::Linear(l) => {
                    out.push(l.d_weights.data());
                    if let Some(b) = &l.d_bias {
                        out.push(b.as_slice());
                    }
                }
                LayerGrads::Norm(n) => {
                    out.push(n.d_gamma.as_slice());
                    out.push(n.d_beta.as_slice());
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrads::Linear(l) => {
                    out.push(l.d_weights.data_mut());
                    if let Some(b) = &mut l.d_bias {
                        out.push(b.as_mut_slice());
                    }
                }
                LayerGrads::Norm(n) => {
                    out.push(n.d_gamma.as_mut_slice());
                    out.push(n.d_beta.as_mut_slice());
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn linear(&self, layer: usize) -> Option<&LinearGrads> {
        match self.layers.get(layer) {
            Some(LayerGrads::Linear(l)) => Some(l),
            _ => None,
        }
    }
}

enum Tape {
    Linear(Matrix),
    Bn(BnCache),
    Ln(LnCache),
    Relu(Matrix),
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Self {
        Mlp { layers }
    }

    /// `Linear → [norm] → ReLU` for each hidden width, then a final `Linear`.
    /// `masks[l]` masks linear layer `l`; weights are drawn with `scheme`.
    pub fn classifier(
        widths: &[usize],
        norm: Normalization,
        masks: Vec<Mask>,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || masks.len() != widths.len() - 1 {
            return Err(LabError::InvalidArgument(format!(
                "{} widths need {} masks, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                masks.len()
            )));
        }
        let mut layers = Vec::new();
        for (l, mask) in masks.into_iter().enumerate() {
            let (inp, out) = (widths[l], widths[l + 1]);
            if mask.shape() != (out, inp) {
                return Err(LabError::shape("Mlp::classifier", format!("({out}, {inp})"), format!("{:?}", mask.shape())));
            }
            let w = init_weights(&mask, scheme, rng);
            layers.push(Layer::Linear(SparseLinear::new(w, mask, None)?));
            if l + 2 < widths.len() {
                match norm {
                    Normalization::BatchNorm => layers.push(Layer::BatchNorm(BatchNorm::new(out))),
                    Normalization::LayerNorm => layers.push(Layer::LayerNorm(LayerNorm::new(out))),
                    Normalization::None => {}
                }
                layers.push(Layer::Relu);
            }
        }
        Ok(Mlp { layers })
    }

    /// Indices into `layers` of every linear layer.
    pub fn linear_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Linear(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn linear(&self, layer: usize) -> Option<&SparseLinear> {
        match self.layers.get(layer) {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self, layer: usize) -> Option<&mut SparseLinear> {
        match self.layers.get_mut(layer) {
            Some(Layer::Linear(l)) => Some(l),
            _ => None,
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        for l in &mut self.layers {
            if let Layer::BatchNorm(bn) = l {
                bn.mode = mode;
            }
        }
    }

    /// Every trainable parameter as a mutable flat view.
    pub fn params_mut(&mut self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(SparseLinear { weights, mask, bias }) => {
                    out.push(Param {
                        layer: i,
                        kind: ParamKind::Weight,
                        values: weights.data_mut(),
                        mask: Some(&*mask),
                    });
                    if let Some(b) = bias {
                        out.push(Param {
                            layer: i,
                            kind: ParamKind::Bias,
                            values: b.as_mut_slice(),
                            mask: None,
                        });
                    }
                }
                Layer::BatchNorm(BatchNorm { gamma, beta, .. }) | Layer::LayerNorm(LayerNorm { gamma, beta, .. }) => {
                    out.push(Param {
                        layer: i,
                        kind: ParamKind::Gamma,
                        values: gamma.as_mut_slice(),
                        mask: None,
                    });
                    out.push(Param {
                        layer: i,
                        kind: ParamKind::Beta,
                        values: beta.as_mut_slice(),
                        mask: None,
                    });
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Forward pass only, in the layers' current modes.
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.clone();
        for layer in &mut self.layers {
            a = match layer {
                Layer::Linear(l) => l.forward(&a)?,
                Layer::BatchNorm(bn) => bn.forward(&a)?.0,
                Layer::LayerNorm(ln) => ln.forward(&a)?.0,
                Layer::Relu => relu_forward(&a),
            };
        }
        Ok(a)
    }

    /// Inference with BatchNorm on running statistics; leaves the model untouched.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Linear(l) => l.forward(&a)?,
                Layer::BatchNorm(bn) => bn.forward_eval(&a)?.0,
                Layer::LayerNorm(ln) => ln.forward(&a)?.0,
                Layer::Relu => relu_forward(&a),
            };
        }
        Ok(a)
    }

    /// Loss and exact gradients for every layer. The first linear layer skips
    /// its input gradient.
    pub fn forward_backward(&mut self, x: &Matrix, targets: Targets<'_>) -> Result<(f64, Gradients)> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &mut self.layers {
            let (next, t) = match layer {
                Layer::Linear(l) => (l.forward(&a)?, Tape::Linear(a)),
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward(&a)?;
                    (y, Tape::Bn(c))
                }
                Layer::LayerNorm(ln) => {
                    let (y, c) = ln.forward(&a)?;
                    (y, Tape::Ln(c))
                }
                Layer::Relu => (relu_forward(&a), Tape::Relu(a)),
            };
            tape.push(t);
            a = next;
        }
        let (loss, mut d) = match targets {
            Targets::Labels(labels) => softmax_cross_entropy(&a, labels)?,
            Targets::Values(v) => mse_loss(&a, v)?,
        };

        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for (i, (layer, t)) in self.layers.iter().zip(tape).enumerate().rev() {
            let need_input = i > 0;
            let g = match (layer, t) {
                (Layer::Linear(l), Tape::Linear(h)) => {
                    let mut lg = l.backward(&h, &d, need_input)?;
                    if let Some(dh) = lg.d_input.take() {
                        d = dh;
                    }
                    LayerGrads::Linear(lg)
                }
                (Layer::BatchNorm(bn), Tape::Bn(c)) => {
                    let mut ng = batchnorm_backward(&d, &c, &bn.gamma)?;
                    d = std::mem::replace(&mut ng.d_x, Matrix::zeros(0, 0));
                    LayerGrads::Norm(ng)
                }
                (Layer::LayerNorm(ln), Tape::Ln(c)) => {
                    let mut ng = layernorm_backward(&d, &c, &ln.gamma)?;
                    d = std::mem::replace(&mut ng.d_x, Matrix::zeros(0, 0));
                    LayerGrads::Norm(ng)
                }
                (Layer::Relu, Tape::Relu(input)) => {
                    d = relu_backward(&input, &d)?;
                    LayerGrads::None
                }
                _ => unreachable!("tape entries follow layer order"),
            };
            grads.push(g);
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Loss only, in train mode but without updating BatchNorm running statistics.
    pub fn loss(&self, x: &Matrix, targets: Targets<'_>) -> Result<f64> {
        let mut copy = self.clone();
        for l in &mut copy.layers {
            if let Layer::BatchNorm(bn) = l {
                bn.momentum = 0.0;
            }
        }
        let out = copy.forward(x)?;
        Ok(match targets {
            Targets::Labels(labels) => softmax_cross_entropy(&out, labels)?.0,
            Targets::Values(v) => mse_loss(&out, v)?.0,
        })
    }
}

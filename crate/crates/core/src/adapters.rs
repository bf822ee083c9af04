//! Linear layers with swappable fine-tuning parameterizations.
//!
//! Every layer carries a frozen base weight `w0` plus one of four adapter
//! states. The diagonal-scaling adapter trains one scale per row and one
//! per column of `w0` (n+m scalars); LoRA trains a rank-r factor pair
//! (r·(n+m) scalars); Full trains a dense copy of the weight; Frozen
//! trains nothing. All kinds share the same forward contract
//! `y = x·Wᵀ + bias` and can report their merged dense weight, so a
//! trained adapter can be folded into a plain weight matrix with no
//! inference-time overhead.

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, rank_exact, scale_rows_cols, Matrix};
use crate::rng::dropout_stream;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::str::FromStr;

/// Which parameterization a layer trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Frozen,
    Full,
    Hyper,
    LoRA { r: usize },
}

impl AdapterKind {
    /// Closed-form trainable-parameter count for an n×m weight, excluding
    /// any bias term.
    pub fn trainable_count(&self, n: usize, m: usize) -> usize {
        match self {
            AdapterKind::Frozen => 0,
            AdapterKind::Full => n * m,
            AdapterKind::Hyper => n + m,
            AdapterKind::LoRA { r } => r * (n + m),
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, AdapterKind::Frozen)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdapterKind::Frozen => write!(f, "frozen"),
            AdapterKind::Full => write!(f, "full"),
            AdapterKind::Hyper => write!(f, "hyper"),
            AdapterKind::LoRA { r } => write!(f, "lora:{r}"),
        }
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(AdapterKind::Frozen),
            "full" => Ok(AdapterKind::Full),
            "hyper" => Ok(AdapterKind::Hyper),
            other => {
                if let Some(rank) = other.strip_prefix("lora:") {
                    let r: usize = rank.parse().map_err(|_| {
                        Error::Config(format!("invalid LoRA rank in adapter kind '{other}'"))
                    })?;
                    if r == 0 {
                        return Err(Error::Config("LoRA rank must be >= 1".into()));
                    }
                    Ok(AdapterKind::LoRA { r })
                } else {
                    Err(Error::Config(format!(
                        "unknown adapter kind '{other}' (expected frozen|full|hyper|lora:<r>)"
                    )))
                }
            }
        }
    }
}

impl serde::Serialize for AdapterKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for AdapterKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// LoRA hyperparameters. `alpha` defaults to 2r so the alpha/r scaling
/// stays at 2 across ranks; dropout applies to the adapter-branch input
/// only and defaults to off, which is the right setting for the noiseless
/// representability tasks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraHyperparams {
    pub alpha: Option<f64>,
    #[serde(rename = "dropout")]
    pub dropout_p: f64,
}

impl Default for LoraHyperparams {
    fn default() -> Self {
        LoraHyperparams {
            alpha: None,
            dropout_p: 0.0,
        }
    }
}

/// Identifies one dropout draw; the layer id comes from the layer itself.
#[derive(Debug, Clone, Copy)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

/// Trainable state attached to a frozen base weight.
#[derive(Debug, Clone)]
enum Adapter {
    Frozen,
    Full {
        w: Matrix,
    },
    Hyper {
        a: Vec<f64>,
        b: Vec<f64>,
    },
    LoRA {
        /// n×r, zero-initialized so the initial update vanishes.
        b_mat: Matrix,
        /// r×m, Gaussian(0, 1/r)-initialized.
        a_mat: Matrix,
        alpha: f64,
        dropout_p: f64,
        r: usize,
    },
}

/// A linear layer `y = x·Wᵀ + bias` whose effective weight W depends on
/// the adapter kind. `w0` and `bias` are frozen; `bias` becomes trainable
/// only through `train_bias` (never for Frozen layers).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    name: String,
    layer_id: u64,
    w0: Matrix,
    bias: Option<Vec<f64>>,
    train_bias: bool,
    adapter: Adapter,
}

impl LinearLayer {
    pub fn frozen(name: impl Into<String>, w0: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        Self::build(name.into(), w0, bias, false, Adapter::Frozen)
    }

    pub fn full(
        name: impl Into<String>,
        w0: Matrix,
        bias: Option<Vec<f64>>,
        train_bias: bool,
    ) -> Result<Self> {
        let w = w0.clone();
        Self::build(name.into(), w0, bias, train_bias, Adapter::Full { w })
    }

    /// Diagonal-scaling adapter; both scale vectors start at exactly 1 so
    /// the layer is a bit-level no-op until trained.
    pub fn hyper(
        name: impl Into<String>,
        w0: Matrix,
        bias: Option<Vec<f64>>,
        train_bias: bool,
    ) -> Result<Self> {
        let a = vec![1.0; w0.rows()];
        let b = vec![1.0; w0.cols()];
        Self::build(name.into(), w0, bias, train_bias, Adapter::Hyper { a, b })
    }

    pub fn lora(
        name: impl Into<String>,
        w0: Matrix,
        bias: Option<Vec<f64>>,
        r: usize,
        hp: LoraHyperparams,
        train_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&hp.dropout_p) {
            return Err(Error::Config(format!(
                "LoRA dropout must lie in [0,1), got {}",
                hp.dropout_p
            )));
        }
        let alpha = hp.alpha.unwrap_or(2.0 * r as f64);
        let (n, m) = w0.shape();
        let std = (1.0 / r as f64).sqrt();
        let a_mat = Matrix::from_fn(r, m, |_, _| std * rng.sample::<f64, _>(StandardNormal))?;
        let adapter = Adapter::LoRA {
            b_mat: Matrix::zeros(n, r),
            a_mat,
            alpha,
            dropout_p: hp.dropout_p,
            r,
        };
        Self::build(name.into(), w0, bias, train_bias, adapter)
    }

    /// Dispatch constructor used by model builders.
    pub fn with_kind(
        name: impl Into<String>,
        w0: Matrix,
        bias: Option<Vec<f64>>,
        kind: AdapterKind,
        lora_hp: LoraHyperparams,
        train_bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        match kind {
            AdapterKind::Frozen => {
                if train_bias {
                    return Err(Error::Config(
                        "a frozen layer cannot train its bias".into(),
                    ));
                }
                Self::frozen(name, w0, bias)
            }
            AdapterKind::Full => Self::full(name, w0, bias, train_bias),
            AdapterKind::Hyper => Self::hyper(name, w0, bias, train_bias),
            AdapterKind::LoRA { r } => Self::lora(name, w0, bias, r, lora_hp, train_bias, rng),
        }
    }

    fn build(
        name: String,
        w0: Matrix,
        bias: Option<Vec<f64>>,
        train_bias: bool,
        adapter: Adapter,
    ) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w0.rows() {
                return Err(Error::Shape(format!(
                    "bias length {} vs {} output rows",
                    b.len(),
                    w0.rows()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("bias of layer {name}")));
            }
        }
        if train_bias && matches!(adapter, Adapter::Frozen) {
            return Err(Error::Config(format!(
                "layer {name}: a frozen layer cannot train its bias"
            )));
        }
        if train_bias && bias.is_none() {
            return Err(Error::Config(format!(
                "layer {name}: train_bias set but the layer has no bias"
            )));
        }
        Ok(LinearLayer {
            name,
            layer_id: 0,
            w0,
            bias,
            train_bias,
            adapter,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Stable id used to key dropout streams; assigned by the owning model.
    pub fn layer_id(&self) -> u64 {
        self.layer_id
    }

    pub fn set_layer_id(&mut self, id: u64) {
        self.layer_id = id;
    }

    pub fn kind(&self) -> AdapterKind {
        match &self.adapter {
            Adapter::Frozen => AdapterKind::Frozen,
            Adapter::Full { .. } => AdapterKind::Full,
            Adapter::Hyper { .. } => AdapterKind::Hyper,
            Adapter::LoRA { r, .. } => AdapterKind::LoRA { r: *r },
        }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn train_bias(&self) -> bool {
        self.train_bias
    }

    /// Output dimension n.
    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    /// Input dimension m.
    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn lora_hyperparams(&self) -> Option<(f64, f64)> {
        match &self.adapter {
            Adapter::LoRA {
                alpha, dropout_p, ..
            } => Some((*alpha, *dropout_p)),
            _ => None,
        }
    }

    /// `y = x·Wᵀ (+ bias)`. Pass a dropout key only during training
    /// forward passes; evaluation and merging run with dropout off.
    pub fn forward(&self, x: &Matrix, dropout: Option<DropoutKey>) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "layer {} expects {} input features, got {}",
                self.name,
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = match &self.adapter {
            Adapter::Frozen => matmul_nt(x, &self.w0)?,
            Adapter::Full { w } => matmul_nt(x, w)?,
            Adapter::Hyper { a, b } => {
                let w = scale_rows_cols(&self.w0, a, b)?;
                matmul_nt(x, &w)?
            }
            Adapter::LoRA {
                b_mat,
                a_mat,
                alpha,
                dropout_p,
                r,
            } => {
                let base = matmul_nt(x, &self.w0)?;
                let branch_in = self.apply_dropout(x, *dropout_p, dropout);
                let hidden = matmul_nt(&branch_in, a_mat)?;
                let update = matmul_nt(&hidden, b_mat)?;
                let scale = alpha / *r as f64;
                let mut y = base;
                for (o, u) in y.data_mut().iter_mut().zip(update.data()) {
                    *o += scale * u;
                }
                y
            }
        };
        if let Some(bias) = &self.bias {
            for i in 0..y.rows() {
                for (v, b) in y.row_mut(i).iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
        Ok(y)
    }

    /// Replays the (seed, step, layer_id)-keyed inverted-dropout factors:
    /// 0 with probability p, otherwise 1/(1−p). Forward and backward
    /// regenerate the identical matrix, so the mask is never stored.
    fn dropout_factors(
        &self,
        rows: usize,
        cols: usize,
        dropout_p: f64,
        key: Option<DropoutKey>,
    ) -> Option<Matrix> {
        let key = key?;
        if dropout_p == 0.0 {
            return None;
        }
        let mut rng = dropout_stream(key.seed, key.step, self.layer_id);
        let keep_scale = 1.0 / (1.0 - dropout_p);
        Some(
            Matrix::from_fn(rows, cols, |_, _| {
                let u: f64 = rng.gen();
                if u < dropout_p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .expect("factor entries are finite"),
        )
    }

    pub(crate) fn apply_dropout(
        &self,
        x: &Matrix,
        dropout_p: f64,
        key: Option<DropoutKey>,
    ) -> Matrix {
        match self.dropout_factors(x.rows(), x.cols(), dropout_p, key) {
            None => x.clone(),
            Some(factors) => {
                let mut out = x.clone();
                for (v, f) in out.data_mut().iter_mut().zip(factors.data()) {
                    *v *= f;
                }
                out
            }
        }
    }

    /// The merged dense weight W such that `forward(x) == x·Wᵀ + bias`
    /// (dropout off). Computable ahead of deployment, so the adapted model
    /// runs at the frozen model's inference cost.
    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Adapter::Frozen => self.w0.clone(),
            Adapter::Full { w } => w.clone(),
            Adapter::Hyper { a, b } => {
                scale_rows_cols(&self.w0, a, b).expect("vectors sized at construction")
            }
            Adapter::LoRA {
                b_mat,
                a_mat,
                alpha,
                r,
                ..
            } => {
                let update = matmul(b_mat, a_mat).expect("factor shapes fixed at construction");
                self.w0
                    .add(&update.scale(alpha / *r as f64))
                    .expect("same shape")
            }
        }
    }

    /// `effective_weight() − w0`.
    pub fn delta_weight(&self) -> Matrix {
        self.effective_weight().sub(&self.w0).expect("same shape")
    }

    /// Number of trainable scalars, bias included when it trains.
    pub fn param_count(&self) -> usize {
        let (n, m) = self.w0.shape();
        self.kind().trainable_count(n, m) + if self.train_bias { n } else { 0 }
    }

    /// Snapshot of the trainable parameters in contract order:
    /// Hyper (a, then b), LoRA (B row-major, then A row-major),
    /// Full (w row-major); trainable bias always last.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.adapter {
            Adapter::Frozen => {}
            Adapter::Full { w } => out.extend_from_slice(w.data()),
            Adapter::Hyper { a, b } => {
                out.extend_from_slice(a);
                out.extend_from_slice(b);
            }
            Adapter::LoRA { b_mat, a_mat, .. } => {
                out.extend_from_slice(b_mat.data());
                out.extend_from_slice(a_mat.data());
            }
        }
        if self.train_bias {
            out.extend_from_slice(self.bias.as_ref().expect("checked at construction"));
        }
        out
    }

    /// Writes back a parameter snapshot in the order produced by
    /// [`Self::params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "layer {}: {} parameters offered, {} expected",
                self.name,
                flat.len(),
                self.param_count()
            )));
        }
        if let Some(bad) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter {bad} of layer {}",
                self.name
            )));
        }
        let mut cursor = 0;
        match &mut self.adapter {
            Adapter::Frozen => {}
            Adapter::Full { w } => {
                let k = w.data().len();
                w.data_mut().copy_from_slice(&flat[..k]);
                cursor = k;
            }
            Adapter::Hyper { a, b } => {
                let (na, nb) = (a.len(), b.len());
                a.copy_from_slice(&flat[..na]);
                b.copy_from_slice(&flat[na..na + nb]);
                cursor = na + nb;
            }
            Adapter::LoRA { b_mat, a_mat, .. } => {
                let kb = b_mat.data().len();
                b_mat.data_mut().copy_from_slice(&flat[..kb]);
                cursor = kb;
                let ka = a_mat.data().len();
                a_mat.data_mut().copy_from_slice(&flat[cursor..cursor + ka]);
                cursor += ka;
            }
        }
        if self.train_bias {
            let bias = self.bias.as_mut().expect("checked at construction");
            bias.copy_from_slice(&flat[cursor..]);
        }
        Ok(())
    }

    /// Gradients for one layer. `x` is the batch input the forward pass
    /// saw (rows are examples), `g_y` the loss gradient at the output, and
    /// `dropout` must replay the forward pass's key. Returns the parameter
    /// gradients in [`Self::params`] order plus the gradient at the input.
    pub fn backward(
        &self,
        x: &Matrix,
        g_y: &Matrix,
        dropout: Option<DropoutKey>,
    ) -> Result<(Vec<f64>, Matrix)> {
        if x.cols() != self.in_dim() || g_y.cols() != self.out_dim() || x.rows() != g_y.rows() {
            return Err(Error::Shape(format!(
                "layer {} backward: x {}x{}, g_y {}x{}, weight {}x{}",
                self.name,
                x.rows(),
                x.cols(),
                g_y.rows(),
                g_y.cols(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.param_count());
        let g_x = match &self.adapter {
            Adapter::Frozen => matmul(g_y, &self.w0)?,
            Adapter::Full { w } => {
                let g_w = matmul_tn(g_y, x)?;
                grads.extend_from_slice(g_w.data());
                matmul(g_y, w)?
            }
            Adapter::Hyper { a, b } => {
                // With w' = a_i·w0_ij·b_j the chain rule contracts the
                // dense gradient G = g_yᵀ·x against w0 along one axis:
                // ∂a_i = Σ_j G_ij·w0_ij·b_j, ∂b_j = Σ_i G_ij·w0_ij·a_i.
                let g_dense = matmul_tn(g_y, x)?;
                let (n, m) = self.w0.shape();
                let mut grad_a = vec![0.0; n];
                let mut grad_b = vec![0.0; m];
                for i in 0..n {
                    let grow = g_dense.row(i);
                    let wrow = self.w0.row(i);
                    let ai = a[i];
                    let mut acc = 0.0;
                    for j in 0..m {
                        let gw = grow[j] * wrow[j];
                        acc += gw * b[j];
                        grad_b[j] += gw * ai;
                    }
                    grad_a[i] = acc;
                }
                grads.extend_from_slice(&grad_a);
                grads.extend_from_slice(&grad_b);
                let w_eff = scale_rows_cols(&self.w0, a, b)?;
                matmul(g_y, &w_eff)?
            }
            Adapter::LoRA {
                b_mat,
                a_mat,
                alpha,
                dropout_p,
                r,
            } => {
                let scale = alpha / *r as f64;
                let factors = self.dropout_factors(x.rows(), x.cols(), *dropout_p, dropout);
                let xd = match &factors {
                    None => x.clone(),
                    Some(f) => {
                        let mut out = x.clone();
                        for (v, fac) in out.data_mut().iter_mut().zip(f.data()) {
                            *v *= fac;
                        }
                        out
                    }
                };
                // g_B = s·g_yᵀ·(xd·Aᵀ); g_A = s·(g_y·B)ᵀ·xd.
                let hidden = matmul_nt(&xd, a_mat)?;
                let g_b = matmul_tn(g_y, &hidden)?.scale(scale);
                let g_y_b = matmul(g_y, b_mat)?;
                let g_a = matmul_tn(&g_y_b, &xd)?.scale(scale);
                grads.extend_from_slice(g_b.data());
                grads.extend_from_slice(g_a.data());
                // The input gradient has a frozen path through w0 and a
                // branch path back through the dropout mask.
                let mut g_x = matmul(g_y, &self.w0)?;
                let mut g_branch = matmul(&g_y_b, a_mat)?.scale(scale);
                if let Some(f) = &factors {
                    for (v, fac) in g_branch.data_mut().iter_mut().zip(f.data()) {
                        *v *= fac;
                    }
                }
                for (v, gb) in g_x.data_mut().iter_mut().zip(g_branch.data()) {
                    *v += gb;
                }
                g_x
            }
        };
        if self.train_bias {
            for j in 0..g_y.cols() {
                let mut acc = 0.0;
                for i in 0..g_y.rows() {
                    acc += g_y.get(i, j);
                }
                grads.push(acc);
            }
        }
        Ok((grads, g_x))
    }

    /// Direct access for gradient code and checkpoint serialization.
    pub fn hyper_vectors(&self) -> Option<(&[f64], &[f64])> {
        match &self.adapter {
            Adapter::Hyper { a, b } => Some((a, b)),
            _ => None,
        }
    }

    pub fn lora_factors(&self) -> Option<(&Matrix, &Matrix)> {
        match &self.adapter {
            Adapter::LoRA { b_mat, a_mat, .. } => Some((b_mat, a_mat)),
            _ => None,
        }
    }

    pub fn full_weight(&self) -> Option<&Matrix> {
        match &self.adapter {
            Adapter::Full { w } => Some(w),
            _ => None,
        }
    }
}

/// Checks the structural rank bound for diagonal-scaling updates:
/// rank(diag(a)·w0·diag(b) − w0) can never exceed min(2·rank(w0), n, m).
/// Returns (measured rank of ΔW, bound, bound holds).
pub fn verify_rank_bound(w0: &Matrix, a: &[f64], b: &[f64]) -> Result<(usize, usize, bool)> {
    let delta = scale_rows_cols(w0, a, b)?.sub(w0)?;
    let rank_dw = rank_exact(&delta)?;
    let rank_w0 = rank_exact(w0)?;
    let bound = (2 * rank_w0).min(w0.rows()).min(w0.cols());
    Ok((rank_dw, bound, rank_dw <= bound))
}

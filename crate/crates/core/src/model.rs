//! Models assembled from adapted linear layers: a plain MLP for the
//! teacher-student regression tasks and a tiny single-head transformer
//! whose per-block projection names (q/k/v/o/gate/up/down) are the
//! adapter-targeting surface.
//!
//! The transformer is deliberately minimal: pre-norm RMSNorm without
//! learnable scale, non-causal single-head attention, a GELU-gated feed
//! forward, learned positional embeddings, and a token-embedding matrix
//! tied to the output head. Every linear projection is a [`LinearLayer`],
//! so any of them can carry any adapter kind.

use crate::adapters::{AdapterKind, DropoutKey, LinearLayer, LoraHyperparams};
use crate::error::{Error, Result};
use crate::io::{matrix_sha256, WeightStore};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::stream;
use crate::train::{accuracy, mse, softmax_cross_entropy};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const RMS_EPS: f64 = 1e-6;
const BLOCK_LAYERS: [&str; 7] = [
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

/// Tanh-approximation GELU, the same curve the transformer FFN uses.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Gelu => gelu(v),
            Activation::Identity => v,
        }
    }

    fn prime(&self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_prime(v),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// `widths[0]` inputs through `widths.len()-1` linear layers named
    /// fc0, fc1, …; the activation sits between layers, not after the last.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
    TinyTransformer {
        vocab: usize,
        d_model: usize,
        n_layers: usize,
        #[serde(default = "one")]
        n_heads: usize,
        d_ff: usize,
        max_seq: usize,
    },
}

fn one() -> usize {
    1
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Mlp { widths, .. } => {
                if widths.len() < 2 {
                    return Err(Error::Config(
                        "mlp widths must list at least input and output sizes".into(),
                    ));
                }
                if widths.iter().any(|&w| w == 0) {
                    return Err(Error::Config("mlp widths must all be >= 1".into()));
                }
            }
            ArchSpec::TinyTransformer {
                vocab,
                d_model,
                n_layers,
                n_heads,
                d_ff,
                max_seq,
            } => {
                if *n_heads != 1 {
                    return Err(Error::Config(format!(
                        "only single-head attention is implemented, got n_heads={n_heads}"
                    )));
                }
                if *vocab < 2 || *d_model < 2 || *n_layers < 1 || *d_ff < 1 || *max_seq < 1 {
                    return Err(Error::Config(
                        "transformer sizes must satisfy vocab>=2, d_model>=2, n_layers>=1, d_ff>=1, max_seq>=1"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Linear-layer names in architectural order; the adapter map must
    /// cover exactly this set.
    pub fn layer_names(&self) -> Vec<String> {
        self.layer_shapes().into_iter().map(|(n, _, _)| n).collect()
    }

    /// (name, out_dim, in_dim) for every linear layer in order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        match self {
            ArchSpec::Mlp { widths, .. } => (0..widths.len() - 1)
                .map(|i| (format!("fc{i}"), widths[i + 1], widths[i]))
                .collect(),
            ArchSpec::TinyTransformer {
                d_model,
                n_layers,
                d_ff,
                ..
            } => {
                let (d, f) = (*d_model, *d_ff);
                let mut out = Vec::with_capacity(n_layers * 7);
                for b in 0..*n_layers {
                    for name in BLOCK_LAYERS {
                        let shape = match name {
                            "gate_proj" | "up_proj" => (f, d),
                            "down_proj" => (d, f),
                            _ => (d, d),
                        };
                        out.push((format!("blocks.{b}.{name}"), shape.0, shape.1));
                    }
                }
                out
            }
        }
    }
}

/// Builds an adapter map assigning the same kind to every linear layer.
pub fn uniform_adapter_map(arch: &ArchSpec, kind: AdapterKind) -> BTreeMap<String, AdapterKind> {
    arch.layer_names().into_iter().map(|n| (n, kind)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    /// Layer name → adapter kind; keys must match the architecture's
    /// linear-layer names exactly. Experiment configs may leave it empty;
    /// the harness then assigns each compared kind uniformly per cell.
    #[serde(default)]
    pub adapter_map: BTreeMap<String, AdapterKind>,
    /// Trains token and positional embeddings (transformer pretraining).
    #[serde(default)]
    pub train_embeddings: bool,
    #[serde(default)]
    pub lora: LoraHyperparams,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let names = self.arch.layer_names();
        let missing: Vec<_> = names
            .iter()
            .filter(|n| !self.adapter_map.contains_key(*n))
            .cloned()
            .collect();
        let extra: Vec<_> = self
            .adapter_map
            .keys()
            .filter(|k| !names.contains(k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Structure(format!(
                "adapter_map does not match model layers (missing: [{}], unknown: [{}])",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        if self.train_embeddings && matches!(self.arch, ArchSpec::Mlp { .. }) {
            return Err(Error::Config(
                "train_embeddings is set but the MLP has no embeddings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Embeddings {
    /// vocab × d_model token table, also the tied output head.
    tokens: Matrix,
    /// max_seq × d_model learned positions.
    pos: Matrix,
    trainable: bool,
}

/// One batch of training or evaluation data.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Dense { x: &'a Matrix, y: &'a Matrix },
    Tokens {
        tokens: &'a [Vec<usize>],
        targets: &'a [Vec<usize>],
    },
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Dense { x, .. } => x.rows(),
            Batch::Tokens { tokens, .. } => tokens.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub loss: f64,
    /// Per-position argmax accuracy; token batches only.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LinearLayer>,
    embed: Option<Embeddings>,
}

impl Model {
    /// Builds a model with freshly initialized weights, or with base
    /// weights taken by name from `base` (LoRA factor init still comes
    /// from the seed). Linear weights draw Gaussian(0, 1/√fan_in);
    /// embeddings draw Gaussian(0, 0.1).
    pub fn build(spec: &ModelSpec, seed: u64, base: Option<&WeightStore>) -> Result<Model> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (idx, (name, n, m)) in spec.arch.layer_shapes().into_iter().enumerate() {
            let w0 = match base {
                Some(store) => {
                    let found = store.get(&name).ok_or_else(|| {
                        Error::Structure(format!("base weights are missing layer {name}"))
                    })?;
                    if found.shape() != (n, m) {
                        return Err(Error::Structure(format!(
                            "base weight {name} is {}x{}, architecture wants {n}x{m}",
                            found.rows(),
                            found.cols()
                        )));
                    }
                    found.clone()
                }
                None => {
                    let mut rng = stream(seed, "init", &[idx as u64]);
                    let std = (1.0 / m as f64).sqrt();
                    Matrix::gaussian(n, m, std, &mut rng)
                }
            };
            let kind = spec.adapter_map[&name];
            let mut adapter_rng = stream(seed, "init-adapter", &[idx as u64]);
            let mut layer =
                LinearLayer::with_kind(&name, w0, None, kind, spec.lora, false, &mut adapter_rng)?;
            layer.set_layer_id(idx as u64 + 1);
            layers.push(layer);
        }
        let embed = match &spec.arch {
            ArchSpec::Mlp { .. } => None,
            ArchSpec::TinyTransformer {
                vocab,
                d_model,
                max_seq,
                ..
            } => {
                let grab = |name: &str, rows: usize, tag: &str| -> Result<Matrix> {
                    match base {
                        Some(store) => {
                            let found = store.get(name).ok_or_else(|| {
                                Error::Structure(format!("base weights are missing {name}"))
                            })?;
                            if found.shape() != (rows, *d_model) {
                                return Err(Error::Structure(format!(
                                    "base weight {name} is {}x{}, architecture wants {rows}x{d_model}",
                                    found.rows(),
                                    found.cols()
                                )));
                            }
                            Ok(found.clone())
                        }
                        None => {
                            let mut rng = stream(seed, tag, &[]);
                            Ok(Matrix::gaussian(rows, *d_model, 0.1, &mut rng))
                        }
                    }
                };
                Some(Embeddings {
                    tokens: grab("embed", *vocab, "init-embed")?,
                    pos: grab("pos", *max_seq, "init-pos")?,
                    trainable: spec.train_embeddings,
                })
            }
        };
        Ok(Model {
            spec: spec.clone(),
            layers,
            embed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LinearLayer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn embeddings(&self) -> Option<(&Matrix, &Matrix)> {
        self.embed.as_ref().map(|e| (&e.tokens, &e.pos))
    }

    fn embed_param_count(&self) -> usize {
        match &self.embed {
            Some(e) if e.trainable => e.tokens.data().len() + e.pos.data().len(),
            _ => 0,
        }
    }

    /// Total trainable scalars: embeddings (when trainable) first, then
    /// every layer in architectural order.
    pub fn param_count(&self) -> usize {
        self.embed_param_count() + self.layers.iter().map(LinearLayer::param_count).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if let Some(e) = &self.embed {
            if e.trainable {
                out.extend_from_slice(e.tokens.data());
                out.extend_from_slice(e.pos.data());
            }
        }
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "model has {} trainable parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut cursor = 0;
        if let Some(e) = &mut self.embed {
            if e.trainable {
                let (nt, np) = (e.tokens.data().len(), e.pos.data().len());
                if let Some(bad) = flat[..nt + np].iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("embedding parameter {bad}")));
                }
                e.tokens.data_mut().copy_from_slice(&flat[..nt]);
                e.pos.data_mut().copy_from_slice(&flat[nt..nt + np]);
                cursor = nt + np;
            }
        }
        for layer in &mut self.layers {
            let k = layer.param_count();
            layer.set_params(&flat[cursor..cursor + k])?;
            cursor += k;
        }
        Ok(())
    }

    /// Hashes of every weight that training must never touch: each
    /// layer's base matrix, plus the embeddings when they are frozen.
    pub fn frozen_hashes(&self) -> Vec<(String, String)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.name().to_string(), matrix_sha256(l.w0())))
            .collect();
        if let Some(e) = &self.embed {
            if !e.trainable {
                out.push(("embed".into(), matrix_sha256(&e.tokens)));
                out.push(("pos".into(), matrix_sha256(&e.pos)));
            }
        }
        out
    }

    /// The frozen base weights plus embeddings, for persisting a run's
    /// starting point.
    pub fn base_weight_store(&self) -> WeightStore {
        self.weight_store(|l| l.w0().clone())
    }

    /// Merged dense weights plus current embeddings: the deployable model.
    pub fn effective_weight_store(&self) -> WeightStore {
        self.weight_store(LinearLayer::effective_weight)
    }

    fn weight_store(&self, weight: impl Fn(&LinearLayer) -> Matrix) -> WeightStore {
        let mut matrices: Vec<(String, Matrix)> = self
            .layers
            .iter()
            .map(|l| (l.name().to_string(), weight(l)))
            .collect();
        if let Some(e) = &self.embed {
            matrices.push(("embed".into(), e.tokens.clone()));
            matrices.push(("pos".into(), e.pos.clone()));
        }
        WeightStore {
            matrices,
            meta: serde_json::json!({ "arch": self.spec.arch }),
        }
    }

    /// MLP forward pass. Token models reject dense input.
    pub fn forward_dense(&self, x: &Matrix, dropout: Option<DropoutKey>) -> Result<Matrix> {
        let ArchSpec::Mlp { activation, .. } = &self.spec.arch else {
            return Err(Error::Structure(
                "dense input offered to a token model".into(),
            ));
        };
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, dropout)?;
            if i < last {
                for v in h.data_mut() {
                    *v = activation.apply(*v);
                }
            }
        }
        Ok(h)
    }

    /// Transformer forward pass over a batch of equal-length sequences;
    /// returns logits stacked row-wise, seq_len rows per sequence.
    pub fn forward_tokens(
        &self,
        tokens: &[Vec<usize>],
        dropout: Option<DropoutKey>,
    ) -> Result<Matrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for seq in tokens {
            let cache = self.forward_seq(seq, dropout)?;
            for p in 0..cache.logits.rows() {
                rows.push(cache.logits.row(p).to_vec());
            }
        }
        Matrix::from_rows(&rows)
    }

    /// Loss with dropout off; evaluation entry point.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        match batch {
            Batch::Dense { x, y } => {
                let pred = self.forward_dense(x, None)?;
                Ok(mse(&pred, y)?.0)
            }
            Batch::Tokens { tokens, targets } => {
                let logits = self.forward_tokens(tokens, None)?;
                let flat = flatten_targets(tokens, targets)?;
                Ok(softmax_cross_entropy(&logits, &flat)?.0)
            }
        }
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<EvalSummary> {
        match batch {
            Batch::Dense { .. } => Ok(EvalSummary {
                loss: self.loss(batch)?,
                accuracy: None,
            }),
            Batch::Tokens { tokens, targets } => {
                let logits = self.forward_tokens(tokens, None)?;
                let flat = flatten_targets(tokens, targets)?;
                let (loss, _) = softmax_cross_entropy(&logits, &flat)?;
                Ok(EvalSummary {
                    loss,
                    accuracy: Some(accuracy(&logits, &flat)),
                })
            }
        }
    }

    /// Loss plus the full flat gradient, aligned with [`Self::params`].
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout: Option<DropoutKey>,
    ) -> Result<(f64, Vec<f64>)> {
        match batch {
            Batch::Dense { x, y } => self.mlp_loss_grads(x, y, dropout),
            Batch::Tokens { tokens, targets } => {
                self.transformer_loss_grads(tokens, targets, dropout)
            }
        }
    }

    fn mlp_loss_grads(
        &self,
        x: &Matrix,
        y: &Matrix,
        dropout: Option<DropoutKey>,
    ) -> Result<(f64, Vec<f64>)> {
        let ArchSpec::Mlp { activation, .. } = &self.spec.arch else {
            return Err(Error::Structure(
                "dense input offered to a token model".into(),
            ));
        };
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let z = layer.forward(&h, dropout)?;
            if i < last {
                preacts.push(z.clone());
                h = z;
                for v in h.data_mut() {
                    *v = activation.apply(*v);
                }
            } else {
                h = z;
            }
        }
        let (loss, mut g) = mse(&h, y)?;
        let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (gp, gx) = self.layers[i].backward(&inputs[i], &g, dropout)?;
            per_layer[i] = gp;
            g = gx;
            if i > 0 {
                for (v, z) in g.data_mut().iter_mut().zip(preacts[i - 1].data()) {
                    *v *= activation.prime(*z);
                }
            }
        }
        Ok((loss, per_layer.concat()))
    }

    fn transformer_loss_grads(
        &self,
        tokens: &[Vec<usize>],
        targets: &[Vec<usize>],
        dropout: Option<DropoutKey>,
    ) -> Result<(f64, Vec<f64>)> {
        let flat_targets = flatten_targets(tokens, targets)?;
        let mut caches = Vec::with_capacity(tokens.len());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for seq in tokens {
            let cache = self.forward_seq(seq, dropout)?;
            for p in 0..cache.logits.rows() {
                rows.push(cache.logits.row(p).to_vec());
            }
            caches.push(cache);
        }
        let logits = Matrix::from_rows(&rows)?;
        let (loss, g_logits) = softmax_cross_entropy(&logits, &flat_targets)?;

        let embed = self.embed.as_ref().expect("token model has embeddings");
        let mut acc: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.param_count()])
            .collect();
        let mut g_embed = embed
            .trainable
            .then(|| Matrix::zeros(embed.tokens.rows(), embed.tokens.cols()));
        let mut g_pos = embed
            .trainable
            .then(|| Matrix::zeros(embed.pos.rows(), embed.pos.cols()));

        let mut row = 0;
        for (seq, cache) in tokens.iter().zip(&caches) {
            let len = seq.len();
            let g_seq = Matrix::from_fn(len, g_logits.cols(), |i, j| g_logits.get(row + i, j))?;
            row += len;
            self.backward_seq(
                seq,
                cache,
                &g_seq,
                dropout,
                &mut acc,
                g_embed.as_mut(),
                g_pos.as_mut(),
            )?;
        }

        let mut flat = Vec::with_capacity(self.param_count());
        if let (Some(ge), Some(gp)) = (&g_embed, &g_pos) {
            flat.extend_from_slice(ge.data());
            flat.extend_from_slice(gp.data());
        }
        flat.extend(acc.concat());
        Ok((loss, flat))
    }

    fn forward_seq(&self, seq: &[usize], dropout: Option<DropoutKey>) -> Result<SeqCache> {
        let ArchSpec::TinyTransformer {
            vocab,
            d_model,
            n_layers,
            max_seq,
            ..
        } = &self.spec.arch
        else {
            return Err(Error::Structure(
                "token input offered to a dense model".into(),
            ));
        };
        if seq.is_empty() || seq.len() > *max_seq {
            return Err(Error::Shape(format!(
                "sequence length {} outside 1..={max_seq}",
                seq.len()
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= *vocab) {
            return Err(Error::Shape(format!(
                "token {bad} out of range for vocab {vocab}"
            )));
        }
        let embed = self.embed.as_ref().expect("token model has embeddings");
        let len = seq.len();
        let h0 = Matrix::from_fn(len, *d_model, |p, j| {
            embed.tokens.get(seq[p], j) + embed.pos.get(p, j)
        })?;

        let scale = 1.0 / (*d_model as f64).sqrt();
        let mut h = h0.clone();
        let mut blocks = Vec::with_capacity(*n_layers);
        for b in 0..*n_layers {
            let l = &self.layers[b * 7..(b + 1) * 7];
            let attn_norm = rmsnorm(&h);
            let q = l[0].forward(&attn_norm.y, dropout)?;
            let k = l[1].forward(&attn_norm.y, dropout)?;
            let v = l[2].forward(&attn_norm.y, dropout)?;
            let scores = matmul_nt(&q, &k)?.scale(scale);
            let attn = softmax_rows(&scores);
            let z = matmul(&attn, &v)?;
            let o = l[3].forward(&z, dropout)?;
            let h_mid = h.add(&o)?;
            let ffn_norm = rmsnorm(&h_mid);
            let g_pre = l[4].forward(&ffn_norm.y, dropout)?;
            let u = l[5].forward(&ffn_norm.y, dropout)?;
            let mut gact = g_pre.clone();
            for val in gact.data_mut() {
                *val = gelu(*val);
            }
            let mut f = gact.clone();
            for (fv, uv) in f.data_mut().iter_mut().zip(u.data()) {
                *fv *= uv;
            }
            let d_out = l[6].forward(&f, dropout)?;
            h = h_mid.add(&d_out)?;
            blocks.push(BlockCache {
                attn_norm,
                q,
                k,
                v,
                attn,
                z,
                ffn_norm,
                g_pre,
                u,
                gact,
                f,
            });
        }
        let final_norm = rmsnorm(&h);
        let logits = matmul_nt(&final_norm.y, &embed.tokens)?;
        Ok(SeqCache {
            blocks,
            final_norm,
            logits,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_seq(
        &self,
        seq: &[usize],
        cache: &SeqCache,
        g_logits: &Matrix,
        dropout: Option<DropoutKey>,
        acc: &mut [Vec<f64>],
        mut g_embed: Option<&mut Matrix>,
        mut g_pos: Option<&mut Matrix>,
    ) -> Result<()> {
        let embed = self.embed.as_ref().expect("token model has embeddings");
        let d_model = embed.tokens.cols();
        let scale = 1.0 / (d_model as f64).sqrt();

        // Tied head: logits = Hn·Eᵀ contributes to both Hn and E.
        let g_hn = matmul(g_logits, &embed.tokens)?;
        if let Some(ge) = g_embed.as_deref_mut() {
            let head = matmul_tn(g_logits, &cache.final_norm.y)?;
            for (a, b) in ge.data_mut().iter_mut().zip(head.data()) {
                *a += b;
            }
        }
        let mut g_h = rmsnorm_backward(&cache.final_norm, &g_hn);

        for b in (0..cache.blocks.len()).rev() {
            let l = &self.layers[b * 7..(b + 1) * 7];
            let bc = &cache.blocks[b];

            // FFN residual: h_out = h_mid + down(gelu(gate)∘up).
            let (gp_down, g_f) = l[6].backward(&bc.f, &g_h, dropout)?;
            add_into(&mut acc[b * 7 + 6], &gp_down);
            let mut g_gact = g_f.clone();
            for (v, uv) in g_gact.data_mut().iter_mut().zip(bc.u.data()) {
                *v *= uv;
            }
            let mut g_u = g_f;
            for (v, gv) in g_u.data_mut().iter_mut().zip(bc.gact.data()) {
                *v *= gv;
            }
            let mut g_gpre = g_gact;
            for (v, z) in g_gpre.data_mut().iter_mut().zip(bc.g_pre.data()) {
                *v *= gelu_prime(*z);
            }
            let (gp_gate, g_y1) = l[4].backward(&bc.ffn_norm.y, &g_gpre, dropout)?;
            add_into(&mut acc[b * 7 + 4], &gp_gate);
            let (gp_up, g_y2) = l[5].backward(&bc.ffn_norm.y, &g_u, dropout)?;
            add_into(&mut acc[b * 7 + 5], &gp_up);
            let g_yn = g_y1.add(&g_y2)?;
            let g_hmid = g_h.add(&rmsnorm_backward(&bc.ffn_norm, &g_yn))?;

            // Attention residual: h_mid = h_in + o(attn·v).
            let (gp_o, g_z) = l[3].backward(&bc.z, &g_hmid, dropout)?;
            add_into(&mut acc[b * 7 + 3], &gp_o);
            let g_attn = matmul_nt(&g_z, &bc.v)?;
            let g_v = matmul_tn(&bc.attn, &g_z)?;
            let g_scores = softmax_backward_rows(&bc.attn, &g_attn);
            let g_q = matmul(&g_scores, &bc.k)?.scale(scale);
            let g_k = matmul_tn(&g_scores, &bc.q)?.scale(scale);
            let (gp_q, g_x1) = l[0].backward(&bc.attn_norm.y, &g_q, dropout)?;
            add_into(&mut acc[b * 7], &gp_q);
            let (gp_k, g_x2) = l[1].backward(&bc.attn_norm.y, &g_k, dropout)?;
            add_into(&mut acc[b * 7 + 1], &gp_k);
            let (gp_v, g_x3) = l[2].backward(&bc.attn_norm.y, &g_v, dropout)?;
            add_into(&mut acc[b * 7 + 2], &gp_v);
            let g_xn = g_x1.add(&g_x2)?.add(&g_x3)?;
            g_h = g_hmid.add(&rmsnorm_backward(&bc.attn_norm, &g_xn))?;
        }

        if let (Some(ge), Some(gp)) = (g_embed.as_deref_mut(), g_pos.as_deref_mut()) {
            for (p, &t) in seq.iter().enumerate() {
                for j in 0..d_model {
                    let g = g_h.get(p, j);
                    ge.set(t, j, ge.get(t, j) + g);
                    gp.set(p, j, gp.get(p, j) + g);
                }
            }
        }
        Ok(())
    }
}

fn flatten_targets(tokens: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Vec<usize>> {
    if tokens.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} sequences vs {} target sequences",
            tokens.len(),
            targets.len()
        )));
    }
    let mut flat = Vec::new();
    for (seq, tgt) in tokens.iter().zip(targets) {
        if seq.len() != tgt.len() {
            return Err(Error::Shape(format!(
                "sequence length {} vs target length {}",
                seq.len(),
                tgt.len()
            )));
        }
        flat.extend_from_slice(tgt);
    }
    Ok(flat)
}

fn add_into(acc: &mut [f64], grads: &[f64]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        *a += g;
    }
}

struct SeqCache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    logits: Matrix,
}

struct BlockCache {
    attn_norm: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    z: Matrix,
    ffn_norm: NormCache,
    g_pre: Matrix,
    u: Matrix,
    gact: Matrix,
    f: Matrix,
}

struct NormCache {
    x: Matrix,
    inv: Vec<f64>,
    y: Matrix,
}

/// Row-wise RMS normalization without learnable scale:
/// y = x / sqrt(mean(x²) + eps).
fn rmsnorm(x: &Matrix) -> NormCache {
    let d = x.cols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = y.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for v in row.iter_mut() {
            *v *= r;
        }
    }
    NormCache {
        x: x.clone(),
        inv,
        y,
    }
}

fn rmsnorm_backward(cache: &NormCache, g_y: &Matrix) -> Matrix {
    let d = cache.x.cols() as f64;
    let mut g_x = g_y.clone();
    for i in 0..cache.x.rows() {
        let r = cache.inv[i];
        let xrow = cache.x.row(i);
        let dot: f64 = g_y.row(i).iter().zip(xrow).map(|(g, x)| g * x).sum();
        let coef = r * r * r * dot / d;
        for (g, &x) in g_x.row_mut(i).iter_mut().zip(xrow) {
            *g = *g * r - x * coef;
        }
    }
    g_x
}

fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_backward_rows(attn: &Matrix, g_attn: &Matrix) -> Matrix {
    let mut g_s = g_attn.clone();
    for i in 0..attn.rows() {
        let arow = attn.row(i);
        let dot: f64 = g_attn.row(i).iter().zip(arow).map(|(g, a)| g * a).sum();
        for (g, &a) in g_s.row_mut(i).iter_mut().zip(arow) {
            *g = a * (*g - dot);
        }
    }
    g_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{grad_error_ratio, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mlp_spec(widths: Vec<usize>, activation: Activation, kind: AdapterKind) -> ModelSpec {
        let arch = ArchSpec::Mlp { widths, activation };
        ModelSpec {
            adapter_map: uniform_adapter_map(&arch, kind),
            arch,
            train_embeddings: false,
            lora: LoraHyperparams::default(),
        }
    }

    fn tiny_transformer_spec(kind: AdapterKind, train_embeddings: bool) -> ModelSpec {
        let arch = ArchSpec::TinyTransformer {
            vocab: 5,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 6,
            max_seq: 3,
        };
        ModelSpec {
            adapter_map: uniform_adapter_map(&arch, kind),
            arch,
            train_embeddings,
            lora: LoraHyperparams::default(),
        }
    }

    #[test]
    fn transformer_layer_names_follow_the_block_convention() {
        let arch = ArchSpec::TinyTransformer {
            vocab: 8,
            d_model: 4,
            n_layers: 2,
            n_heads: 1,
            d_ff: 8,
            max_seq: 4,
        };
        let names = arch.layer_names();
        assert_eq!(names.len(), 14);
        assert_eq!(names[0], "blocks.0.q_proj");
        assert_eq!(names[6], "blocks.0.down_proj");
        assert_eq!(names[7], "blocks.1.q_proj");
        assert_eq!(names[13], "blocks.1.down_proj");
    }

    #[test]
    fn spec_validation_reports_map_mismatches() {
        let mut spec = mlp_spec(vec![4, 3], Activation::Identity, AdapterKind::Hyper);
        spec.adapter_map.remove("fc0");
        spec.adapter_map.insert("fc9".into(), AdapterKind::Full);
        let err = spec.validate().unwrap_err();
        match err {
            Error::Structure(msg) => {
                assert!(msg.contains("fc0") && msg.contains("fc9"), "{msg}");
            }
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn multi_head_is_rejected() {
        let arch = ArchSpec::TinyTransformer {
            vocab: 8,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq: 4,
        };
        assert!(matches!(arch.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_frozen_identity_mlp_is_a_plain_matmul() {
        let spec = mlp_spec(vec![3, 2], Activation::Identity, AdapterKind::Frozen);
        let model = Model::build(&spec, 7, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let direct = matmul_nt(&x, model.layers()[0].w0()).unwrap();
        let via_model = model.forward_dense(&x, None).unwrap();
        assert_eq!(via_model.data(), direct.data());
        assert_eq!(model.param_count(), 0);
    }

    #[test]
    fn model_params_roundtrip() {
        let spec = tiny_transformer_spec(AdapterKind::Hyper, true);
        let mut model = Model::build(&spec, 3, None).unwrap();
        let p = model.params();
        assert_eq!(p.len(), model.param_count());
        // vocab*d + max_seq*d embeddings, then (d+d)*4 attn + (6+4)*2 + (4+6).
        assert_eq!(p.len(), 5 * 4 + 3 * 4 + 4 * (4 + 4) + 2 * (6 + 4) + (4 + 6));
        let mut q = p.clone();
        for (i, v) in q.iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        model.set_params(&q).unwrap();
        assert_eq!(model.params(), q);
    }

    #[test]
    fn transformer_logits_have_vocab_columns() {
        let spec = tiny_transformer_spec(AdapterKind::Frozen, false);
        let model = Model::build(&spec, 11, None).unwrap();
        let logits = model
            .forward_tokens(&[vec![0, 1, 2], vec![4, 4, 3]], None)
            .unwrap();
        assert_eq!(logits.shape(), (6, 5));
        assert!(logits.data().iter().all(|v| v.is_finite()));
        assert!(matches!(
            model.forward_tokens(&[vec![0, 9, 1]], None),
            Err(Error::Shape(_))
        ));
    }

    fn model_fd_check(model: &mut Model, batch: &Batch) {
        let (_, analytic) = model.loss_and_grads(batch, None).unwrap();
        let mut params = model.params();
        assert_eq!(analytic.len(), params.len());
        for k in 0..params.len() {
            let saved = params[k];
            params[k] = saved + FD_STEP;
            model.set_params(&params).unwrap();
            let plus = model.loss(batch).unwrap();
            params[k] = saved - FD_STEP;
            model.set_params(&params).unwrap();
            let minus = model.loss(batch).unwrap();
            params[k] = saved;
            model.set_params(&params).unwrap();
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let ratio = grad_error_ratio(fd, analytic[k]);
            assert!(ratio <= 1.0, "param {k}: fd {fd} vs analytic {}", analytic[k]);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut spec = mlp_spec(vec![3, 4, 2], Activation::Gelu, AdapterKind::Hyper);
        spec.adapter_map.insert("fc1".into(), AdapterKind::LoRA { r: 2 });
        let mut model = Model::build(&spec, 5, None).unwrap();
        let mut p = model.params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        model.set_params(&p).unwrap();
        let x = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let y = Matrix::gaussian(4, 2, 1.0, &mut rng);
        model_fd_check(&mut model, &Batch::Dense { x: &x, y: &y });
    }

    #[test]
    fn relu_mlp_gradients_match_finite_differences() {
        // ReLU is non-differentiable at 0; random inputs keep preacts away
        // from the kink with probability 1.
        let spec = mlp_spec(vec![3, 5, 2], Activation::Relu, AdapterKind::Full);
        let mut model = Model::build(&spec, 9, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Matrix::gaussian(4, 3, 1.0, &mut rng);
        let y = Matrix::gaussian(4, 2, 1.0, &mut rng);
        model_fd_check(&mut model, &Batch::Dense { x: &x, y: &y });
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut spec = tiny_transformer_spec(AdapterKind::Hyper, true);
        spec.adapter_map
            .insert("blocks.0.v_proj".into(), AdapterKind::LoRA { r: 2 });
        spec.adapter_map
            .insert("blocks.0.up_proj".into(), AdapterKind::Full);
        spec.adapter_map
            .insert("blocks.0.k_proj".into(), AdapterKind::Frozen);
        let mut model = Model::build(&spec, 13, None).unwrap();
        let mut p = model.params();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        model.set_params(&p).unwrap();
        let tokens = vec![vec![0, 2, 4], vec![1, 1, 3]];
        let targets = vec![vec![2, 0, 4], vec![1, 3, 1]];
        model_fd_check(
            &mut model,
            &Batch::Tokens {
                tokens: &tokens,
                targets: &targets,
            },
        );
    }

    #[test]
    fn effective_store_rebuild_preserves_outputs() {
        let spec = tiny_transformer_spec(AdapterKind::Hyper, false);
        let mut model = Model::build(&spec, 21, None).unwrap();
        let mut p = model.params();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        model.set_params(&p).unwrap();

        let store = model.effective_weight_store();
        let frozen_spec = tiny_transformer_spec(AdapterKind::Frozen, false);
        let rebuilt = Model::build(&frozen_spec, 0, Some(&store)).unwrap();

        let tokens = vec![vec![3, 0, 1]];
        let a = model.forward_tokens(&tokens, None).unwrap();
        let b = rebuilt.forward_tokens(&tokens, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn frozen_hashes_cover_base_weights_and_frozen_embeddings() {
        let spec = tiny_transformer_spec(AdapterKind::Hyper, false);
        let model = Model::build(&spec, 2, None).unwrap();
        let hashes = model.frozen_hashes();
        assert_eq!(hashes.len(), 7 + 2);
        assert!(hashes.iter().any(|(n, _)| n == "embed"));

        let pretrain = tiny_transformer_spec(AdapterKind::Full, true);
        let model = Model::build(&pretrain, 2, None).unwrap();
        assert_eq!(model.frozen_hashes().len(), 7);
    }

    #[test]
    fn model_spec_roundtrips_through_json() {
        let spec = tiny_transformer_spec(AdapterKind::LoRA { r: 4 }, true);
        let text = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(text.contains("\"lora:4\""));
    }
}

//! Synthetic tasks sized for a laptop, plus the oracles that make their
//! outcomes checkable.
//!
//! The two teacher tasks are designed as a complementary pair: the scaled
//! teacher lies exactly in the diagonal-scaling adapter's hypothesis
//! class (row/column rescalings of the base weight), while the low-rank
//! teacher lies exactly in LoRA's. Each task ships with an oracle for the
//! best loss the *other* class can reach — a truncated-SVD bound for
//! rank-r updates, and an alternating-least-squares optimum over the
//! scale vectors — so trained results are compared against ground truth
//! rather than against each other's noise.

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{matmul, matmul_nt, matmul_tn, rank_exact, scale_rows_cols, svd_values, Matrix};
use crate::model::{uniform_adapter_map, ArchSpec, Batch, Model, ModelSpec};
use crate::rng::{derive_seed, stream};
use crate::train::{train, TrainConfig, TrainResult};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

const ALS_MAX_ITERS: usize = 500;
const ALS_REL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    ScaledTeacher,
    LowRankTeacher,
    SeqCopy,
    SeqSort,
}

/// One flat task description; which size fields matter depends on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskName,
    /// Teacher output dimension.
    #[serde(default)]
    pub n: usize,
    /// Teacher input dimension.
    #[serde(default)]
    pub m: usize,
    /// Rank of the low-rank teacher's update; 0 means teacher == base.
    #[serde(default)]
    pub r_true: usize,
    #[serde(default)]
    pub vocab: usize,
    #[serde(default)]
    pub seq_len: usize,
    /// Gaussian label noise; 0 for representability experiments.
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be >= 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        match self.kind {
            TaskName::ScaledTeacher | TaskName::LowRankTeacher => {
                if self.n < 2 || self.m < 2 {
                    return Err(Error::Config(
                        "teacher tasks need n >= 2 and m >= 2".into(),
                    ));
                }
                if self.kind == TaskName::LowRankTeacher && self.r_true >= self.n.min(self.m) {
                    return Err(Error::Config(format!(
                        "r_true {} must be < min(n, m) = {}",
                        self.r_true,
                        self.n.min(self.m)
                    )));
                }
            }
            TaskName::SeqCopy | TaskName::SeqSort => {
                if self.vocab < 4 || self.seq_len < 2 {
                    return Err(Error::Config(
                        "sequence tasks need vocab >= 4 and seq_len >= 2".into(),
                    ));
                }
                // The eval split is drawn by rejection against the train
                // set, which must leave room.
                let capacity = (self.vocab as u128).saturating_pow(self.seq_len as u32);
                if capacity < (self.n_train + self.n_eval) as u128 * 2 {
                    return Err(Error::Config(format!(
                        "vocab^seq_len = {capacity} is too small for disjoint splits of {} + {}",
                        self.n_train, self.n_eval
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Train/eval data. Splits come from separate seed-derived streams, and
/// token eval sequences are additionally rejected against the train set,
/// so the splits are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Dense {
        train_x: Matrix,
        train_y: Matrix,
        eval_x: Matrix,
        eval_y: Matrix,
    },
    Tokens {
        train_tokens: Vec<Vec<usize>>,
        train_targets: Vec<Vec<usize>>,
        eval_tokens: Vec<Vec<usize>>,
        eval_targets: Vec<Vec<usize>>,
    },
}

/// A materialized subset of a dataset, alive for one optimizer step.
#[derive(Debug, Clone)]
pub enum OwnedBatch {
    Dense { x: Matrix, y: Matrix },
    Tokens {
        tokens: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
    },
}

impl OwnedBatch {
    pub fn as_batch(&self) -> Batch<'_> {
        match self {
            OwnedBatch::Dense { x, y } => Batch::Dense { x, y },
            OwnedBatch::Tokens { tokens, targets } => Batch::Tokens { tokens, targets },
        }
    }
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        match self {
            Dataset::Dense { train_x, .. } => train_x.rows(),
            Dataset::Tokens { train_tokens, .. } => train_tokens.len(),
        }
    }

    pub fn eval_len(&self) -> usize {
        match self {
            Dataset::Dense { eval_x, .. } => eval_x.rows(),
            Dataset::Tokens { eval_tokens, .. } => eval_tokens.len(),
        }
    }

    pub fn train_batch(&self) -> Batch<'_> {
        match self {
            Dataset::Dense {
                train_x, train_y, ..
            } => Batch::Dense {
                x: train_x,
                y: train_y,
            },
            Dataset::Tokens {
                train_tokens,
                train_targets,
                ..
            } => Batch::Tokens {
                tokens: train_tokens,
                targets: train_targets,
            },
        }
    }

    pub fn eval_batch(&self) -> Batch<'_> {
        match self {
            Dataset::Dense { eval_x, eval_y, .. } => Batch::Dense {
                x: eval_x,
                y: eval_y,
            },
            Dataset::Tokens {
                eval_tokens,
                eval_targets,
                ..
            } => Batch::Tokens {
                tokens: eval_tokens,
                targets: eval_targets,
            },
        }
    }

    /// Materializes the train examples at `idx`, in that order.
    pub fn gather_train(&self, idx: &[usize]) -> Result<OwnedBatch> {
        match self {
            Dataset::Dense {
                train_x, train_y, ..
            } => {
                let x = Matrix::from_fn(idx.len(), train_x.cols(), |i, j| train_x.get(idx[i], j))?;
                let y = Matrix::from_fn(idx.len(), train_y.cols(), |i, j| train_y.get(idx[i], j))?;
                Ok(OwnedBatch::Dense { x, y })
            }
            Dataset::Tokens {
                train_tokens,
                train_targets,
                ..
            } => Ok(OwnedBatch::Tokens {
                tokens: idx.iter().map(|&i| train_tokens[i].clone()).collect(),
                targets: idx.iter().map(|&i| train_targets[i].clone()).collect(),
            }),
        }
    }

    /// JSON-lines serialization of one split: `{"x":[...],"y":[...]}` per
    /// dense example, `{"tokens":[...],"target":[...]}` per sequence.
    /// Floats carry 17 significant digits, so the bytes are stable.
    pub fn to_jsonl(&self, eval_split: bool) -> String {
        let mut out = String::new();
        match self {
            Dataset::Dense {
                train_x,
                train_y,
                eval_x,
                eval_y,
            } => {
                let (x, y) = if eval_split {
                    (eval_x, eval_y)
                } else {
                    (train_x, train_y)
                };
                for i in 0..x.rows() {
                    out.push_str("{\"x\":[");
                    push_join(&mut out, x.row(i));
                    out.push_str("],\"y\":[");
                    push_join(&mut out, y.row(i));
                    out.push_str("]}\n");
                }
            }
            Dataset::Tokens {
                train_tokens,
                train_targets,
                eval_tokens,
                eval_targets,
            } => {
                let (t, g) = if eval_split {
                    (eval_tokens, eval_targets)
                } else {
                    (train_tokens, train_targets)
                };
                for (seq, tgt) in t.iter().zip(g) {
                    out.push_str("{\"tokens\":");
                    push_usize_array(&mut out, seq);
                    out.push_str(",\"target\":");
                    push_usize_array(&mut out, tgt);
                    out.push_str("}\n");
                }
            }
        }
        out
    }
}

fn push_join(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
}

fn push_usize_array(out: &mut String, vals: &[usize]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
    out.push(']');
}

/// A regression task: frozen base `w0`, dense `teacher` the data follows,
/// and the ground-truth structure the teacher was built from.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub w0: Matrix,
    pub teacher: Matrix,
    /// Scale vectors of a scaled teacher.
    pub scales: Option<(Vec<f64>, Vec<f64>)>,
    /// (B*, A*) factors of a low-rank teacher; None when r_true == 0.
    pub factors: Option<(Matrix, Matrix)>,
    pub data: Dataset,
}

/// Every task kind behind one constructor, for the harness.
#[derive(Debug, Clone)]
pub enum TaskInstance {
    Teacher(TeacherTask),
    Seq(Dataset),
}

impl TaskInstance {
    pub fn dataset(&self) -> &Dataset {
        match self {
            TaskInstance::Teacher(t) => &t.data,
            TaskInstance::Seq(d) => d,
        }
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<TaskInstance> {
    match spec.kind {
        TaskName::ScaledTeacher => Ok(TaskInstance::Teacher(make_scaled_teacher(spec)?)),
        TaskName::LowRankTeacher => Ok(TaskInstance::Teacher(make_lowrank_teacher(spec)?)),
        TaskName::SeqCopy | TaskName::SeqSort => Ok(TaskInstance::Seq(make_seq_task(spec)?)),
    }
}

/// Draws the base weight for a teacher task and asserts it is full rank,
/// which Gaussian(0, 1/√m) entries give almost surely.
fn teacher_base(spec: &TaskSpec) -> Result<Matrix> {
    let mut rng = stream(spec.seed, "task-w0", &[]);
    let w0 = Matrix::gaussian(spec.n, spec.m, (1.0 / spec.m as f64).sqrt(), &mut rng);
    let rank = rank_exact(&w0)?;
    if rank < spec.n.min(spec.m) {
        return Err(Error::Numeric(format!(
            "teacher base weight drew rank {rank} < {}",
            spec.n.min(spec.m)
        )));
    }
    Ok(w0)
}

fn teacher_dataset(spec: &TaskSpec, teacher: &Matrix) -> Result<Dataset> {
    let draw = |tag: &str, count: usize| -> Result<(Matrix, Matrix)> {
        let mut rng = stream(spec.seed, tag, &[]);
        let x = Matrix::gaussian(count, spec.m, 1.0, &mut rng);
        let mut y = matmul_nt(&x, teacher)?;
        if spec.noise_std > 0.0 {
            let mut noise = stream(spec.seed, &format!("{tag}-noise"), &[]);
            for v in y.data_mut() {
                *v += spec.noise_std * noise.sample::<f64, _>(StandardNormal);
            }
        }
        Ok((x, y))
    };
    let (train_x, train_y) = draw("data-train", spec.n_train)?;
    let (eval_x, eval_y) = draw("data-eval", spec.n_eval)?;
    Ok(Dataset::Dense {
        train_x,
        train_y,
        eval_x,
        eval_y,
    })
}

/// Teacher = diag(a*)·W₀·diag(b*) with scales log-uniform in [0.5, 2]:
/// exactly representable by the diagonal-scaling adapter.
pub fn make_scaled_teacher(spec: &TaskSpec) -> Result<TeacherTask> {
    if spec.kind != TaskName::ScaledTeacher {
        return Err(Error::Config("spec kind is not scaled_teacher".into()));
    }
    spec.validate()?;
    let mut rng = stream(spec.seed, "task-scales", &[]);
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|_| {
                let lo = 0.5f64.ln();
                let hi = 2.0f64.ln();
                rng.gen_range(lo..hi).exp()
            })
            .collect()
    };
    let a_star = draw(spec.n);
    let b_star = draw(spec.m);
    scaled_teacher_with_scales(spec, a_star, b_star)
}

/// Scaled teacher with caller-chosen scale vectors; the ones-vector case
/// degenerates to teacher == base.
pub fn scaled_teacher_with_scales(
    spec: &TaskSpec,
    a_star: Vec<f64>,
    b_star: Vec<f64>,
) -> Result<TeacherTask> {
    spec.validate()?;
    let w0 = teacher_base(spec)?;
    let teacher = scale_rows_cols(&w0, &a_star, &b_star)?;
    let data = teacher_dataset(spec, &teacher)?;
    Ok(TeacherTask {
        w0,
        teacher,
        scales: Some((a_star, b_star)),
        factors: None,
        data,
    })
}

/// Teacher = W₀ + B*·A* with rank-r_true update: exactly representable by
/// LoRA with r >= r_true, generally outside the diagonal-scaling class.
pub fn make_lowrank_teacher(spec: &TaskSpec) -> Result<TeacherTask> {
    if spec.kind != TaskName::LowRankTeacher {
        return Err(Error::Config("spec kind is not low_rank_teacher".into()));
    }
    spec.validate()?;
    let w0 = teacher_base(spec)?;
    let (teacher, factors) = if spec.r_true == 0 {
        (w0.clone(), None)
    } else {
        let mut rng = stream(spec.seed, "task-factors", &[]);
        // Entry variances multiply to 1/m, matching the base weight's.
        let b_star = Matrix::gaussian(spec.n, spec.r_true, (1.0 / spec.r_true as f64).sqrt(), &mut rng);
        let a_star = Matrix::gaussian(spec.r_true, spec.m, (1.0 / spec.m as f64).sqrt(), &mut rng);
        let teacher = w0.add(&matmul(&b_star, &a_star)?)?;
        (teacher, Some((b_star, a_star)))
    };
    let data = teacher_dataset(spec, &teacher)?;
    Ok(TeacherTask {
        w0,
        teacher,
        scales: None,
        factors,
        data,
    })
}

/// Token sequences with per-position targets: SeqCopy repeats the input,
/// SeqSort emits it in ascending order.
pub fn make_seq_task(spec: &TaskSpec) -> Result<Dataset> {
    if !matches!(spec.kind, TaskName::SeqCopy | TaskName::SeqSort) {
        return Err(Error::Config("spec kind is not a sequence task".into()));
    }
    spec.validate()?;
    let target_of = |seq: &[usize]| -> Vec<usize> {
        match spec.kind {
            TaskName::SeqCopy => seq.to_vec(),
            TaskName::SeqSort => {
                let mut s = seq.to_vec();
                s.sort_unstable();
                s
            }
            _ => unreachable!("kind checked above"),
        }
    };

    let mut rng = stream(spec.seed, "seq-train", &[]);
    let draw_seq = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        (0..spec.seq_len).map(|_| rng.gen_range(0..spec.vocab)).collect()
    };
    let mut train_tokens = Vec::with_capacity(spec.n_train);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    for _ in 0..spec.n_train {
        let seq = draw_seq(&mut rng);
        seen.insert(seq.clone());
        train_tokens.push(seq);
    }

    let mut eval_rng = stream(spec.seed, "seq-eval", &[]);
    let mut eval_tokens = Vec::with_capacity(spec.n_eval);
    let mut attempts = 0usize;
    while eval_tokens.len() < spec.n_eval {
        attempts += 1;
        if attempts > 1000 * spec.n_eval {
            return Err(Error::Config(
                "could not draw an eval split disjoint from train".into(),
            ));
        }
        let seq = draw_seq(&mut eval_rng);
        if seen.insert(seq.clone()) {
            eval_tokens.push(seq);
        }
    }

    let train_targets = train_tokens.iter().map(|s| target_of(s)).collect();
    let eval_targets = eval_tokens.iter().map(|s| target_of(s)).collect();
    Ok(Dataset::Tokens {
        train_tokens,
        train_targets,
        eval_tokens,
        eval_targets,
    })
}

// --- Pretraining handoff -----------------------------------------------------

/// Results of one paired adaptation comparison. `adapted` starts from the
/// pretrained weights, `scratch` from a random initialization; both train
/// under the identical adapt config.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub pretrain: TrainResult,
    pub adapted: TrainResult,
    pub scratch: TrainResult,
}

fn tasks_share_dimensions(a: &TaskSpec, b: &TaskSpec) -> Result<()> {
    let dense = |k: TaskName| matches!(k, TaskName::ScaledTeacher | TaskName::LowRankTeacher);
    let compatible = if dense(a.kind) && dense(b.kind) {
        a.n == b.n && a.m == b.m
    } else if !dense(a.kind) && !dense(b.kind) {
        a.vocab == b.vocab && a.seq_len == b.seq_len
    } else {
        false
    };
    if compatible {
        Ok(())
    } else {
        Err(Error::Config(
            "pretrain and adapt tasks must share input/output dimensions".into(),
        ))
    }
}

/// Full-parameter pretraining on one task, then two adaptations of a
/// second task from the `adapt_spec` adapters: one on top of the
/// pretrained weights, one on top of a fresh random initialization.
///
/// The pretraining model trains every layer (and the embeddings, for
/// token models); its merged effective weights become the adapted model's
/// frozen base. Both adapt runs share the model seed, so seed-drawn
/// adapter state starts identical and the comparison is paired.
pub fn pretrain_then_adapt(
    adapt_spec: &ModelSpec,
    pretrain_task: &TaskSpec,
    adapt_task: &TaskSpec,
    pretrain_cfg: &TrainConfig,
    adapt_cfg: &TrainConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    tasks_share_dimensions(pretrain_task, adapt_task)?;
    let pretrain_spec = ModelSpec {
        arch: adapt_spec.arch.clone(),
        adapter_map: uniform_adapter_map(&adapt_spec.arch, AdapterKind::Full),
        train_embeddings: matches!(adapt_spec.arch, ArchSpec::TinyTransformer { .. }),
        lora: adapt_spec.lora,
    };
    let pretrain_data = make_task(pretrain_task)?;
    let mut base_model = Model::build(&pretrain_spec, derive_seed(seed, "pretrain-model", &[]), None)?;
    let pretrain = train(&mut base_model, pretrain_data.dataset(), pretrain_cfg)?;
    let store = base_model.effective_weight_store();

    let adapt_data = make_task(adapt_task)?;
    let adapt_seed = derive_seed(seed, "adapt-model", &[]);
    let mut adapted_model = Model::build(adapt_spec, adapt_seed, Some(&store))?;
    let adapted = train(&mut adapted_model, adapt_data.dataset(), adapt_cfg)?;
    let mut scratch_model = Model::build(adapt_spec, adapt_seed, None)?;
    let scratch = train(&mut scratch_model, adapt_data.dataset(), adapt_cfg)?;

    Ok(AdaptOutcome {
        pretrain,
        adapted,
        scratch,
    })
}

// --- Oracles -----------------------------------------------------------------

/// Exact minimum train MSE any rank-r update can reach on this data.
///
/// With residual R = teacher − w0 and train inputs X, the train error of
/// an update D is ||(D − R)·Xᵀ||²/(N·n), and restricting D to rank ≤ r
/// makes the minimum the tail singular-value energy of R·Xᵀ (truncated
/// SVD is the best low-rank approximation in Frobenius norm; mapping
/// through the full-column-rank Xᵀ preserves ranks).
pub fn best_rank_r_mse(w0: &Matrix, teacher: &Matrix, x: &Matrix, r: usize) -> Result<f64> {
    let residual = teacher.sub(w0)?;
    let projected = matmul_nt(&residual, x)?;
    let spectrum = svd_values(&projected)?;
    let tail: f64 = spectrum.values().iter().skip(r).map(|s| s * s).sum();
    Ok(tail / (x.rows() as f64 * w0.rows() as f64))
}

/// Train MSE of the scaling pair (a, b) against the teacher on inputs X.
pub fn hyper_mse(
    w0: &Matrix,
    teacher: &Matrix,
    x: &Matrix,
    a: &[f64],
    b: &[f64],
) -> Result<f64> {
    let diff = scale_rows_cols(w0, a, b)?.sub(teacher)?;
    let projected = matmul_nt(&diff, x)?;
    let total: f64 = projected.data().iter().map(|v| v * v).sum();
    Ok(total / (x.rows() as f64 * w0.rows() as f64))
}

/// Best train MSE the diagonal-scaling class can reach, found by
/// alternating least squares over (a, b).
///
/// Each half-step is an exact minimizer — rows decouple for a, and the b
/// system ((W̃ᵀW̃)∘(XᵀX))·b = c is solved by Cholesky — so the objective
/// is non-increasing from every start. Starts: the identity, each caller
/// start (pass a trained (a, b) to guarantee oracle ≤ trained loss), and
/// `n_random_starts` log-uniform draws.
pub fn hyper_oracle_mse(
    w0: &Matrix,
    teacher: &Matrix,
    x: &Matrix,
    extra_starts: &[(Vec<f64>, Vec<f64>)],
    n_random_starts: usize,
    seed: u64,
) -> Result<f64> {
    let (n, m) = w0.shape();
    let s = matmul_tn(x, x)?;
    let mut starts: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![1.0; n], vec![1.0; m])];
    starts.extend_from_slice(extra_starts);
    let mut rng = stream(seed, "als-start", &[]);
    for _ in 0..n_random_starts {
        let mut draw = |count: usize| -> Vec<f64> {
            (0..count)
                .map(|_| rng.gen_range(0.5f64.ln()..2.0f64.ln()).exp())
                .collect()
        };
        let a = draw(n);
        let b = draw(m);
        starts.push((a, b));
    }

    let mut best: Option<f64> = None;
    for (mut a, mut b) in starts {
        if a.len() != n || b.len() != m {
            return Err(Error::Shape(format!(
                "ALS start sized {}x{}, weight is {n}x{m}",
                a.len(),
                b.len()
            )));
        }
        let mut prev = hyper_mse(w0, teacher, x, &a, &b)?;
        for _ in 0..ALS_MAX_ITERS {
            als_a_step(w0, teacher, &s, &mut a, &b);
            if als_b_step(w0, teacher, &s, &a, &mut b).is_err() {
                // Singular system for this start; keep its best value.
                break;
            }
            let now = hyper_mse(w0, teacher, x, &a, &b)?;
            if prev - now <= ALS_REL_TOL * prev.max(1e-300) {
                prev = now.min(prev);
                break;
            }
            prev = now;
        }
        best = Some(best.map_or(prev, |b: f64| b.min(prev)));
    }
    best.ok_or_else(|| Error::Numeric("ALS produced no finite optimum".into()))
}

/// Exact a-minimizer for fixed b: rows decouple into scalar least squares
/// a_i = (ŵ_i·S·t_iᵀ)/(ŵ_i·S·ŵ_iᵀ) with ŵ = w0·diag(b).
fn als_a_step(w0: &Matrix, teacher: &Matrix, s: &Matrix, a: &mut [f64], b: &[f64]) {
    let m = w0.cols();
    for i in 0..w0.rows() {
        let w_row = w0.row(i);
        let t_row = teacher.row(i);
        let mut num = 0.0;
        let mut den = 0.0;
        for q in 0..m {
            let mut sw = 0.0;
            let mut st = 0.0;
            let s_row = s.row(q);
            for p in 0..m {
                sw += w_row[p] * b[p] * s_row[p];
            }
            for p in 0..m {
                st += t_row[p] * s_row[p];
            }
            let wq = w_row[q] * b[q];
            num += wq * st;
            den += wq * sw;
        }
        if den.abs() > 1e-300 {
            a[i] = num / den;
        }
    }
}

/// Exact b-minimizer for fixed a: solve ((W̃ᵀW̃)∘S)·b = c with
/// c_p = Σ_q S_pq·(W̃ᵀT)_pq, W̃ = diag(a)·w0.
fn als_b_step(
    w0: &Matrix,
    teacher: &Matrix,
    s: &Matrix,
    a: &[f64],
    b: &mut [f64],
) -> Result<()> {
    let (n, m) = w0.shape();
    let mut lhs = Matrix::zeros(m, m);
    let mut c = vec![0.0; m];
    for p in 0..m {
        for q in 0..m {
            let mut g = 0.0;
            let mut h = 0.0;
            for i in 0..n {
                g += a[i] * a[i] * w0.get(i, p) * w0.get(i, q);
                h += a[i] * w0.get(i, p) * teacher.get(i, q);
            }
            lhs.set(p, q, g * s.get(p, q));
            c[p] += s.get(p, q) * h;
        }
    }
    let solved = crate::linalg::cholesky_solve(&lhs, &c)?;
    b.copy_from_slice(&solved);
    Ok(())
}

/// Identifiability check: only the products a_i·b_j are observable, so
/// compares them against a*_i·b*_j over entries where w0 is nonzero.
/// Returns the largest absolute gap.
pub fn max_product_gap(
    w0: &Matrix,
    a: &[f64],
    b: &[f64],
    a_star: &[f64],
    b_star: &[f64],
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..w0.rows() {
        for j in 0..w0.cols() {
            if w0.get(i, j) != 0.0 {
                worst = worst.max((a[i] * b[j] - a_star[i] * b_star[j]).abs());
            }
        }
    }
    worst
}

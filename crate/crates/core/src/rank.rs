//! Spectral analysis of adapter updates.
//!
//! For each adapted layer the update ΔW = W' − W₀ is decomposed into
//! singular values, the directions with σ ≥ 1e-2 are counted, and the
//! count is normalized by rank(W₀) into r̂. The diagonal-scaling rank
//! bound rank(ΔW) ≤ min(2·rank(W₀), n, m) is re-checked on every record
//! as a runtime assertion, not just in tests: a violation on a
//! diagonal-scaling layer means the analysis was fed mismatched weights
//! (or the implementation is wrong), and the report is refused.

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::io::{fmt_f64, WeightStore};
use crate::linalg::{svd_values, Matrix, RANK_REL_TOL};
use crate::model::Model;
use serde::{Deserialize, Serialize};

/// Absolute singular-value threshold above which an update direction
/// counts as non-trivial.
pub const RANK_ABS_THRESHOLD: f64 = 1e-2;
/// Leading singular values retained per record.
pub const TOP_SIGMAS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRankRecord {
    pub layer: String,
    pub n: usize,
    pub m: usize,
    pub rank_w0: usize,
    pub count_nontrivial: usize,
    /// count_nontrivial / rank_w0.
    pub r_hat: f64,
    pub top_sigmas: Vec<f64>,
    /// min(2·rank_w0, n, m).
    pub bound: usize,
    pub bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// Absolute threshold applied to σ(ΔW).
    pub delta_threshold: f64,
    /// Relative threshold (times σ₁) defining rank(W₀).
    pub w0_rel_threshold: f64,
    pub layers: Vec<LayerRankRecord>,
    /// Layers skipped because W₀ is the zero matrix.
    pub skipped: Vec<String>,
}

/// Spectrum statistics of one update. Pure in the matrices: the record
/// does not depend on which adapter produced ΔW.
pub fn analyze_layer(
    name: &str,
    w0: &Matrix,
    w_prime: &Matrix,
    threshold: f64,
) -> Result<LayerRankRecord> {
    if w0.shape() != w_prime.shape() {
        return Err(Error::Shape(format!(
            "rank analysis of {name}: base is {}x{}, adapted is {}x{}",
            w0.rows(),
            w0.cols(),
            w_prime.rows(),
            w_prime.cols()
        )));
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Error::Config(format!(
            "rank threshold must be positive, got {threshold}"
        )));
    }
    let rank_w0 = svd_values(w0)?.rank_relative();
    if rank_w0 == 0 {
        return Err(Error::Numeric(format!(
            "rank analysis of {name}: base weight is the zero matrix"
        )));
    }
    let delta = w_prime.sub(w0)?;
    let spectrum = svd_values(&delta)?;
    let count_nontrivial = spectrum.values().iter().filter(|s| **s >= threshold).count();
    let (n, m) = w0.shape();
    let bound = (2 * rank_w0).min(n).min(m);
    Ok(LayerRankRecord {
        layer: name.to_string(),
        n,
        m,
        rank_w0,
        count_nontrivial,
        r_hat: count_nontrivial as f64 / rank_w0 as f64,
        top_sigmas: spectrum.values().iter().take(TOP_SIGMAS).copied().collect(),
        bound,
        bound_holds: count_nontrivial <= bound,
    })
}

fn is_zero(m: &Matrix) -> bool {
    m.data().iter().all(|v| *v == 0.0)
}

/// Enforces the diagonal-scaling rank bound on a finished record.
fn assert_hyper_bound(record: &LayerRankRecord, kind: AdapterKind) -> Result<()> {
    if kind == AdapterKind::Hyper && !record.bound_holds {
        return Err(Error::RankBound {
            layer: record.layer.clone(),
            count: record.count_nontrivial,
            bound: record.bound,
        });
    }
    Ok(())
}

/// Per-layer report of `after` against `before`, both taken at their
/// effective (merged) weights. Layers appear in architectural order;
/// frozen layers naturally report count 0.
pub fn analyze_model(before: &Model, after: &Model, threshold: f64) -> Result<RankReport> {
    let names_match = before.layers().len() == after.layers().len()
        && before
            .layers()
            .iter()
            .zip(after.layers())
            .all(|(b, a)| b.name() == a.name() && b.w0().shape() == a.w0().shape());
    if !names_match {
        return Err(Error::Structure(
            "rank analysis needs models with matching architectures".into(),
        ));
    }
    let mut layers = Vec::new();
    let mut skipped = Vec::new();
    for (b, a) in before.layers().iter().zip(after.layers()) {
        let base = b.effective_weight();
        if is_zero(&base) {
            skipped.push(a.name().to_string());
            continue;
        }
        let record = analyze_layer(a.name(), &base, &a.effective_weight(), threshold)?;
        assert_hyper_bound(&record, a.kind())?;
        layers.push(record);
    }
    Ok(RankReport {
        delta_threshold: threshold,
        w0_rel_threshold: RANK_REL_TOL,
        layers,
        skipped,
    })
}

/// Report of a trained adapter model against its own frozen base.
pub fn analyze_adapted_model(model: &Model, threshold: f64) -> Result<RankReport> {
    let mut layers = Vec::new();
    let mut skipped = Vec::new();
    for layer in model.layers() {
        if is_zero(layer.w0()) {
            skipped.push(layer.name().to_string());
            continue;
        }
        let record =
            analyze_layer(layer.name(), layer.w0(), &layer.effective_weight(), threshold)?;
        assert_hyper_bound(&record, layer.kind())?;
        layers.push(record);
    }
    Ok(RankReport {
        delta_threshold: threshold,
        w0_rel_threshold: RANK_REL_TOL,
        layers,
        skipped,
    })
}

/// Report comparing two weight directories by matrix name. Adapter kinds
/// are unknown here, so bound violations are recorded but not fatal.
pub fn analyze_weight_stores(
    before: &WeightStore,
    after: &WeightStore,
    threshold: f64,
) -> Result<RankReport> {
    let mut layers = Vec::new();
    let mut skipped = Vec::new();
    for (name, base) in &before.matrices {
        let Some(adapted) = after.get(name) else {
            return Err(Error::Structure(format!(
                "weight stores disagree: {name} is missing from the second store"
            )));
        };
        if is_zero(base) {
            skipped.push(name.clone());
            continue;
        }
        layers.push(analyze_layer(name, base, adapted, threshold)?);
    }
    if let Some((name, _)) = after.matrices.iter().find(|(n, _)| before.get(n).is_none()) {
        return Err(Error::Structure(format!(
            "weight stores disagree: {name} is missing from the first store"
        )));
    }
    Ok(RankReport {
        delta_threshold: threshold,
        w0_rel_threshold: RANK_REL_TOL,
        layers,
        skipped,
    })
}

impl RankReport {
    /// Mean r̂ over analyzed layers; None when nothing was analyzed.
    pub fn mean_r_hat(&self) -> Option<f64> {
        if self.layers.is_empty() {
            return None;
        }
        Some(self.layers.iter().map(|l| l.r_hat).sum::<f64>() / self.layers.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// `layer,n,m,rank_w0,count,r_hat` rows in layer order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,n,m,rank_w0,count,r_hat\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.layer,
                l.n,
                l.m,
                l.rank_w0,
                l.count_nontrivial,
                fmt_f64(l.r_hat)
            ));
        }
        out
    }

    /// Bar chart of r̂ per layer, color-grouped by the layer's module
    /// suffix (q_proj, gate_proj, fc0, ...). Self-contained SVG.
    pub fn to_svg(&self) -> String {
        const BAR_W: usize = 34;
        const GAP: usize = 10;
        const PLOT_H: f64 = 220.0;
        const LEFT: usize = 46;
        const TOP: usize = 34;
        const PALETTE: [&str; 8] = [
            "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0",
            "#797979",
        ];

        let suffix = |name: &str| name.rsplit('.').next().unwrap_or(name).to_string();
        let mut groups: Vec<String> = Vec::new();
        for l in &self.layers {
            let g = suffix(&l.layer);
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        let y_max = self
            .layers
            .iter()
            .map(|l| l.r_hat)
            .fold(1.0f64, f64::max)
            .ceil();
        let width = LEFT + self.layers.len().max(1) * (BAR_W + GAP) + 24;
        let height = TOP + PLOT_H as usize + 74;

        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
        );
        svg.push_str(&format!(
            "  <text x=\"{LEFT}\" y=\"18\" font-size=\"13\">normalized update rank \
             (σ ≥ {}, rank(W₀) at {}·σ₁)</text>\n",
            self.delta_threshold, self.w0_rel_threshold
        ));
        // Axis with gridlines at multiples of 0.25.
        let y_of = |v: f64| TOP as f64 + PLOT_H * (1.0 - v / y_max);
        let mut tick = 0.0;
        while tick <= y_max + 1e-9 {
            let y = y_of(tick);
            svg.push_str(&format!(
                "  <line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n",
                width - 16
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{tick}</text>\n",
                LEFT - 6,
                y + 3.5
            ));
            tick += 0.25;
        }
        for (i, l) in self.layers.iter().enumerate() {
            let x = LEFT + i * (BAR_W + GAP);
            let color = {
                let gi = groups.iter().position(|g| *g == suffix(&l.layer)).unwrap();
                PALETTE[gi % PALETTE.len()]
            };
            let top = y_of(l.r_hat);
            let h = (TOP as f64 + PLOT_H) - top;
            svg.push_str(&format!(
                "  <rect x=\"{x}\" y=\"{top:.1}\" width=\"{BAR_W}\" height=\"{h:.1}\" fill=\"{color}\"><title>{}: r_hat {}</title></rect>\n",
                l.layer,
                fmt_f64(l.r_hat)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" font-size=\"9\" text-anchor=\"middle\" \
                 transform=\"rotate(35 {} {})\">{}</text>\n",
                x + BAR_W / 2,
                TOP + PLOT_H as usize + 14,
                x + BAR_W / 2,
                TOP + PLOT_H as usize + 14,
                l.layer
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

//! Waiver diagnostics over attention weights and value vectors.
//!
//! A position is an attention sink when the mean weight it receives from
//! eligible query rows reaches the sink threshold, and has a low value norm
//! when its value vector's L2 norm falls strictly below the chosen quantile
//! of that head's value norms. A waiver is both at once.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::capture::{names, AttentionRegime, Capture, Intervention};
use crate::error::{Error, Result};
use crate::tensor::{dot, l1_norm, l2_norm, Tensor};

pub const DEFAULT_SINK_THRESHOLD: f64 = 0.3;
pub const DEFAULT_VNORM_QUANTILE: f64 = 0.1;

/// Norms below this are treated as zero when forming ratios.
pub const ZERO_NORM: f64 = 1e-12;

const STOCHASTIC_TOL: f64 = 1e-5;

pub const CSV_HEADER: &str = "layer,head,position,sink_score,v_l1,v_l2,l1_over_l2,flags,intervened";

/// Printed in CSV cells for undefined values.
pub const UNDEFINED: &str = "NA";

fn check_square(weights: &Tensor) -> Result<usize> {
    match weights.shape() {
        &[r, c] if r == c => Ok(r),
        other => Err(Error::Dimension {
            op: "attention weights",
            lhs: other.to_vec(),
            rhs: vec![other[0], other[0]],
        }),
    }
}

fn check_stochastic(weights: &Tensor) -> Result<()> {
    for i in 0..weights.rows() {
        let sum: f64 = weights.row(i).iter().map(|&w| w as f64).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Query rows that count towards the sink score of key `j`: rows after `j`
/// under causal attention, every other row under global attention.
pub fn eligible_rows(len: usize, j: usize, regime: AttentionRegime) -> Vec<usize> {
    match regime {
        AttentionRegime::Causal => (j + 1..len).collect(),
        AttentionRegime::Global => (0..len).filter(|&i| i != j).collect(),
    }
}

/// Mean attention weight key position `j` receives from eligible rows.
pub fn sink_score(weights: &Tensor, j: usize, regime: AttentionRegime) -> Result<f64> {
    let len = check_square(weights)?;
    if j >= len {
        return Err(Error::Index { index: j, len });
    }
    check_stochastic(weights)?;
    let rows = eligible_rows(len, j, regime);
    if rows.is_empty() {
        return Err(Error::EmptyAverage { position: j });
    }
    Ok(rows.iter().map(|&i| weights.at(i, j) as f64).sum::<f64>() / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VNorm {
    pub position: usize,
    pub l1: f64,
    pub l2: f64,
    /// `None` when the vector is numerically zero.
    pub l1_over_l2: Option<f64>,
}

pub fn v_norm_profile(v: &Tensor) -> Vec<VNorm> {
    (0..v.rows())
        .map(|position| {
            let row = v.row(position);
            let l1 = l1_norm(row) as f64;
            let l2 = l2_norm(row) as f64;
            VNorm {
                position,
                l1,
                l2,
                l1_over_l2: (l2 >= ZERO_NORM).then(|| l1 / l2),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CosEntry {
    pub dot: f64,
    pub q_norm: f64,
    pub k_norm: f64,
    /// `None` when either norm is numerically zero.
    pub cos_theta: Option<f64>,
}

/// Dot products of every query row with every key row, split into norms
/// and the cosine of the angle between them.
#[derive(Debug, Clone, PartialEq)]
pub struct CosDecomposition {
    queries: usize,
    keys: usize,
    entries: Vec<CosEntry>,
}

impl CosDecomposition {
    pub fn get(&self, i: usize, j: usize) -> &CosEntry {
        &self.entries[i * self.keys + j]
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }
}

pub fn cos_decompose(q: &Tensor, k: &Tensor) -> Result<CosDecomposition> {
    if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "cos_decompose",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let k_norms: Vec<f64> = (0..k.rows()).map(|j| l2_norm(k.row(j)) as f64).collect();
    let mut entries = Vec::with_capacity(q.rows() * k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let q_norm = l2_norm(qi) as f64;
        for (j, &k_norm) in k_norms.iter().enumerate() {
            let d = qi
                .iter()
                .zip(k.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
            let cos_theta = (q_norm >= ZERO_NORM && k_norm >= ZERO_NORM)
                .then(|| (d / (q_norm * k_norm)).clamp(-1.0, 1.0));
            entries.push(CosEntry {
                dot: d,
                q_norm,
                k_norm,
                cos_theta,
            });
        }
    }
    Ok(CosDecomposition {
        queries: q.rows(),
        keys: k.rows(),
        entries,
    })
}

fn check_weights_and_values(weights: &Tensor, v: &Tensor, j: usize) -> Result<usize> {
    let len = check_square(weights)?;
    if v.rank() != 2 || v.rows() != len {
        return Err(Error::Dimension {
            op: "weights/values",
            lhs: weights.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if j >= len {
        return Err(Error::Index { index: j, len });
    }
    Ok(len)
}

fn relative_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let base = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if diff == 0.0 {
        Some(0.0)
    } else if base < ZERO_NORM {
        None
    } else {
        Some(diff / base)
    }
}

/// For each query row `i`, the relative L2 change of the weighted sum when
/// column `j` is dropped and the remaining weights renormalised:
/// `|out'(i) - out(i)| / |out(i)|`.
///
/// Entry `i == j` is `None`, as is any row that puts all of its weight on
/// `j` (renormalisation undefined) or whose output is zero while the
/// recomputed one is not.
pub fn leave_one_out_delta(weights: &Tensor, v: &Tensor, j: usize) -> Result<Vec<Option<f64>>> {
    let len = check_weights_and_values(weights, v, j)?;
    let width = v.cols();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let a_ij = weights.at(i, j) as f64;
        if i == j || a_ij >= 1.0 {
            out.push(None);
            continue;
        }
        let mut full = vec![0.0f64; width];
        let mut without = vec![0.0f64; width];
        for l in 0..len {
            let a = weights.at(i, l) as f64;
            for (c, &x) in v.row(l).iter().enumerate() {
                full[c] += a * x as f64;
                if l != j {
                    without[c] += a * x as f64;
                }
            }
        }
        let renorm = 1.0 - a_ij;
        without.iter_mut().for_each(|x| *x /= renorm);
        out.push(relative_distance(&full, &without));
    }
    Ok(out)
}

/// Share of each output row carried by column `j`'s term:
/// `a(i,j) * |v(j)| / |out(i)|`, the magnitude the weighted sum loses if
/// that term alone is removed without renormalising.
pub fn term_share(weights: &Tensor, v: &Tensor, j: usize) -> Result<Vec<Option<f64>>> {
    let len = check_weights_and_values(weights, v, j)?;
    let vj = l2_norm(v.row(j)) as f64;
    Ok((0..len)
        .map(|i| {
            if i == j {
                return None;
            }
            let mut acc = vec![0.0f64; v.cols()];
            for l in 0..len {
                let a = weights.at(i, l) as f64;
                for (c, &x) in v.row(l).iter().enumerate() {
                    acc[c] += a * x as f64;
                }
            }
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let term = weights.at(i, j) as f64 * vj;
            if term == 0.0 {
                Some(0.0)
            } else {
                (norm >= ZERO_NORM).then(|| term / norm)
            }
        })
        .collect())
}

/// Linear-interpolation quantile of `values` (not necessarily sorted).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub sink_threshold: f64,
    pub vnorm_quantile: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            sink_threshold: DEFAULT_SINK_THRESHOLD,
            vnorm_quantile: DEFAULT_VNORM_QUANTILE,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sink_threshold) {
            return Err(Error::Config(format!(
                "sink threshold must lie in [0, 1], got {}",
                self.sink_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.vnorm_quantile) {
            return Err(Error::Config(format!(
                "value-norm quantile must lie in [0, 1], got {}",
                self.vnorm_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Flags {
    pub attention_sink: bool,
    pub low_v_norm: bool,
    pub waiver: bool,
}

impl Flags {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.attention_sink {
            parts.push("attention_sink");
        }
        if self.low_v_norm {
            parts.push("low_v_norm");
        }
        if self.waiver {
            parts.push("waiver");
        }
        parts.join("|")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaiverRow {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub sink_score: Option<f64>,
    pub v_l1: f64,
    pub v_l2: f64,
    pub l1_over_l2: Option<f64>,
    /// Mean cosine between eligible queries and this position's key, when
    /// the capture holds queries and keys.
    pub mean_cos: Option<f64>,
    pub k_norm: Option<f64>,
    pub flags: Flags,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaiverReport {
    pub thresholds: Thresholds,
    pub regime: AttentionRegime,
    pub interventions: Vec<Intervention>,
    pub intervened_positions: Vec<usize>,
    pub rows: Vec<WaiverRow>,
}

impl WaiverReport {
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let mut heads: Vec<_> = self.rows.iter().map(|r| (r.layer, r.head)).collect();
        heads.dedup();
        heads
    }

    pub fn rows_for(&self, layer: usize, head: usize) -> impl Iterator<Item = &WaiverRow> {
        self.rows
            .iter()
            .filter(move |r| r.layer == layer && r.head == head)
    }

    /// Every position flagged as a waiver in any layer or head.
    pub fn waiver_positions(&self) -> BTreeSet<usize> {
        self.rows
            .iter()
            .filter(|r| r.flags.waiver)
            .map(|r| r.position)
            .collect()
    }

    /// Heads in `layer` that flag `position` as a waiver.
    pub fn waiver_heads(&self, layer: usize, position: usize) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer == layer && r.position == position && r.flags.waiver)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.layer,
                r.head,
                r.position,
                opt(r.sink_score),
                r.v_l1,
                r.v_l2,
                opt(r.l1_over_l2),
                r.flags.label(),
                r.intervened
            );
        }
        out
    }
}

fn infer_regime(capture: &Capture, heads: &[(usize, usize)]) -> Result<AttentionRegime> {
    if let Some(r) = capture.metadata.regime {
        return Ok(r);
    }
    for &(l, h) in heads {
        let w = capture.require(&names::attn_weights(l, h))?;
        let len = check_square(w)?;
        for i in 0..len {
            if (i + 1..len).any(|j| w.at(i, j) != 0.0) {
                return Ok(AttentionRegime::Global);
            }
        }
    }
    Ok(AttentionRegime::Causal)
}

/// Scores every `(layer, head, position)` in the capture.
pub fn detect_waivers(capture: &Capture, thresholds: Thresholds) -> Result<WaiverReport> {
    thresholds.validate()?;
    let heads = capture.attention_heads();
    if heads.is_empty() {
        return Err(Error::IncompleteCapture(vec![names::attn_weights(0, 0)]));
    }
    let missing: Vec<String> = heads
        .iter()
        .map(|&(l, h)| names::value(l, h))
        .filter(|n| !capture.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteCapture(missing));
    }
    let regime = infer_regime(capture, &heads)?;
    let intervened = capture.intervened_positions();

    let mut rows = Vec::new();
    for (layer, head) in heads {
        let weights = capture.require(&names::attn_weights(layer, head))?;
        let v = capture.require(&names::value(layer, head))?;
        let len = check_square(weights)?;
        if v.rank() != 2 || v.rows() != len {
            return Err(Error::Dimension {
                op: "detect_waivers",
                lhs: weights.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        check_stochastic(weights)?;
        let qk = match (
            capture.get(&names::query(layer, head)),
            capture.get(&names::key(layer, head)),
        ) {
            (Some(q), Some(k)) => Some(cos_decompose(q, k)?),
            _ => None,
        };
        let profile = v_norm_profile(v);
        let l2s: Vec<f64> = profile.iter().map(|p| p.l2).collect();
        let cutoff = quantile(&l2s, thresholds.vnorm_quantile);
        for p in profile {
            let j = p.position;
            let eligible = eligible_rows(len, j, regime);
            let sink = (!eligible.is_empty()).then(|| {
                eligible
                    .iter()
                    .map(|&i| weights.at(i, j) as f64)
                    .sum::<f64>()
                    / eligible.len() as f64
            });
            let (mean_cos, k_norm) = match &qk {
                Some(dec) => {
                    let cosines: Vec<f64> = eligible
                        .iter()
                        .filter_map(|&i| dec.get(i, j).cos_theta)
                        .collect();
                    let mean = (!cosines.is_empty())
                        .then(|| cosines.iter().sum::<f64>() / cosines.len() as f64);
                    (mean, Some(dec.get(0, j).k_norm))
                }
                None => (None, None),
            };
            let attention_sink = sink.is_some_and(|s| s >= thresholds.sink_threshold);
            let low_v_norm = p.l2 < cutoff;
            rows.push(WaiverRow {
                layer,
                head,
                position: j,
                sink_score: sink,
                v_l1: p.l1,
                v_l2: p.l2,
                l1_over_l2: p.l1_over_l2,
                mean_cos,
                k_norm,
                flags: Flags {
                    attention_sink,
                    low_v_norm,
                    waiver: attention_sink && low_v_norm,
                },
                intervened: intervened.contains(&j),
            });
        }
    }
    Ok(WaiverReport {
        thresholds,
        regime,
        interventions: capture.metadata.interventions.clone(),
        intervened_positions: intervened,
        rows,
    })
}

/// Dot of two rows, exposed for callers that check the cosine identity.
pub fn row_dot(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f32 {
    dot(a.row(i), b.row(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MaskMatrix;
    use crate::capture::CaptureMetadata;
    use crate::model::{build_synthetic_waiver_model, forward, ModelConfig, ModelRegime};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sink_score_examples() {
        let eye = Tensor::identity(4);
        assert_eq!(sink_score(&eye, 0, AttentionRegime::Causal).unwrap(), 0.0);

        let w = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.1, 0.1],
        ])
        .unwrap();
        let s = sink_score(&w, 0, AttentionRegime::Causal).unwrap();
        assert!((s - (0.9 + 0.8) / 2.0).abs() < 1e-7);

        let third = 1.0f32 / 3.0;
        let uniform = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![third, third, third],
        ])
        .unwrap();
        let s = sink_score(&uniform, 0, AttentionRegime::Causal).unwrap();
        assert!((s - 5.0 / 12.0).abs() < 1e-7);
    }

    #[test]
    fn sink_score_errors() {
        let eye = Tensor::identity(3);
        assert!(matches!(
            sink_score(&eye, 2, AttentionRegime::Causal),
            Err(Error::EmptyAverage { position: 2 })
        ));
        assert!(sink_score(&eye, 2, AttentionRegime::Global).is_ok());
        let bad = Tensor::from_rows(&[vec![0.5, 0.4], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            sink_score(&bad, 0, AttentionRegime::Global),
            Err(Error::NotStochastic { row: 0, .. })
        ));
    }

    #[test]
    fn v_norm_examples() {
        let v = Tensor::from_rows(&[
            vec![3.0, 4.0, 0.0, 0.0],
            vec![0.0, 0.0, -2.0, 0.0],
            vec![0.0; 4],
        ])
        .unwrap();
        let p = v_norm_profile(&v);
        assert_eq!((p[0].l1, p[0].l2), (7.0, 5.0));
        assert!((p[0].l1_over_l2.unwrap() - 1.4).abs() < 1e-12);
        assert_eq!(p[1].l1_over_l2, Some(1.0));
        assert_eq!(p[2].l1_over_l2, None);
    }

    #[test]
    fn v_norms_match_kernel_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random(&mut rng, 10, 7);
        for p in v_norm_profile(&v) {
            let row = v.row(p.position);
            let l2 = row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            let l1 = row.iter().map(|&x| (x as f64).abs()).sum::<f64>();
            assert!((p.l2 - l2).abs() < 1e-6 && (p.l1 - l1).abs() < 1e-6);
        }
    }

    #[test]
    fn cos_examples() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let d = cos_decompose(&q, &k).unwrap();
        assert_eq!(d.get(0, 0).dot, 0.0);
        assert_eq!(d.get(0, 0).cos_theta, Some(0.0));
        assert_eq!(d.get(0, 1).cos_theta, Some(1.0));
        assert_eq!(d.get(0, 2).cos_theta, None);
        let same = cos_decompose(&k, &k).unwrap();
        assert!((same.get(1, 1).cos_theta.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_with_zero_value_is_pure_renormalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let len = 6;
        let mut v = random(&mut rng, len, 4);
        v.set_row(0, &[0.0; 4]).unwrap();
        let logits = random(&mut rng, len, len);
        let w = crate::tensor::softmax_rows(&logits).unwrap();
        let deltas = leave_one_out_delta(&w, &v, 0).unwrap();
        assert_eq!(deltas[0], None);
        for (i, delta) in deltas.iter().enumerate().skip(1) {
            // Brute force: build both sums explicitly.
            let a = w.at(i, 0) as f64;
            let mut full = [0.0f64; 4];
            let mut kept = [0.0f64; 4];
            for l in 0..len {
                for c in 0..4 {
                    let term = w.at(i, l) as f64 * v.at(l, c) as f64;
                    full[c] += term;
                    if l != 0 {
                        kept[c] += term / (1.0 - a);
                    }
                }
            }
            let diff: f64 = full
                .iter()
                .zip(&kept)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            let base: f64 = full.iter().map(|x| x * x).sum::<f64>().sqrt();
            let got = delta.unwrap();
            assert!((got - diff / base).abs() < 1e-9);
            assert!((got - a / (1.0 - a)).abs() < 1e-5);
        }
    }

    #[test]
    fn leave_one_out_edge_rows() {
        let w = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.5],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let v = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let d = leave_one_out_delta(&w, &v, 0).unwrap();
        assert_eq!(d, vec![None, Some(0.0), None]);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.0), 1.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 1.0), 4.0);
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.1) - 1.4).abs() < 1e-12);
    }

    fn capture_with(weights: Tensor, v: Tensor, regime: AttentionRegime) -> Capture {
        let mut c = Capture::new(CaptureMetadata {
            regime: Some(regime),
            ..Default::default()
        });
        c.insert(names::attn_weights(0, 0), weights).unwrap();
        c.insert(names::value(0, 0), v).unwrap();
        c
    }

    #[test]
    fn identity_attention_with_equal_norms_flags_nothing() {
        let len = 8;
        let mut rows = Vec::new();
        for i in 0..len {
            let mut r = vec![0.0f32; 4];
            r[i % 4] = if i % 2 == 0 { 2.0 } else { -2.0 };
            rows.push(r);
        }
        let c = capture_with(
            Tensor::identity(len),
            Tensor::from_rows(&rows).unwrap(),
            AttentionRegime::Causal,
        );
        let report = detect_waivers(&c, Thresholds::default()).unwrap();
        assert!(report.rows.iter().all(|r| r.flags == Flags::default()));
    }

    #[test]
    fn missing_value_tensor_is_named() {
        let mut c = Capture::default();
        c.insert(names::attn_weights(1, 2), Tensor::identity(3))
            .unwrap();
        match detect_waivers(&c, Thresholds::default()) {
            Err(Error::IncompleteCapture(missing)) => assert_eq!(missing, vec!["layer1.head2.v"]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            detect_waivers(&Capture::default(), Thresholds::default()),
            Err(Error::IncompleteCapture(_))
        ));
    }

    #[test]
    fn regime_is_inferred_when_metadata_is_silent() {
        let mut c = capture_with(
            Tensor::identity(3),
            Tensor::identity(3),
            AttentionRegime::Global,
        );
        c.metadata.regime = None;
        assert_eq!(
            detect_waivers(&c, Thresholds::default()).unwrap().regime,
            AttentionRegime::Causal
        );
    }

    #[test]
    fn csv_layout() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.75, 0.25]]).unwrap();
        let v = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let mut c = capture_with(w, v, AttentionRegime::Causal);
        c.metadata
            .interventions
            .push(Intervention::MaskRow { position: 1 });
        let csv = detect_waivers(
            &c,
            Thresholds {
                sink_threshold: 0.5,
                vnorm_quantile: 0.5,
            },
        )
        .unwrap()
        .to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(
            lines[1],
            "0,0,0,0.75,0,0,NA,attention_sink|low_v_norm|waiver,false"
        );
        assert_eq!(lines[2], "0,0,1,NA,7,5,1.4,,true");
    }

    fn synthetic_capture(regime: ModelRegime, seed: u64, j: usize) -> Capture {
        let mut config = ModelConfig::desk(regime);
        config.seed = seed;
        let w = build_synthetic_waiver_model(&config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens: Vec<usize> = (0..64).map(|_| rng.gen_range(2..256)).collect();
        tokens[j] = 1;
        let mask = config.default_mask(64).unwrap();
        forward(&w, &tokens, &mask, true).unwrap().capture.unwrap()
    }

    #[test]
    fn synthetic_waiver_is_flagged_in_most_layer0_heads() {
        for (regime, j) in [
            (ModelRegime::CausalRope, 0),
            (ModelRegime::GlobalLearnable, 20),
        ] {
            let c = synthetic_capture(regime, 5, j);
            let report = detect_waivers(&c, Thresholds::default()).unwrap();
            assert!(report.waiver_heads(0, j) * 2 >= 4, "{regime:?}");
            assert_eq!(report.waiver_positions(), BTreeSet::from([j]), "{regime:?}");
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let c = synthetic_capture(ModelRegime::CausalRope, 9, 0);
        let a = detect_waivers(&c, Thresholds::default()).unwrap();
        let b = detect_waivers(&c, Thresholds::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn term_magnitude_is_weight_times_norm(seed in any::<u64>(), a in 0.0f32..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random(&mut rng, 1, 12);
            let scaled: Vec<f32> = v.row(0).iter().map(|x| a * x).collect();
            let lhs = l2_norm(&scaled) as f64;
            let rhs = a as f64 * l2_norm(v.row(0)) as f64;
            prop_assert!((lhs - rhs).abs() < 1e-6);
        }

        #[test]
        fn cos_decomposition_reproduces_dot(seed in any::<u64>(), d in 1usize..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, 3, d);
            let k = random(&mut rng, 4, d);
            let dec = cos_decompose(&q, &k).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    let e = dec.get(i, j);
                    let brute: f64 = q.row(i).iter().zip(k.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
                    if let Some(c) = e.cos_theta {
                        prop_assert!((-1.0..=1.0).contains(&c));
                        prop_assert!((e.q_norm * e.k_norm * c - brute).abs() < 1e-5);
                    }
                }
            }
        }

        #[test]
        fn low_norm_flags_are_scale_free(seed in any::<u64>(), scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = 12;
            let logits = random(&mut rng, len, len);
            let w = crate::tensor::softmax_rows(&logits).unwrap();
            let mut rows = Vec::new();
            for i in 0..len {
                // Norms spread over distinct magnitudes so that scaling
                // cannot merge neighbouring values.
                let mag = 1.0 + i as f32 * 0.5;
                let mut r: Vec<f32> = (0..4).map(|_| rng.gen_range(0.5..1.0)).collect();
                let n = l2_norm(&r);
                r.iter_mut().for_each(|x| *x *= mag / n);
                rows.push(r);
            }
            let v = Tensor::from_rows(&rows).unwrap();
            let base = detect_waivers(&capture_with(w.clone(), v.clone(), AttentionRegime::Global), Thresholds::default()).unwrap();
            let scaled = detect_waivers(&capture_with(w, v.scale(scale).unwrap(), AttentionRegime::Global), Thresholds::default()).unwrap();
            let pick = |r: &WaiverReport| r.rows.iter().filter(|x| x.flags.low_v_norm).map(|x| x.position).collect::<Vec<_>>();
            prop_assert_eq!(pick(&base), pick(&scaled));
        }
    }

    #[test]
    fn self_masked_rows_are_one_hot_in_weights() {
        let config = ModelConfig::desk(ModelRegime::CausalRope);
        let w = crate::model::init_random_model(&config).unwrap();
        let mask = MaskMatrix::causal(16)
            .unwrap()
            .with_self_only_row(5)
            .unwrap();
        let tokens: Vec<usize> = (0..16).collect();
        let c = forward(&w, &tokens, &mask, true).unwrap().capture.unwrap();
        for (l, h) in c.attention_heads() {
            let weights = c.get(&names::attn_weights(l, h)).unwrap();
            let row: Vec<f32> = (0..16).map(|j| if j == 5 { 1.0 } else { 0.0 }).collect();
            assert_eq!(weights.row(5), row.as_slice());
        }
        let report = detect_waivers(&c, Thresholds::default()).unwrap();
        assert_eq!(report.intervened_positions, vec![5]);
        assert!(report
            .rows
            .iter()
            .filter(|r| r.position == 5)
            .all(|r| r.intervened));
    }
}

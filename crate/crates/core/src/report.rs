//! Analysis artifacts written from a capture: the waiver table, query/key
//! cosine table, summary JSON and SVG figures. Every file derives from one
//! in-memory [`WaiverReport`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::capture::{names, AttentionRegime, Capture, Intervention, Source};
use crate::error::{Error, Result};
use crate::metrics::{
    cos_decompose, detect_waivers, eligible_rows, Thresholds, WaiverReport, UNDEFINED,
};
use crate::svg::{Chart, Series, Style};
use crate::tensor::{l2_norm, Tensor};

pub const REPORT_CSV: &str = "waiver_report.csv";
pub const SUMMARY_JSON: &str = "report_summary.json";
pub const COS_CSV: &str = "qk_cos.csv";
pub const PE_NORM_SVG: &str = "pe_norm.svg";

pub fn scatter_file(layer: usize, head: usize) -> String {
    format!("attn_scatter_layer{layer}_head{head}.svg")
}

pub fn vnorm_file(layer: usize, head: usize) -> String {
    format!("vnorm_layer{layer}_head{head}.svg")
}

pub fn hidden_file(layer: usize, position: usize) -> String {
    format!("hidden_layer{layer}_pos{position}.svg")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalyzeOptions {
    pub thresholds: Thresholds,
    /// Restrict figures to one layer; `None` draws every layer.
    pub layer: Option<usize>,
    pub head: Option<usize>,
    /// Query row plotted in attention scatters; defaults to the last row.
    pub query_row: Option<usize>,
    pub hidden_layer: Option<usize>,
    pub hidden_position: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadSummary {
    pub layer: usize,
    pub head: usize,
    pub sinks: Vec<usize>,
    pub low_v_norm: Vec<usize>,
    pub waivers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub source: Source,
    pub model_name: String,
    pub regime: AttentionRegime,
    pub sequence_length: usize,
    pub thresholds: Thresholds,
    pub interventions: Vec<Intervention>,
    pub intervened_positions: Vec<usize>,
    pub waiver_positions: Vec<usize>,
    pub heads: Vec<HeadSummary>,
    pub notes: Vec<String>,
    pub files: Vec<String>,
}

fn write(dir: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.push(name.to_string());
    Ok(())
}

fn marker_label(report: &WaiverReport, position: usize) -> String {
    let kinds: Vec<String> = report
        .interventions
        .iter()
        .filter(|i| i.position() == Some(position))
        .map(Intervention::label)
        .collect();
    format!("intervened {position}: {}", kinds.join(", "))
}

fn selected(report: &WaiverReport, opts: &AnalyzeOptions) -> Vec<(usize, usize)> {
    report
        .heads()
        .into_iter()
        .filter(|&(l, h)| opts.layer.is_none_or(|x| x == l) && opts.head.is_none_or(|x| x == h))
        .collect()
}

fn cos_csv(capture: &Capture, report: &WaiverReport) -> Result<Option<String>> {
    let mut out = String::from("layer,head,query,key,dot,q_norm,k_norm,cos_theta\n");
    let mut any = false;
    for (l, h) in report.heads() {
        let (Some(q), Some(k)) = (
            capture.get(&names::query(l, h)),
            capture.get(&names::key(l, h)),
        ) else {
            continue;
        };
        any = true;
        let dec = cos_decompose(q, k)?;
        for i in 0..dec.queries() {
            for j in 0..dec.keys() {
                if report.regime == AttentionRegime::Causal && j > i {
                    continue;
                }
                let e = dec.get(i, j);
                let cos = e
                    .cos_theta
                    .map_or_else(|| UNDEFINED.to_string(), |c| c.to_string());
                let _ = writeln!(
                    out,
                    "{l},{h},{i},{j},{},{},{},{cos}",
                    e.dot, e.q_norm, e.k_norm
                );
            }
        }
    }
    Ok(any.then_some(out))
}

fn scatter_chart(
    capture: &Capture,
    report: &WaiverReport,
    l: usize,
    h: usize,
    row: usize,
) -> Result<Chart> {
    let weights = capture.require(&names::attn_weights(l, h))?;
    let len = weights.rows();
    let row = row.min(len - 1);
    let mut chart = Chart::new(
        format!("layer {l} head {h}: attention from query {row}"),
        "key position",
        "attention weight",
    )
    .with_series(Series::indexed(
        format!("query row {row}"),
        Style::Scatter,
        weights.row(row).iter().map(|&w| w as f64),
    ));
    let sink: Vec<(f64, f64)> = report
        .rows_for(l, h)
        .filter_map(|r| r.sink_score.map(|s| (r.position as f64, s)))
        .collect();
    chart = chart.with_series(Series::new("sink score", Style::Line, sink));
    for &p in &report.intervened_positions {
        if p < len {
            chart = chart.with_marker(p as f64, marker_label(report, p));
        }
    }
    for r in report.rows_for(l, h).filter(|r| r.flags.waiver) {
        chart = chart.with_marker(r.position as f64, format!("waiver {}", r.position));
    }
    Ok(chart)
}

fn vnorm_chart(report: &WaiverReport, l: usize, h: usize) -> Chart {
    let rows: Vec<_> = report.rows_for(l, h).collect();
    let mut chart = Chart::new(
        format!("layer {l} head {h}: value norms"),
        "position",
        "norm",
    )
    .with_series(Series::indexed(
        "L2",
        Style::Line,
        rows.iter().map(|r| r.v_l2),
    ))
    .with_series(Series::indexed(
        "L1",
        Style::Line,
        rows.iter().map(|r| r.v_l1),
    ));
    for &p in &report.intervened_positions {
        if p < rows.len() {
            chart = chart.with_marker(p as f64, marker_label(report, p));
        }
    }
    chart
}

fn pe_chart(table: &Tensor, report: &WaiverReport) -> Chart {
    let norms = (0..table.rows()).map(|i| l2_norm(table.row(i)) as f64);
    let mut chart = Chart::new("positional table row norms", "position", "L2 norm")
        .with_series(Series::indexed("pe L2", Style::Line, norms));
    for i in &report.interventions {
        if let Intervention::PeSwap { target, source } = *i {
            chart = chart
                .with_marker(target as f64, format!("swap target {target}"))
                .with_marker(source as f64, format!("swap source {source}"));
        }
    }
    chart
}

fn hidden_chart(state: &Tensor, name: &str, layer: usize, position: usize) -> Chart {
    let others: Vec<usize> = (0..state.rows()).filter(|&i| i != position).collect();
    let mean: Vec<f64> = (0..state.cols())
        .map(|c| {
            if others.is_empty() {
                0.0
            } else {
                others.iter().map(|&i| state.at(i, c) as f64).sum::<f64>() / others.len() as f64
            }
        })
        .collect();
    Chart::new(
        format!("{name}: per-dimension values at position {position} (layer {layer})"),
        "dimension",
        "value",
    )
    .with_series(Series::indexed(
        format!("position {position}"),
        Style::Bar,
        state.row(position).iter().map(|&x| x as f64),
    ))
    .with_series(Series::indexed(
        "mean of other positions",
        Style::Line,
        mean,
    ))
}

fn num_layers(capture: &Capture) -> usize {
    capture
        .attention_heads()
        .iter()
        .map(|&(l, _)| l + 1)
        .max()
        .unwrap_or(0)
}

/// Runs detection on `capture` and writes every artifact into `out`.
pub fn analyze_capture(
    capture: &Capture,
    opts: &AnalyzeOptions,
    out: &Path,
) -> Result<(WaiverReport, AnalysisSummary)> {
    let report = detect_waivers(capture, opts.thresholds)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();
    let mut notes = capture.metadata.notes.clone();

    write(out, REPORT_CSV, &report.to_csv(), &mut files)?;
    if let Some(csv) = cos_csv(capture, &report)? {
        write(out, COS_CSV, &csv, &mut files)?;
    } else {
        notes.push("queries/keys absent: cosine table skipped".into());
    }

    let heads = selected(&report, opts);
    if heads.is_empty() {
        return Err(Error::Usage(
            "no attention head matches --layer/--head".into(),
        ));
    }
    let len = capture
        .require(&names::attn_weights(heads[0].0, heads[0].1))?
        .rows();
    let query_row = opts.query_row.unwrap_or(len - 1);
    if query_row >= len {
        return Err(Error::Usage(format!(
            "query row {query_row} outside sequence of length {len}"
        )));
    }
    for &(l, h) in &heads {
        let chart = scatter_chart(capture, &report, l, h, query_row)?;
        write(out, &scatter_file(l, h), &chart.render(), &mut files)?;
        write(
            out,
            &vnorm_file(l, h),
            &vnorm_chart(&report, l, h).render(),
            &mut files,
        )?;
    }
    if let Some(table) = capture.get(names::PE_TABLE) {
        write(
            out,
            PE_NORM_SVG,
            &pe_chart(table, &report).render(),
            &mut files,
        )?;
    }

    let layers = num_layers(capture);
    let hidden_layer = opts.hidden_layer.unwrap_or(1.min(layers.saturating_sub(1)));
    let position = opts.hidden_position.unwrap_or(0);
    let state = [names::hidden(hidden_layer), names::ffn_out(hidden_layer)]
        .into_iter()
        .find_map(|n| capture.get(&n).map(|t| (n, t)));
    match state {
        Some((name, t)) if position < t.rows() => {
            let chart = hidden_chart(t, &name, hidden_layer, position);
            write(
                out,
                &hidden_file(hidden_layer, position),
                &chart.render(),
                &mut files,
            )?;
        }
        Some(_) => {
            return Err(Error::Usage(format!(
                "hidden position {position} outside sequence"
            )))
        }
        None => notes.push(format!(
            "no hidden state for layer {hidden_layer}: per-dimension plot skipped"
        )),
    }

    let summary = AnalysisSummary {
        source: capture.metadata.source,
        model_name: capture.metadata.model_name.clone(),
        regime: report.regime,
        sequence_length: len,
        thresholds: report.thresholds,
        interventions: report.interventions.clone(),
        intervened_positions: report.intervened_positions.clone(),
        waiver_positions: report.waiver_positions().into_iter().collect(),
        heads: report
            .heads()
            .into_iter()
            .map(|(layer, head)| {
                let pick = |f: fn(&crate::metrics::Flags) -> bool| {
                    report
                        .rows_for(layer, head)
                        .filter(|r| f(&r.flags))
                        .map(|r| r.position)
                        .collect()
                };
                HeadSummary {
                    layer,
                    head,
                    sinks: pick(|f| f.attention_sink),
                    low_v_norm: pick(|f| f.low_v_norm),
                    waivers: pick(|f| f.waiver),
                }
            })
            .collect(),
        notes,
        files: {
            let mut f = files.clone();
            f.push(SUMMARY_JSON.into());
            f
        },
    };
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Manifest(e.to_string()))?;
    write(out, SUMMARY_JSON, &(json + "\n"), &mut files)?;
    Ok((report, summary))
}

const ROW_SUM_TOL: f64 = 1e-4;

/// Consistency problems that do not stop a capture from loading. An empty
/// list means the capture is fit for analysis.
pub fn check_capture(capture: &Capture) -> Vec<String> {
    let mut warnings = Vec::new();
    let heads = capture.attention_heads();
    if heads.is_empty() {
        warnings.push("no layer{i}.head{h}.attn_weights tensors".into());
    }
    if capture.metadata.regime.is_none() {
        warnings.push("metadata.regime not set".into());
    }
    if capture.metadata.model_name.is_empty() {
        warnings.push("metadata.model_name not set".into());
    }
    let mut len = None;
    for &(l, h) in &heads {
        let name = names::attn_weights(l, h);
        let w = capture.get(&name).expect("listed head");
        if w.rank() != 2 || w.rows() != w.cols() {
            warnings.push(format!("{name}: shape {:?} is not square", w.shape()));
            continue;
        }
        if *len.get_or_insert(w.rows()) != w.rows() {
            warnings.push(format!(
                "{name}: length {} differs from {}",
                w.rows(),
                len.unwrap_or(0)
            ));
        }
        for i in 0..w.rows() {
            let sum: f64 = w.row(i).iter().map(|&x| x as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || w.row(i).iter().any(|&x| x < 0.0) {
                warnings.push(format!(
                    "{name}: row {i} is not a probability distribution (sum {sum})"
                ));
                break;
            }
        }
        if capture.metadata.regime == Some(AttentionRegime::Causal) {
            let leak = (0..w.rows()).any(|i| {
                eligible_rows(w.rows(), i, AttentionRegime::Causal)
                    .iter()
                    .any(|&j| w.at(i, j) != 0.0)
            });
            if leak {
                warnings.push(format!(
                    "{name}: causal regime but weight above the diagonal"
                ));
            }
        }
        let vname = names::value(l, h);
        match capture.get(&vname) {
            None => warnings.push(format!("{vname}: missing")),
            Some(v) if v.rank() != 2 || v.rows() != w.rows() => warnings.push(format!(
                "{vname}: shape {:?} does not match {} positions",
                v.shape(),
                w.rows()
            )),
            Some(_) => {}
        }
    }
    if let (Some(len), Some(ids)) = (len, &capture.metadata.token_ids) {
        if ids.len() != len {
            warnings.push(format!(
                "metadata.token_ids has {} entries for {len} positions",
                ids.len()
            ));
        }
    }
    let mut widths = BTreeMap::new();
    for (name, t) in capture.tensors() {
        let per_layer = name.ends_with(".hidden") || name.ends_with(".ffn_out");
        if per_layer || name == names::PE_TABLE {
            if t.rank() != 2 {
                warnings.push(format!(
                    "{name}: expected a matrix, found shape {:?}",
                    t.shape()
                ));
                continue;
            }
            widths.insert(name.to_string(), t.cols());
            if per_layer && len.is_some_and(|l| l != t.rows()) {
                warnings.push(format!(
                    "{name}: {} rows for {} positions",
                    t.rows(),
                    len.unwrap_or(0)
                ));
            }
        }
    }
    let distinct: std::collections::BTreeSet<_> = widths.values().collect();
    if distinct.len() > 1 {
        warnings.push(format!("inconsistent model widths: {widths:?}"));
    }
    for i in &capture.metadata.interventions {
        if let (Some(p), Some(len)) = (i.position(), len) {
            let table_rows = capture
                .get(names::PE_TABLE)
                .map(|t| t.rows())
                .unwrap_or(len);
            let bound = if matches!(i, Intervention::PeSwap { .. }) {
                table_rows
            } else {
                len
            };
            if p >= bound {
                warnings.push(format!("intervention {} outside range {bound}", i.label()));
            }
        }
    }
    warnings
}

/// Where a capture's analysis goes when no directory is given.
pub fn default_analysis_dir(capture_dir: &Path) -> PathBuf {
    capture_dir.join("analysis")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MaskMatrix;
    use crate::model::{forward, init_random_model, ModelConfig, ModelRegime};
    use tempfile::tempdir;

    fn toy_capture(mask_row: Option<usize>) -> Capture {
        let config = ModelConfig::desk(ModelRegime::CausalRope);
        let w = init_random_model(&config).unwrap();
        let mut mask = MaskMatrix::causal(12).unwrap();
        if let Some(k) = mask_row {
            mask = mask.with_self_only_row(k).unwrap();
        }
        let tokens: Vec<usize> = (0..12).map(|i| i + 2).collect();
        forward(&w, &tokens, &mask, true).unwrap().capture.unwrap()
    }

    #[test]
    fn toy_capture_passes_checks() {
        assert!(check_capture(&toy_capture(Some(3))).is_empty());
    }

    #[test]
    fn broken_capture_warns() {
        let mut c = Capture::default();
        c.insert(
            names::attn_weights(0, 0),
            Tensor::from_rows(&[vec![0.5, 0.4], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let w = check_capture(&c);
        assert!(w.iter().any(|m| m.contains("not a probability")));
        assert!(w.iter().any(|m| m.contains("layer0.head0.v: missing")));
        assert!(w.iter().any(|m| m.contains("regime")));
    }

    #[test]
    fn analysis_writes_all_artifacts() {
        let c = toy_capture(Some(3));
        let dir = tempdir().unwrap();
        let (report, summary) =
            analyze_capture(&c, &AnalyzeOptions::default(), dir.path()).unwrap();
        for f in &summary.files {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert!(summary.files.contains(&scatter_file(1, 3)));
        assert!(summary.files.contains(&hidden_file(1, 0)));
        let csv = fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(csv, report.to_csv());
        let svg = fs::read_to_string(dir.path().join(scatter_file(0, 0))).unwrap();
        assert!(svg.contains("intervened 3: mask_row 3"));
        assert_eq!(summary.intervened_positions, vec![3]);
    }

    #[test]
    fn selection_filters_heads() {
        let c = toy_capture(None);
        let dir = tempdir().unwrap();
        let opts = AnalyzeOptions {
            layer: Some(0),
            head: Some(2),
            ..Default::default()
        };
        let (_, summary) = analyze_capture(&c, &opts, dir.path()).unwrap();
        let scatters: Vec<_> = summary
            .files
            .iter()
            .filter(|f| f.starts_with("attn_scatter"))
            .collect();
        assert_eq!(scatters, vec![&scatter_file(0, 2)]);
        let bad = AnalyzeOptions {
            layer: Some(7),
            ..Default::default()
        };
        assert!(matches!(
            analyze_capture(&c, &bad, dir.path()),
            Err(Error::Usage(_))
        ));
    }
}

//! Report files: JSON documents, CSV tables and aligned text tables.

use std::collections::BTreeMap;
use std::path::Path;

use bnta_core::adapt::ChangeRate;
use bnta_core::layers::ParamGroup;
use bnta_core::metrics::{MeanStd, SplitSummary};
use bnta_core::Float;
use serde::Serialize;

use crate::error::{self, Error, Result};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    error::write(path, &bytes)
}

pub fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    error::write(path, csv_string(rows)?.as_bytes())
}

/// Left-aligned first column, right-aligned others, two-space gaps.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("  {cell:>w$}"));
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    let rules: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&line(rules.iter().map(String::as_str).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Percentage with its spread over splits.
pub fn percent(m: &MeanStd) -> String {
    format!("{:.1} ({:.1})", 100.0 * m.mean, 100.0 * m.std)
}

/// One row per labelled summary: rank-1/5/10 and mAP as mean (std) percent.
pub fn summary_table(rows: &[(&str, &SplitSummary)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, s)| {
            vec![
                label.to_string(),
                percent(&s.rank1),
                percent(&s.rank5),
                percent(&s.rank10),
                percent(&s.map),
            ]
        })
        .collect();
    text_table(&["model", "rank-1", "rank-5", "rank-10", "mAP"], &body)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerChangeRate {
    pub bn_layer: usize,
    pub kind: ParamGroup,
    pub rate: Float,
}

/// Change rate of each BN layer's tensors, one row per (layer, kind).
pub fn bn_change_rates(rates: &[ChangeRate]) -> Vec<LayerChangeRate> {
    let mut acc: BTreeMap<(usize, ParamGroup), (Float, usize)> = BTreeMap::new();
    for r in rates {
        if let Some(layer) = r.bn_layer {
            let e = acc.entry((layer, r.group)).or_default();
            e.0 += r.rate;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((bn_layer, kind), (sum, n))| LayerChangeRate {
            bn_layer,
            kind,
            rate: sum / n as Float,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_columns_align() {
        let t = text_table(&["a", "value"], &[vec!["long name".into(), "1".into()], vec!["x".into(), "22.5".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a          value");
        assert_eq!(lines[1], "---------  -----");
        assert_eq!(lines[2], "long name      1");
        assert_eq!(lines[3], "x           22.5");
    }

    #[test]
    fn csv_has_header_row() {
        let rows = vec![LayerChangeRate {
            bn_layer: 2,
            kind: ParamGroup::BnGamma,
            rate: 0.5,
        }];
        assert_eq!(csv_string(rows).unwrap(), "bn_layer,kind,rate\n2,bn_gamma,0.5\n");
    }

    #[test]
    fn layer_rates_average_per_kind() {
        let rate = |layer, group, rate| ChangeRate {
            param: String::new(),
            group,
            bn_layer: layer,
            rate,
        };
        let rows = bn_change_rates(&[
            rate(Some(0), ParamGroup::BnMu, 0.2),
            rate(Some(0), ParamGroup::BnMu, 0.4),
            rate(None, ParamGroup::Conv, 9.0),
        ]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].rate - 0.3).abs() < 1e-12);
    }
}

//! Table and figure emission: one-decimal CSV tables, full-precision
//! JSON, and dependency-free SVG bar charts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical pollutant column order; anything else follows
/// alphabetically.
const CANONICAL_COLUMNS: [&str; 4] = ["NO2", "O3", "PM10", "PM25"];

/// One row of a reduction table: a variant cell and its
/// percent-MSE-reduction per pollutant column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<f64>,
    /// Mean over the pollutant columns.
    pub average: f64,
}

/// Percent-reduction table for one city (or the cross-city average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

/// Sorts pollutant names into the canonical column order.
pub fn canonical_column_order(columns: &mut Vec<String>) {
    columns.sort_by(|a, b| {
        let rank = |c: &str| {
            CANONICAL_COLUMNS
                .iter()
                .position(|k| *k == c)
                .unwrap_or(usize::MAX)
        };
        rank(a).cmp(&rank(b)).then_with(|| a.cmp(b))
    });
    columns.dedup();
}

impl ReductionTable {
    /// Builds a table from raw (label, column, value) cells, computing
    /// row averages and sorting rows by average descending (ties by
    /// label).
    pub fn from_cells(
        title: &str,
        cells: &[(String, String, f64)],
    ) -> Result<ReductionTable> {
        let mut columns: Vec<String> = cells.iter().map(|(_, c, _)| c.clone()).collect();
        columns.sort();
        columns.dedup();
        let mut cols_sorted = columns.clone();
        canonical_column_order(&mut cols_sorted);

        let mut labels: Vec<String> = cells.iter().map(|(l, _, _)| l.clone()).collect();
        labels.sort();
        labels.dedup();

        let mut rows = Vec::with_capacity(labels.len());
        for label in &labels {
            let mut row_cells = Vec::with_capacity(cols_sorted.len());
            for col in &cols_sorted {
                let found: Vec<f64> = cells
                    .iter()
                    .filter(|(l, c, _)| l == label && c == col)
                    .map(|(_, _, v)| *v)
                    .collect();
                match found.len() {
                    1 => row_cells.push(found[0]),
                    0 => {
                        return Err(Error::Aggregation(format!(
                            "missing cell ({label}, {col}) in table {title:?}"
                        )))
                    }
                    _ => {
                        return Err(Error::Aggregation(format!(
                            "duplicate cell ({label}, {col}) in table {title:?}"
                        )))
                    }
                }
            }
            let average = row_cells.iter().sum::<f64>() / row_cells.len() as f64;
            rows.push(TableRow {
                label: label.clone(),
                cells: row_cells,
                average,
            });
        }
        rows.sort_by(|a, b| {
            b.average
                .partial_cmp(&a.average)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.label.cmp(&b.label))
        });
        Ok(ReductionTable {
            title: title.to_string(),
            columns: cols_sorted,
            rows,
        })
    }
}

/// Rounds to one decimal, half away from zero, on the printed decimal
/// expansion (so 7.45 rounds to "7.5" even though its binary value is
/// marginally below 7.45).
pub fn round_one_decimal(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{:.10}", x.abs());
    let (int_part, frac_part) = s.split_once('.').expect("fixed-point format");
    let digits: Vec<u32> = frac_part.chars().map(|c| c.to_digit(10).unwrap()).collect();
    let mut int_val: u64 = int_part.parse().unwrap();
    let mut first = digits[0];
    // half away from zero on |x|: round up when the tail reaches 5
    let tail_is_half_or_more = digits[1] >= 5;
    if tail_is_half_or_more {
        first += 1;
        if first == 10 {
            first = 0;
            int_val += 1;
        }
    }
    let sign = if x.is_sign_negative() && x != 0.0 { "-" } else { "" };
    format!("{sign}{int_val}.{first}")
}

/// Writes a reduction table as CSV with one-decimal cells and the
/// fixed column order `label, <pollutants...>, average`.
pub fn write_table_csv(table: &ReductionTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["attention".to_string()];
    header.extend(table.columns.iter().cloned());
    header.push("average".to_string());
    w.write_record(&header)
        .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
    for row in &table.rows {
        let mut record = vec![row.label.clone()];
        record.extend(row.cells.iter().map(|v| round_one_decimal(*v)));
        record.push(round_one_decimal(row.average));
        w.write_record(&record)
            .map_err(|e| Error::Data(format!("csv write error: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("csv flush error: {e}")))?;
    Ok(())
}

/// Renders a grouped bar chart: one group per table row (variant), one
/// bar per pollutant column. Pure SVG text, byte-stable across
/// renders.
pub fn render_svg(table: &ReductionTable) -> String {
    let palette = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2"];
    let (width, height) = (900.0, 420.0);
    let margin = (60.0, 30.0, 60.0, 40.0); // left, top, bottom, right
    let plot_w = width - margin.0 - margin.3;
    let plot_h = height - margin.1 - margin.2;

    let lo = table
        .rows
        .iter()
        .flat_map(|r| r.cells.iter())
        .cloned()
        .fold(0.0_f64, f64::min);
    let hi = table
        .rows
        .iter()
        .flat_map(|r| r.cells.iter())
        .cloned()
        .fold(0.0_f64, f64::max);
    let span = (hi - lo).max(1e-9);
    let y_of = |v: f64| margin.1 + (hi - v) / span * plot_h;

    let groups = table.rows.len().max(1);
    let bars = table.columns.len().max(1);
    let group_w = plot_w / groups as f64;
    let bar_w = group_w * 0.8 / bars as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"18\" font-size=\"14\">{} — percent reduction in MSE vs. NoAttention</text>\n",
        margin.0, table.title
    ));
    // zero axis
    let y0 = y_of(0.0);
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{y0:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" stroke=\"#333\" stroke-width=\"1\"/>\n",
        margin.0,
        margin.0 + plot_w
    ));
    // y ticks at min, 0, max
    for v in [lo, 0.0, hi] {
        let y = y_of(v);
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            margin.0 - 6.0,
            y + 4.0,
            round_one_decimal(v)
        ));
    }
    for (gi, row) in table.rows.iter().enumerate() {
        let gx = margin.0 + gi as f64 * group_w + group_w * 0.1;
        for (bi, v) in row.cells.iter().enumerate() {
            let x = gx + bi as f64 * bar_w;
            let (y, h) = if *v >= 0.0 {
                (y_of(*v), y0 - y_of(*v))
            } else {
                (y0, y_of(*v) - y0)
            };
            svg.push_str(&format!(
                "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"><title>{}: {} = {}</title></rect>\n",
                bar_w * 0.92,
                palette[bi % palette.len()],
                row.label,
                table.columns[bi],
                round_one_decimal(*v)
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-18 {:.2} {:.2})\">{}</text>\n",
            gx + group_w * 0.4,
            height - margin.2 + 16.0,
            gx + group_w * 0.4,
            height - margin.2 + 16.0,
            row.label
        ));
    }
    // legend
    for (bi, col) in table.columns.iter().enumerate() {
        let x = margin.0 + plot_w + 6.0;
        let y = margin.1 + 14.0 * bi as f64;
        svg.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            palette[bi % palette.len()]
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\">{col}</text>\n",
            x + 14.0,
            y + 9.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the full report bundle for a set of tables: per-table CSV
/// (one-decimal), JSON (full precision), and SVG figures.
pub fn render_report(tables: &[ReductionTable], out_dir: &Path) -> Result<()> {
    if tables.is_empty() {
        return Err(Error::Contract("render_report requires at least one table".into()));
    }
    let tables_dir = out_dir.join("tables");
    let figures_dir = out_dir.join("figures");
    std::fs::create_dir_all(&tables_dir)?;
    std::fs::create_dir_all(&figures_dir)?;
    for table in tables {
        write_table_csv(table, &tables_dir.join(format!("{}.csv", table.title)))?;
        std::fs::write(
            figures_dir.join(format!("{}.svg", table.title)),
            render_svg(table),
        )?;
    }
    let json = serde_json::to_string_pretty(tables)?;
    std::fs::write(out_dir.join("tables.json"), json)?;
    Ok(())
}

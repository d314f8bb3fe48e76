use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{Metric, TuningProtocol};
use crate::metrics::EvalResult;

/// Value of one metric, in `[0, 1]`.
pub fn metric_value(r: &EvalResult, m: Metric) -> f64 {
    match m {
        Metric::Tnr95 => r.tnr95,
        Metric::Auroc => r.auroc,
        Metric::Dacc => r.dacc,
    }
}

/// Percentage rounded to one decimal.
pub fn percent(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub result: Option<EvalResult>,
    /// Rounded percentages, in the table's metric order.
    pub percent: Vec<f64>,
    /// Metrics on which this cell is the best of its row.
    pub best: Vec<Metric>,
    pub error: Option<String>,
    /// Raw score file, relative to the output directory.
    pub scores: Option<PathBuf>,
}

impl Cell {
    pub fn ok(method: impl Into<String>, result: EvalResult, scores: PathBuf) -> Self {
        Self {
            method: method.into(),
            result: Some(result),
            percent: Vec::new(),
            best: Vec::new(),
            error: None,
            scores: Some(scores),
        }
    }

    pub fn failed(method: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            result: None,
            percent: Vec::new(),
            best: Vec::new(),
            error: Some(error.into()),
            scores: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub d_in: String,
    pub d_out: String,
    pub cells: Vec<Cell>,
}

/// Rows keyed by `(D_in, D_out^test)`, columns by `(method, metric)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub protocol: TuningProtocol,
    pub methods: Vec<String>,
    pub metrics: Vec<Metric>,
    pub rows: Vec<Row>,
}

impl ResultTable {
    pub fn new(protocol: TuningProtocol, methods: Vec<String>, metrics: Vec<Metric>, rows: Vec<Row>) -> Self {
        let mut t = Self {
            protocol,
            methods,
            metrics,
            rows,
        };
        t.annotate();
        t
    }

    /// Fills percentages and best-per-row markers. Ties on the rounded
    /// percentage mark every tied cell.
    pub fn annotate(&mut self) {
        let metrics = self.metrics.clone();
        for row in &mut self.rows {
            for cell in &mut row.cells {
                cell.percent = cell
                    .result
                    .map(|r| metrics.iter().map(|&m| percent(metric_value(&r, m))).collect())
                    .unwrap_or_default();
                cell.best.clear();
            }
            for (k, &m) in metrics.iter().enumerate() {
                let top = row
                    .cells
                    .iter()
                    .filter_map(|c| c.percent.get(k).copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                for cell in &mut row.cells {
                    if cell.percent.get(k) == Some(&top) {
                        cell.best.push(m);
                    }
                }
            }
        }
    }

    pub fn failed_cells(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| &r.cells)
            .filter(|c| c.error.is_some())
            .count()
    }

    /// Number of metric values the table holds when every cell succeeds.
    pub fn value_count(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum::<usize>() * self.metrics.len()
    }

    pub fn cell(&self, d_out: &str, method: &str) -> Option<&Cell> {
        self.rows
            .iter()
            .find(|r| r.d_out == d_out)?
            .cells
            .iter()
            .find(|c| c.method == method)
    }

    /// Plain-text rendering; `*` marks the best value per row and metric.
    pub fn render(&self) -> String {
        const VALUE: usize = 7;
        let group = VALUE * self.metrics.len();
        let key_width = self
            .rows
            .iter()
            .map(|r| r.d_in.len() + r.d_out.len() + 3)
            .chain([16])
            .max()
            .unwrap_or(16);
        let mut s = String::new();
        let _ = writeln!(s, "# tuning protocol: {}", self.protocol.as_str());
        let _ = write!(s, "{:key_width$}", "D_in / D_out^test");
        for m in &self.methods {
            let _ = write!(s, " | {m:>group$}");
        }
        s.push('\n');
        let _ = write!(s, "{:key_width$}", "");
        for _ in &self.methods {
            s.push_str(" | ");
            for m in &self.metrics {
                let _ = write!(s, "{:>VALUE$}", m.label());
            }
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:key_width$}", format!("{} / {}", row.d_in, row.d_out));
            for method in &self.methods {
                s.push_str(" | ");
                match row.cells.iter().find(|c| &c.method == method) {
                    Some(cell) if cell.error.is_none() => {
                        for (k, m) in self.metrics.iter().enumerate() {
                            let mark = if cell.best.contains(m) { "*" } else { " " };
                            let _ = write!(s, "{:>w$}{mark}", format!("{:.1}", cell.percent[k]), w = VALUE - 1);
                        }
                    }
                    _ => {
                        let _ = write!(s, "{:>group$}", "failed");
                    }
                }
            }
            s.push('\n');
        }
        for row in &self.rows {
            for cell in row.cells.iter().filter(|c| c.error.is_some()) {
                let _ = writeln!(
                    s,
                    "failed: {} / {} / {}: {}",
                    row.d_in,
                    row.d_out,
                    cell.method,
                    cell.error.as_deref().unwrap_or_default()
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(t: f64, a: f64, d: f64) -> EvalResult {
        EvalResult {
            tnr95: t,
            auroc: a,
            dacc: d,
        }
    }

    fn table() -> ResultTable {
        ResultTable::new(
            TuningProtocol::ZeroShot,
            vec!["MD".into(), "OECC+MD".into()],
            Metric::ALL.to_vec(),
            vec![Row {
                d_in: "toy".into(),
                d_out: "bars".into(),
                cells: vec![
                    Cell::ok("MD", r(0.964, 0.9912, 0.95), "a.json".into()),
                    Cell::ok("OECC+MD", r(0.973, 0.99, 0.95), "b.json".into()),
                ],
            }],
        )
    }

    #[test]
    fn percentages_and_best_markers() {
        let t = table();
        let md = t.cell("bars", "MD").unwrap();
        assert_eq!(md.percent, vec![96.4, 99.1, 95.0]);
        assert_eq!(md.best, vec![Metric::Auroc, Metric::Dacc]);
        assert_eq!(
            t.cell("bars", "OECC+MD").unwrap().best,
            vec![Metric::Tnr95, Metric::Dacc]
        );
        assert_eq!(t.value_count(), 6);
    }

    #[test]
    fn render_marks_best_and_protocol() {
        let text = table().render();
        assert!(text.starts_with("# tuning protocol: zero_shot"));
        assert!(text.contains("97.3*"));
        assert!(text.contains("96.4 "));
    }

    #[test]
    fn failed_cells_are_listed() {
        let mut t = table();
        t.rows[0].cells[1] = Cell::failed("OECC+MD", "no checkpoint");
        t.annotate();
        assert_eq!(t.failed_cells(), 1);
        let text = t.render();
        assert!(text.contains("failed: toy / bars / OECC+MD: no checkpoint"));
    }
}

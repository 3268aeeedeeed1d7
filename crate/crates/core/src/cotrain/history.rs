//! Per-iteration metrics history and its CSV form.
//!
//! Columns: `t, lr, alpha`, then for each role `r` in `s, c, a` the five
//! losses `r_l_wce, r_l_dice, r_l_sup, r_l_tvdt, r_l_total`, then the
//! selected fraction of each producer→consumer edge as `sel_<p>_to_<c>`.
//! Floats use the shortest representation that parses back bit-exactly.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use crate::annotation::Role;
use crate::error::{Error, Result};
use crate::objectives::LossReport;

use super::StepReport;

/// Producer→consumer edges in column order.
pub const EDGES: [(Role, Role); 6] = [
    (Role::S, Role::C),
    (Role::S, Role::A),
    (Role::C, Role::S),
    (Role::C, Role::A),
    (Role::A, Role::S),
    (Role::A, Role::C),
];

const LOSS_NAMES: [&str; 5] = ["l_wce", "l_dice", "l_sup", "l_tvdt", "l_total"];

pub static HISTORY_COLUMNS: LazyLock<Vec<String>> = LazyLock::new(|| {
    let mut cols = vec!["t".to_string(), "lr".into(), "alpha".into()];
    for r in Role::ALL {
        for l in LOSS_NAMES {
            cols.push(format!("{r}_{l}"));
        }
    }
    for (p, c) in EDGES {
        cols.push(format!("sel_{p}_to_{c}"));
    }
    cols
});

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub t: u64,
    pub lr: f64,
    pub alpha: f64,
    /// `[role][wce, dice, sup, tvdt, total]`
    pub losses: [[f64; 5]; 3],
    pub selected: [f64; 6],
}

fn loss_array(l: &LossReport) -> [f64; 5] {
    [l.l_wce, l.l_dice, l.l_sup, l.l_tvdt, l.l_total]
}

impl HistoryRow {
    pub fn from_report(r: &StepReport) -> Self {
        Self {
            t: r.t,
            lr: r.lr,
            alpha: r.alpha,
            losses: [loss_array(&r.losses[0]), loss_array(&r.losses[1]), loss_array(&r.losses[2])],
            selected: r.selected,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut f = vec![self.t.to_string(), self.lr.to_string(), self.alpha.to_string()];
        f.extend(self.losses.iter().flatten().map(f64::to_string));
        f.extend(self.selected.iter().map(f64::to_string));
        f.join(",")
    }

    pub fn parse_csv(line: &str, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != HISTORY_COLUMNS.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", HISTORY_COLUMNS.len(), fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("column {}: {e}", HISTORY_COLUMNS[i]),
            })
        };
        let t = fields[0].trim().parse::<u64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("column t: {e}"),
        })?;
        let mut losses = [[0.0; 5]; 3];
        for (r, row) in losses.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = num(3 + r * 5 + k)?;
            }
        }
        let mut selected = [0.0; 6];
        for (e, v) in selected.iter_mut().enumerate() {
            *v = num(18 + e)?;
        }
        Ok(Self {
            t,
            lr: num(1)?,
            alpha: num(2)?,
            losses,
            selected,
        })
    }
}

pub fn history_to_csv(rows: &[HistoryRow]) -> String {
    let mut s = HISTORY_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HISTORY_COLUMNS.join(",") => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing or unexpected history header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| HistoryRow::parse_csv(l, i + 1))
        .collect()
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    fs::write(path, history_to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    parse_history(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let row = HistoryRow {
            t: 4,
            lr: 0.1 + 0.2,
            alpha: 0.12000000000000001,
            losses: [[1.0 / 3.0; 5], [f64::MIN_POSITIVE; 5], [0.0; 5]],
            selected: [0.5, 1e-300, 0.0, 1.0, 0.25, 0.75],
        };
        let csv = history_to_csv(std::slice::from_ref(&row));
        assert_eq!(parse_history(&csv).unwrap(), vec![row]);
        assert_eq!(HISTORY_COLUMNS.len(), 24);
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = format!("{}\n1,2\n", HISTORY_COLUMNS.join(","));
        match parse_history(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{LoadCondition, Point3};

const AXES: [&str; 3] = ["x", "y", "z"];

/// Root-mean-square and maximum absolute error over a set of coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStat {
    pub rmse: f64,
    pub max: f64,
}

#[derive(Default)]
struct Acc {
    sq: f64,
    max: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, e: f64) {
        self.sq += e * e;
        self.max = self.max.max(e.abs());
        self.n += 1;
    }

    fn stat(&self) -> ErrorStat {
        ErrorStat {
            rmse: if self.n == 0 { 0.0 } else { (self.sq / self.n as f64).sqrt() },
            max: self.max,
        }
    }
}

/// Coordinate-wise error summary of a prediction set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub samples: usize,
    /// `per_marker[i][axis]`, markers numbered from the base.
    pub per_marker: Vec<[ErrorStat; 3]>,
    /// Over every coordinate of every marker.
    pub overall: ErrorStat,
    /// One row per load condition present, in canonical order.
    pub per_load: Vec<(LoadCondition, ErrorStat)>,
}

impl MetricsTable {
    /// Errors are accumulated in sample order, so the result does not depend
    /// on how predictions were produced.
    pub fn compute(pred: &[Vec<Point3>], truth: &[Vec<Point3>], loads: &[LoadCondition]) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Contract("cannot evaluate an empty split".into()));
        }
        if pred.len() != truth.len() || pred.len() != loads.len() {
            return Err(Error::dim("metrics", "samples", truth.len(), pred.len()));
        }
        let n = truth[0].len();
        let mut marker: Vec<[Acc; 3]> = (0..n).map(|_| Default::default()).collect();
        let mut overall = Acc::default();
        let mut by_load: Vec<Acc> = LoadCondition::ALL.iter().map(|_| Acc::default()).collect();
        for ((p, t), load) in pred.iter().zip(truth).zip(loads) {
            if p.len() != n || t.len() != n {
                return Err(Error::dim("metrics", "markers", n, p.len().min(t.len())));
            }
            let slot = LoadCondition::ALL.iter().position(|l| l == load).expect("closed set");
            for (i, (pp, tt)) in p.iter().zip(t).enumerate() {
                for a in 0..3 {
                    let e = pp[a] - tt[a];
                    marker[i][a].push(e);
                    overall.push(e);
                    by_load[slot].push(e);
                }
            }
        }
        Ok(Self {
            samples: pred.len(),
            per_marker: marker.iter().map(|m| [m[0].stat(), m[1].stat(), m[2].stat()]).collect(),
            overall: overall.stat(),
            per_load: LoadCondition::ALL
                .iter()
                .zip(&by_load)
                .filter(|(_, a)| a.n > 0)
                .map(|(&l, a)| (l, a.stat()))
                .collect(),
        })
    }

    pub fn load(&self, load: LoadCondition) -> Option<ErrorStat> {
        self.per_load.iter().find(|(l, _)| *l == load).map(|(_, s)| *s)
    }

    /// Machine-readable rows: `row,rmse,max`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,rmse,max\n");
        for (i, m) in self.per_marker.iter().enumerate() {
            for (a, st) in AXES.iter().zip(m) {
                writeln!(s, "{a}{},{},{}", i + 1, st.rmse, st.max).unwrap();
            }
        }
        writeln!(s, "overall,{},{}", self.overall.rmse, self.overall.max).unwrap();
        for (l, st) in &self.per_load {
            writeln!(s, "load_{l},{},{}", st.rmse, st.max).unwrap();
        }
        s
    }
}

/// First marker (1-based) shown in the per-axis comparison; the markers
/// nearest the base carry little error and are omitted from the printout.
pub fn first_reported_marker(n: usize) -> usize {
    if n >= 5 {
        n - 2
    } else {
        1
    }
}

/// Side-by-side per-axis RMSE/Max for the distal markers plus an overall row.
pub fn comparison_table(columns: &[(&str, &MetricsTable)]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::Contract("no tables to compare".into()));
    };
    let n = first.per_marker.len();
    if columns.iter().any(|(_, t)| t.per_marker.len() != n) {
        return Err(Error::Contract("tables disagree on marker count".into()));
    }
    let mut s = String::new();
    write!(s, "{:<8}", "").unwrap();
    for (name, _) in columns {
        write!(s, " | {name:^19}").unwrap();
    }
    s.push('\n');
    write!(s, "{:<8}", "").unwrap();
    for _ in columns {
        write!(s, " | {:>9} {:>9}", "RMSE", "Max").unwrap();
    }
    s.push('\n');
    let row = |s: &mut String, label: String, stats: Vec<ErrorStat>| {
        write!(s, "{label:<8}").unwrap();
        for st in stats {
            write!(s, " | {:>9.4} {:>9.4}", st.rmse, st.max).unwrap();
        }
        s.push('\n');
    };
    for i in first_reported_marker(n) - 1..n {
        for (a, axis) in AXES.iter().enumerate() {
            row(&mut s, format!("{axis}{}", i + 1), columns.iter().map(|(_, t)| t.per_marker[i][a]).collect());
        }
    }
    row(&mut s, "Overall".into(), columns.iter().map(|(_, t)| t.overall).collect());
    Ok(s)
}

/// CSV form of [`comparison_table`] covering every marker.
pub fn comparison_csv(columns: &[(&str, &MetricsTable)]) -> String {
    let mut s = String::from("row");
    for (name, _) in columns {
        write!(s, ",{name}_rmse,{name}_max").unwrap();
    }
    s.push('\n');
    let n = columns.first().map_or(0, |(_, t)| t.per_marker.len());
    for i in 0..n {
        for (a, axis) in AXES.iter().enumerate() {
            write!(s, "{axis}{}", i + 1).unwrap();
            for (_, t) in columns {
                write!(s, ",{},{}", t.per_marker[i][a].rmse, t.per_marker[i][a].max).unwrap();
            }
            s.push('\n');
        }
    }
    s.push_str("overall");
    for (_, t) in columns {
        write!(s, ",{},{}", t.overall.rmse, t.overall.max).unwrap();
    }
    s.push('\n');
    s
}

fn load_label(l: LoadCondition) -> &'static str {
    match l {
        LoadCondition::None => "Free-space",
        LoadCondition::Fe1 => "Load Fe1",
        LoadCondition::Fe2 => "Load Fe2",
        LoadCondition::Fe3 => "Load Fe3",
    }
}

/// RMSE per load condition (rows) for each method (columns).
pub fn load_table(columns: &[(&str, &MetricsTable)]) -> String {
    let mut s = format!("{:<12}", "Condition");
    for (name, _) in columns {
        write!(s, " | {name:>10}").unwrap();
    }
    s.push('\n');
    for l in LoadCondition::ALL {
        if columns.iter().all(|(_, t)| t.load(l).is_none()) {
            continue;
        }
        write!(s, "{:<12}", load_label(l)).unwrap();
        for (_, t) in columns {
            match t.load(l) {
                Some(st) => write!(s, " | {:>10.4}", st.rmse).unwrap(),
                None => write!(s, " | {:>10}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

pub fn load_csv(columns: &[(&str, &MetricsTable)]) -> String {
    let mut s = String::from("condition");
    for (name, _) in columns {
        write!(s, ",{name}").unwrap();
    }
    s.push('\n');
    for l in LoadCondition::ALL {
        if columns.iter().all(|(_, t)| t.load(l).is_none()) {
            continue;
        }
        s.push_str(l.as_str());
        for (_, t) in columns {
            match t.load(l) {
                Some(st) => write!(s, ",{}", st.rmse).unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(v: f64) -> Vec<Point3> {
        (0..5).map(|i| [v + i as f64, -v, 2.0 * v]).collect()
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let truth: Vec<_> = (0..4).map(|k| cloud(k as f64)).collect();
        let loads = [LoadCondition::None; 4];
        let t = MetricsTable::compute(&truth, &truth, &loads).unwrap();
        assert_eq!(t.overall, ErrorStat::default());
        assert!(t.per_marker.iter().flatten().all(|s| *s == ErrorStat::default()));
    }

    #[test]
    fn constant_mean_predictor_gives_axis_std() {
        let truth: Vec<_> = [1.0, 2.0, 4.0, 9.0].iter().map(|&v| cloud(v)).collect();
        let mean: Vec<Point3> = (0..5)
            .map(|i| {
                let mut m = [0.0; 3];
                for t in &truth {
                    for a in 0..3 {
                        m[a] += t[i][a] / 4.0;
                    }
                }
                m
            })
            .collect();
        let pred = vec![mean; 4];
        let table = MetricsTable::compute(&pred, &truth, &[LoadCondition::Fe1; 4]).unwrap();
        // Population std of {1,2,4,9} is sqrt(9.5).
        let sd = 9.5f64.sqrt();
        for m in &table.per_marker {
            assert!((m[0].rmse - sd).abs() < 1e-12);
            assert!((m[1].rmse - sd).abs() < 1e-12);
            assert!((m[2].rmse - 2.0 * sd).abs() < 1e-12);
        }
        assert!(table.overall.rmse <= table.overall.max);
        assert_eq!(table.per_load.len(), 1);
    }

    #[test]
    fn table_layout_rows() {
        let truth: Vec<_> = (0..3).map(|k| cloud(k as f64)).collect();
        let pred: Vec<_> = (0..3).map(|k| cloud(k as f64 + 0.1)).collect();
        let loads = [LoadCondition::None, LoadCondition::Fe2, LoadCondition::Fe2];
        let t = MetricsTable::compute(&pred, &truth, &loads).unwrap();
        let text = comparison_table(&[("A", &t), ("B", &t), ("C", &t), ("D", &t)]).unwrap();
        let labels: Vec<&str> = text.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(labels, ["x3", "y3", "z3", "x4", "y4", "z4", "x5", "y5", "z5", "Overall"]);
        assert_eq!(text.lines().nth(1).unwrap().matches("RMSE").count(), 4);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 1 + 15 + 1 + 2);
        let loads = load_table(&[("P", &t)]);
        assert_eq!(loads.lines().count(), 3);
        assert!(MetricsTable::compute(&[], &[], &[]).is_err());
    }
}

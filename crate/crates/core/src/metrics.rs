//! Continual-learning metrics over a stage x dataset accuracy matrix.
//!
//! `A[u][n]` is the accuracy on dataset `n` after training stage `u`
//! (both 0-based here). With `N` datasets:
//!
//! * avg: grand mean of all `N * N` cells (mean over stages of the per-stage
//!   mean over every dataset, seen or not).
//! * last: mean of the final row.
//! * forgetting: for every dataset, the mean of its column from the stage it
//!   was trained on downwards (`v >= n`), then the mean over datasets.
//! * transfer: for every dataset after the first, the mean of its column
//!   above the diagonal (`v < n`), then the mean over those datasets.
//!   Undefined for `N = 1`.
//!
//! Values are fractions in `[0, 1]`; reports render percentages.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::util::Provenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(columns: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.len();
        contract!(n >= 1, "accuracy matrix needs at least one dataset");
        contract!(values.len() == n, "{} rows for {n} datasets", values.len());
        for (u, row) in values.iter().enumerate() {
            contract!(row.len() == n, "row {} has {} entries, expected {n}", u + 1, row.len());
            for &v in row {
                contract!(
                    v.is_finite() && (0.0..=1.0).contains(&v),
                    "entry {v} in row {} outside [0, 1]",
                    u + 1
                );
            }
        }
        Ok(Self { columns, values })
    }

    pub fn filled(columns: Vec<String>, value: f64) -> Result<Self> {
        let n = columns.len();
        Self::new(columns, vec![vec![value; n]; n])
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, stage: usize, dataset: usize) -> f64 {
        self.values[stage][dataset]
    }

    /// Rows are stages, columns datasets; values are fractions written in
    /// shortest round-trip form.
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            out.push_str(&p.csv_comment());
        }
        out.push_str("stage");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (u, row) in self.values.iter().enumerate() {
            out.push_str(&(u + 1).to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses the layout written by [`AccuracyMatrix::to_csv`]. The first
    /// column holds row labels and is ignored. Lines starting with `#` are
    /// skipped. If any value exceeds 1 the whole matrix is read as percent.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("matrix csv is empty".into()))?;
        let columns: Vec<String> = header.split(',').skip(1).map(|c| c.trim().to_string()).collect();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let row = line
                .split(',')
                .skip(1)
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("line {}: {:?} is not a number: {e}", lineno + 1, v.trim()))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            values.push(row);
        }
        if values.iter().flatten().any(|&v| v > 1.0) {
            for v in values.iter_mut().flatten() {
                *v /= 100.0;
            }
        }
        Self::new(columns, values).map_err(|e| match e {
            Error::Contract(m) => Error::Format(m),
            e => e,
        })
    }
}

/// Mean taken relative to the first element, so a run of equal values
/// averages to exactly that value.
fn mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64
}

/// Mean of each stage row over all datasets.
pub fn stage_means(m: &AccuracyMatrix) -> Vec<f64> {
    m.values.iter().map(|row| mean(row)).collect()
}

pub fn avg(m: &AccuracyMatrix) -> f64 {
    mean(&stage_means(m))
}

pub fn last(m: &AccuracyMatrix) -> f64 {
    mean(&m.values[m.n() - 1])
}

/// Mean of each dataset column over all stages.
pub fn dataset_avg(m: &AccuracyMatrix) -> Vec<f64> {
    (0..m.n())
        .map(|n| mean(&(0..m.n()).map(|v| m.get(v, n)).collect::<Vec<_>>()))
        .collect()
}

/// Mean of column `n` over stages `n..N`.
pub fn dataset_forgetting(m: &AccuracyMatrix) -> Vec<f64> {
    let big_n = m.n();
    (0..big_n)
        .map(|n| mean(&(n..big_n).map(|v| m.get(v, n)).collect::<Vec<_>>()))
        .collect()
}

pub fn forgetting(m: &AccuracyMatrix) -> f64 {
    mean(&dataset_forgetting(m))
}

/// Mean of column `n` over stages before `n`; `None` for the first dataset.
pub fn dataset_transfer(m: &AccuracyMatrix) -> Vec<Option<f64>> {
    (0..m.n())
        .map(|n| (n > 0).then(|| mean(&(0..n).map(|v| m.get(v, n)).collect::<Vec<_>>())))
        .collect()
}

pub fn transfer(m: &AccuracyMatrix) -> Result<f64> {
    if m.n() < 2 {
        return Err(Error::UndefinedMetric("transfer needs at least two datasets".into()));
    }
    let r: Vec<f64> = dataset_transfer(m).into_iter().flatten().collect();
    Ok(mean(&r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub columns: Vec<String>,
    pub avg: f64,
    pub last: f64,
    pub forgetting: f64,
    pub transfer: Option<f64>,
    pub stage_means: Vec<f64>,
    /// Mean of each dataset column over all stages.
    pub dataset_avg: Vec<f64>,
    /// Final-stage accuracy per dataset.
    pub dataset_last: Vec<f64>,
    pub dataset_forgetting: Vec<f64>,
    pub dataset_transfer: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct Percent {
    avg: String,
    last: String,
    forgetting: String,
    transfer: Option<String>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    provenance: Option<&'a Provenance>,
    #[serde(flatten)]
    report: &'a MetricReport,
    percent: Percent,
}

pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl MetricReport {
    pub fn from_matrix(m: &AccuracyMatrix) -> Self {
        let transfer = transfer(m).ok();
        Self {
            n: m.n(),
            columns: m.columns.clone(),
            avg: avg(m),
            last: last(m),
            forgetting: forgetting(m),
            transfer,
            stage_means: stage_means(m),
            dataset_avg: dataset_avg(m),
            dataset_last: m.values[m.n() - 1].clone(),
            dataset_forgetting: dataset_forgetting(m),
            dataset_transfer: dataset_transfer(m),
        }
    }

    pub fn to_json(&self, provenance: Option<&Provenance>) -> Result<String> {
        let doc = ReportJson {
            provenance,
            report: self,
            percent: Percent {
                avg: pct(self.avg),
                last: pct(self.last),
                forgetting: pct(self.forgetting),
                transfer: self.transfer.map(pct),
            },
        };
        serde_json::to_string_pretty(&doc)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// One row per metric, one column per dataset, overall value last; all in
    /// percent with two decimals.
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            out.push_str(&p.csv_comment());
        }
        out.push_str("metric");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",overall\n");
        let mut row = |name: &str, cells: Vec<Option<f64>>, overall: Option<f64>| {
            out.push_str(name);
            for c in cells {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&pct(v));
                }
            }
            out.push(',');
            if let Some(v) = overall {
                out.push_str(&pct(v));
            }
            out.push('\n');
        };
        row("avg", self.dataset_avg.iter().copied().map(Some).collect(), Some(self.avg));
        row("forgetting", self.dataset_forgetting.iter().copied().map(Some).collect(), Some(self.forgetting));
        row("transfer", self.dataset_transfer.clone(), self.transfer);
        row("last", self.dataset_last.iter().copied().map(Some).collect(), Some(self.last));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn constant_matrix() {
        let m = AccuracyMatrix::filled(cols(4), 0.5).unwrap();
        assert_eq!(avg(&m), 0.5);
        assert_eq!(last(&m), 0.5);
        assert_eq!(forgetting(&m), 0.5);
        assert_eq!(transfer(&m).unwrap(), 0.5);
    }

    #[test]
    fn single_dataset() {
        let m = AccuracyMatrix::new(cols(1), vec![vec![0.8]]).unwrap();
        assert_eq!(avg(&m), 0.8);
        assert_eq!(last(&m), 0.8);
        assert!(matches!(transfer(&m), Err(Error::UndefinedMetric(_))));
        assert_eq!(MetricReport::from_matrix(&m).transfer, None);
    }

    #[test]
    fn last_of_identity_like_row() {
        let mut v = vec![vec![0.0; 4]; 4];
        v[3][0] = 1.0;
        let m = AccuracyMatrix::new(cols(4), v).unwrap();
        assert_eq!(last(&m), 0.25);
    }

    #[test]
    fn strict_upper_ones_give_full_transfer() {
        let mut v = vec![vec![0.0; 3]; 3];
        v[0][1] = 1.0;
        v[0][2] = 1.0;
        v[1][2] = 1.0;
        let m = AccuracyMatrix::new(cols(3), v).unwrap();
        assert_eq!(transfer(&m).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(AccuracyMatrix::new(cols(2), vec![vec![0.1, 0.2]]).is_err());
        assert!(AccuracyMatrix::new(cols(1), vec![vec![1.5]]).is_err());
        assert!(AccuracyMatrix::new(cols(1), vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn csv_round_trip_and_percent_detection() {
        let m = AccuracyMatrix::new(cols(2), vec![vec![0.1, 1.0 / 3.0], vec![0.25, 0.9]]).unwrap();
        let p = Provenance {
            config_hash: "abc".into(),
            seed: 3,
        };
        let text = m.to_csv(Some(&p));
        assert!(text.starts_with("# config_hash=abc seed=3\n"));
        assert_eq!(AccuracyMatrix::from_csv(&text).unwrap(), m);
        let pct = AccuracyMatrix::from_csv("stage,a,b\n1,50,0\n2,25,100\n").unwrap();
        assert_eq!(pct.values, vec![vec![0.5, 0.0], vec![0.25, 1.0]]);
        assert!(matches!(AccuracyMatrix::from_csv("stage,a\n1,x\n"), Err(Error::Format(_))));
    }

    #[test]
    fn report_renders_two_decimals() {
        let m = AccuracyMatrix::new(cols(2), vec![vec![0.5, 0.25], vec![0.75, 1.0]]).unwrap();
        let r = MetricReport::from_matrix(&m);
        let csv = r.to_csv(None);
        assert!(csv.contains("avg,62.50,62.50,62.50\n"), "{csv}");
        assert!(csv.contains("transfer,,25.00,25.00\n"), "{csv}");
        assert!(csv.contains("last,75.00,100.00,87.50\n"), "{csv}");
        let json = r.to_json(None).unwrap();
        assert!(json.contains("\"last\": \"87.50\""), "{json}");
    }
}

//! Table-shaped CSV reports: rows are methods or settings, columns are
//! datasets, the last column is the overall value. Accuracies in percent.

use crate::datagen::SyntheticDataset;
use crate::metrics::{pct, MetricReport};
use crate::pipeline::Reports;
use crate::trainer::RunOutput;
use crate::util::Provenance;

fn cells(values: impl IntoIterator<Item = Option<f64>>) -> String {
    values
        .into_iter()
        .map(|v| v.map(pct).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(",")
}

/// Avg, Last, Transfer and Forgetting for every method.
pub fn summary_table(reports: &Reports, provenance: &Provenance) -> String {
    let mut out = provenance.csv_comment();
    out.push_str(&format!("metric,method,{},overall\n", reports.cil.columns.join(",")));
    let methods: [(&str, &MetricReport); 4] = [
        ("zero-shot", &reports.zero_shot),
        ("union", &reports.union),
        ("cil", &reports.cil),
        ("til", &reports.til),
    ];
    for (metric, pick) in [
        ("transfer", 0usize),
        ("avg", 1),
        ("last", 2),
        ("forgetting", 3),
    ] {
        for (method, r) in methods {
            let (row, overall): (Vec<Option<f64>>, Option<f64>) = match pick {
                0 => (r.dataset_transfer.clone(), r.transfer),
                1 => (r.dataset_avg.iter().copied().map(Some).collect(), Some(r.avg)),
                2 => (r.dataset_last.iter().copied().map(Some).collect(), Some(r.last)),
                _ => (r.dataset_forgetting.iter().copied().map(Some).collect(), Some(r.forgetting)),
            };
            out.push_str(&format!("{metric},{method},{},{}\n", cells(row), cells([overall])));
        }
    }
    out
}

/// Category-level against domain-level prototypes.
pub fn granularity_table(category: &Reports, domain: &Reports, provenance: &Provenance) -> String {
    let mut out = provenance.csv_comment();
    out.push_str(&format!("granularity,{},cil_last,cil_avg,til_last,taskid_mean\n", category.cil.columns.join(",")));
    for (name, r) in [("category", category), ("domain", domain)] {
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            cells(r.cil.dataset_last.iter().copied().map(Some)),
            pct(r.cil.last),
            pct(r.cil.avg),
            pct(r.til.last),
            pct(r.taskid.forgetting),
        ));
    }
    out
}

/// `stage,domain,epoch,mean_loss,accuracy` for every stage of a run.
pub fn train_log_csv(out: &RunOutput, data: &SyntheticDataset, provenance: &Provenance) -> String {
    let mut s = provenance.csv_comment();
    s.push_str("stage,domain,epoch,mean_loss,accuracy\n");
    for (stage, log) in out.logs.iter().enumerate() {
        for e in &log.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                stage + 1,
                data.domains[log.domain].name,
                e.epoch,
                e.mean_loss,
                e.accuracy
            ));
        }
    }
    s
}

//! End-to-end stages: data, encoder pretraining, sequential training,
//! evaluation and report files. Each stage reads and writes the directories
//! named in [`RunConfig::paths`], so the stages can also run as separate
//! processes.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{generate, SyntheticDataset};
use crate::encoder::{DualEncoder, FrozenWeights};
use crate::error::{Error, Result};
use crate::inference::{Evaluator, Regime};
use crate::metrics::{AccuracyMatrix, MetricReport};
use crate::pretrain::{pretrain_encoders, PretrainReport};
use crate::prompt::PromptPool;
use crate::prototype::{build_domain_prototypes, DomainPrototypeSet, Granularity};
use crate::report;
use crate::trainer::{load_checkpoints, sequential_run, RunOutput};
use crate::util::{hash_json, Provenance};

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn generate_data(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let run = || {
        let data = generate(&cfg.benchmark)?;
        data.save(&cfg.paths.data)?;
        Ok(data)
    };
    run().map_err(|e: Error| e.in_stage("gen-data"))
}

/// Loads the dataset and checks it was generated from this config's spec.
pub fn load_data(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let run = || {
        let data = SyntheticDataset::load(&cfg.paths.data)?;
        if hash_json(&data.spec)? != hash_json(&cfg.benchmark)? {
            return Err(Error::Config(format!(
                "{} was generated from a different benchmark spec; rerun gen-data",
                cfg.paths.data.display()
            )));
        }
        Ok(data)
    };
    run().map_err(|e: Error| e.in_stage("load-data"))
}

pub fn pretrain(cfg: &RunConfig, data: &SyntheticDataset) -> Result<(FrozenWeights, PretrainReport)> {
    let run = || {
        let init = FrozenWeights::initialize(&cfg.encoder, &data.lexicon, cfg.seed)?;
        let (weights, rep) = pretrain_encoders(init, &data.pretext, &data.templates, &cfg.pretrain)?;
        log::info!(
            "pretraining: loss {:.4} -> {:.4}, held-out zero-shot {:.3} (chance {:.3})",
            rep.initial_loss,
            rep.final_loss,
            rep.heldout_accuracy,
            rep.chance
        );
        weights.save(&cfg.paths.encoder())?;
        write_file(&cfg.paths.reports.join("pretrain.json"), &to_json(&rep)?)?;
        Ok((weights, rep))
    };
    run().map_err(|e: Error| e.in_stage("pretrain"))
}

pub fn load_encoder(cfg: &RunConfig) -> Result<DualEncoder> {
    let run = || {
        let weights = FrozenWeights::load(&cfg.paths.encoder())?;
        if weights.config.layers != cfg.encoder.layers || weights.config.width != cfg.encoder.width {
            return Err(Error::Config(format!(
                "{} was built for a different encoder config; rerun pretrain",
                cfg.paths.encoder().display()
            )));
        }
        encoder_from(cfg, weights)
    };
    run().map_err(|e: Error| e.in_stage("load-encoder"))
}

/// Encoder with the prompt geometry from the config (which ablations may
/// change after pretraining).
pub fn encoder_from(cfg: &RunConfig, weights: FrozenWeights) -> Result<DualEncoder> {
    DualEncoder::new(weights).with_prompt_geometry(cfg.encoder.replace_depth, cfg.encoder.prompt_len)
}

pub fn task_order(cfg: &RunConfig, data: &SyntheticDataset) -> Result<Vec<usize>> {
    cfg.order.resolve(&data.domain_names(), cfg.seed)
}

pub fn compute_prototypes(cfg: &RunConfig, enc: &DualEncoder, data: &SyntheticDataset) -> Result<Vec<DomainPrototypeSet>> {
    let run = || {
        let sets = task_order(cfg, data)?
            .into_iter()
            .map(|d| build_domain_prototypes(enc, &data.domains[d], &data.templates, cfg.train.normalization))
            .collect::<Result<Vec<_>>>()?;
        write_file(&cfg.paths.reports.join("prototypes.json"), &to_json(&sets)?)?;
        Ok(sets)
    };
    run().map_err(|e: Error| e.in_stage("prototypes"))
}

pub fn train(cfg: &RunConfig, enc: &DualEncoder, data: &SyntheticDataset) -> Result<RunOutput> {
    let run = || {
        let order = task_order(cfg, data)?;
        let prov = cfg.provenance()?;
        let out = sequential_run(enc, data, &order, &cfg.train, Some(&cfg.paths.checkpoints()), Some(&prov))?;
        write_file(&cfg.paths.reports.join("train_log.csv"), &report::train_log_csv(&out, data, &prov))?;
        Ok(out)
    };
    run().map_err(|e: Error| e.in_stage("train"))
}

pub fn load_snapshots(cfg: &RunConfig, stages: usize) -> Result<Vec<PromptPool>> {
    load_checkpoints(&cfg.paths.checkpoints(), stages).map_err(|e| e.in_stage("load-checkpoints"))
}

/// Every matrix produced by one evaluation, columns in task order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub columns: Vec<String>,
    pub zero_shot: Vec<f64>,
    pub cil: AccuracyMatrix,
    pub til: AccuracyMatrix,
    pub union: AccuracyMatrix,
    pub taskid: AccuracyMatrix,
}

impl Evaluation {
    /// Constant-column matrix of a model that never changes.
    pub fn zero_shot_matrix(&self) -> Result<AccuracyMatrix> {
        AccuracyMatrix::new(self.columns.clone(), vec![self.zero_shot.clone(); self.columns.len()])
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    enc: &DualEncoder,
    data: &SyntheticDataset,
    snapshots: &[PromptPool],
) -> Result<Evaluation> {
    let run = || {
        let order = task_order(cfg, data)?;
        let mut ev = Evaluator::new(enc.clone(), data.templates.clone(), cfg.inference).with_train_template(&cfg.train.template);
        let zero_shot = ev.zero_shot_row(data, &order)?;
        let cil = ev.evaluate_matrix(data, &order, snapshots, Regime::Cil)?;
        let til = ev.evaluate_matrix(data, &order, snapshots, Regime::Til)?;
        let union = ev.evaluate_matrix(data, &order, snapshots, Regime::Union)?;
        let final_pool = snapshots
            .last()
            .ok_or_else(|| Error::Contract("evaluation needs at least one stage".into()))?;
        let sets: Vec<DomainPrototypeSet> = final_pool.prototype_sets().into_iter().cloned().collect();
        let features = order
            .iter()
            .map(|&d| {
                data.domains[d]
                    .test
                    .iter()
                    .enumerate()
                    .map(|(i, s)| ev.frozen_image(Some((d, i)), &s.image).map(|f| f.as_ref().clone()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let columns: Vec<String> = order.iter().map(|&d| data.domains[d].name.clone()).collect();
        let taskid = cfg.discriminator().accuracy_matrix(columns.clone(), &sets, &features)?;
        Ok(Evaluation {
            columns,
            zero_shot,
            cil,
            til,
            union,
            taskid,
        })
    };
    run().map_err(|e: Error| e.in_stage("eval"))
}

/// Writes the matrices of `eval` as CSV files in the report directory.
pub fn write_matrices(cfg: &RunConfig, eval: &Evaluation) -> Result<()> {
    let prov = cfg.provenance()?;
    let dir = &cfg.paths.reports;
    for (name, m) in [
        ("matrix_cil.csv", &eval.cil),
        ("matrix_til.csv", &eval.til),
        ("matrix_union.csv", &eval.union),
        ("taskid_matrix.csv", &eval.taskid),
        ("matrix_zero_shot.csv", &eval.zero_shot_matrix()?),
    ] {
        write_file(&dir.join(name), &m.to_csv(Some(&prov)))?;
    }
    Ok(())
}

/// Reads back the matrices written by [`write_matrices`].
pub fn read_matrices(cfg: &RunConfig) -> Result<Evaluation> {
    let dir = &cfg.paths.reports;
    let read = |name: &str| -> Result<AccuracyMatrix> {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("{} (run eval first)", path.display())),
            _ => Error::io(&path, e),
        })?;
        AccuracyMatrix::from_csv(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    };
    let zs = read("matrix_zero_shot.csv")?;
    Ok(Evaluation {
        columns: zs.columns.clone(),
        zero_shot: zs.values[0].clone(),
        cil: read("matrix_cil.csv")?,
        til: read("matrix_til.csv")?,
        union: read("matrix_union.csv")?,
        taskid: read("taskid_matrix.csv")?,
    })
}

/// Metric summaries of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Reports {
    pub cil: MetricReport,
    pub til: MetricReport,
    pub union: MetricReport,
    pub zero_shot: MetricReport,
    pub taskid: MetricReport,
}

impl Reports {
    pub fn from_evaluation(eval: &Evaluation) -> Result<Self> {
        Ok(Self {
            cil: MetricReport::from_matrix(&eval.cil),
            til: MetricReport::from_matrix(&eval.til),
            union: MetricReport::from_matrix(&eval.union),
            zero_shot: MetricReport::from_matrix(&eval.zero_shot_matrix()?),
            taskid: MetricReport::from_matrix(&eval.taskid),
        })
    }
}

pub fn write_reports(cfg: &RunConfig, eval: &Evaluation) -> Result<Reports> {
    let run = || {
        let prov = cfg.provenance()?;
        let dir = &cfg.paths.reports;
        let reports = Reports::from_evaluation(eval)?;
        write_file(&dir.join("metrics_cil.json"), &reports.cil.to_json(Some(&prov))?)?;
        write_file(&dir.join("metrics_til.json"), &reports.til.to_json(Some(&prov))?)?;
        write_file(&dir.join("metrics_union.json"), &reports.union.to_json(Some(&prov))?)?;
        write_file(&dir.join("taskid_metrics.csv"), &reports.taskid.to_csv(Some(&prov)))?;
        write_file(&dir.join("summary.csv"), &report::summary_table(&reports, &prov))?;
        Ok(reports)
    };
    run().map_err(|e: Error| e.in_stage("report"))
}

/// Result of a full pipeline run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub provenance: Provenance,
    pub pretrain: PretrainReport,
    pub evaluation: Evaluation,
    pub reports: Reports,
    pub logs: RunOutput,
    /// Category-level counterpart, present when the run uses domain-level
    /// prototypes.
    pub category_counterpart: Option<Box<RunSummary>>,
}

/// gen-data, pretrain, train, eval and report in one process.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let summary = run_once(cfg)?;
    let domain_level =
        cfg.train.granularity == Granularity::Domain || cfg.inference.discriminator.granularity == Granularity::Domain;
    if !domain_level {
        return Ok(summary);
    }
    log::info!("running the category-level counterpart for the granularity comparison");
    let mut counterpart = cfg.clone();
    counterpart.paths = crate::config::Paths::under(&cfg.paths.pools.join("category-counterpart"));
    counterpart.ablation.prototype_granularity = Some(Granularity::Category);
    counterpart.train.granularity = Granularity::Category;
    counterpart.inference.discriminator.granularity = Granularity::Category;
    let counterpart = counterpart.resolved()?;
    let other = run_once(&counterpart)?;
    let table = report::granularity_table(&other.reports, &summary.reports, &summary.provenance);
    write_file(&cfg.paths.reports.join("granularity_comparison.csv"), &table)?;
    Ok(RunSummary {
        category_counterpart: Some(Box::new(other)),
        ..summary
    })
}

fn run_once(cfg: &RunConfig) -> Result<RunSummary> {
    let provenance = cfg.provenance()?;
    let data = generate_data(cfg)?;
    let (weights, pretrain_report) = pretrain(cfg, &data)?;
    let enc = encoder_from(cfg, weights).map_err(|e| e.in_stage("pretrain"))?;
    compute_prototypes(cfg, &enc, &data)?;
    let out = train(cfg, &enc, &data)?;
    let evaluation = evaluate(cfg, &enc, &data, &out.snapshots)?;
    write_matrices(cfg, &evaluation).map_err(|e| e.in_stage("eval"))?;
    let reports = write_reports(cfg, &evaluation)?;
    log::info!(
        "CIL last {} TIL last {} union last {}",
        crate::metrics::pct(reports.cil.last),
        crate::metrics::pct(reports.til.last),
        crate::metrics::pct(reports.union.last)
    );
    Ok(RunSummary {
        provenance,
        pretrain: pretrain_report,
        evaluation,
        reports,
        logs: out,
        category_counterpart: None,
    })
}

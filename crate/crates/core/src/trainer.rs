//! Sequential training of one prompt component per domain.

use std::collections::BTreeMap;
use std::path::Path;

use protoprompt_autodiff::{Adam, AdamConfig, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conditioned::{encoder_for, image_feature, prototype_input, text_features};
use crate::datagen::{shuffled_indices, DomainData, Sample, SyntheticDataset, TRAIN_TEMPLATE};
use crate::encoder::DualEncoder;
use crate::error::{contract, Error, Result};
use crate::prompt::{BlockMode, BoundComponent, ComponentMeta, DomainComponent, PromptPool};
use crate::prototype::{build_domain_prototypes, DomainPrototypeSet, Granularity, NormalizationFlags, PrototypeKind};
use crate::util::{argmax, rng_stream, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-dataset epoch overrides, matched case-insensitively on the domain
    /// name.
    pub epoch_table: BTreeMap<String, usize>,
    pub temperature: f64,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub mode: BlockMode,
    pub prototype_kind: PrototypeKind,
    pub granularity: Granularity,
    pub normalization: NormalizationFlags,
    pub template: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epoch_table = [
            ("aircraft", 20),
            ("caltech101", 10),
            ("cifar100", 2),
            ("dtd", 35),
            ("eurosat", 3),
            ("flowers", 63),
            ("food", 1),
            ("mnist", 2),
            ("oxfordpet", 18),
            ("cars", 8),
            ("sun397", 1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 5,
            epoch_table,
            temperature: 0.07,
            seed: 0,
            mode: BlockMode::PreNorm,
            prototype_kind: PrototypeKind::Combined,
            granularity: Granularity::Category,
            normalization: NormalizationFlags::default(),
            template: TRAIN_TEMPLATE.to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(self.epochs >= 1, "epoch count must be at least 1");
        contract!(self.epoch_table.values().all(|&e| e >= 1), "epoch table entries must be at least 1");
        contract!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "temperature must be positive"
        );
        contract!(self.template.contains("{}"), "training template needs a placeholder");
        Ok(())
    }

    pub fn epochs_for(&self, domain_name: &str) -> usize {
        self.epoch_table
            .get(&domain_name.to_lowercase())
            .copied()
            .unwrap_or(self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub domain: usize,
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

impl TrainLog {
    pub fn to_csv(&self, provenance: Option<&Provenance>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            out.push_str(&p.csv_comment());
        }
        out.push_str("epoch,mean_loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.accuracy));
        }
        out
    }
}

/// Cross-entropy and logits of one batch with `component` placed on the
/// graph as `bound`.
#[allow(clippy::too_many_arguments)]
pub fn conditioned_loss(
    g: &mut Graph,
    enc: &DualEncoder,
    component: &DomainComponent,
    bound: &BoundComponent,
    prototypes: &DomainPrototypeSet,
    batch: &[&Sample],
    template: &str,
    temperature: f64,
) -> Result<(Var, Var)> {
    let enc = encoder_for(enc, component)?;
    let p = g.constant(prototype_input(component, prototypes));
    let text = text_features(g, &enc, bound, p, &component.categories, template, component.meta.mode)?;
    let mut imgs = Vec::with_capacity(batch.len());
    for s in batch {
        imgs.push(image_feature(g, &enc, bound, p, &s.image, component.meta.mode)?);
    }
    let images = g.concat_rows(&imgs);
    let logits = g.matmul_nt(images, text);
    let logits = g.scale(logits, 1.0 / temperature);
    let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
    Ok((g.cross_entropy(logits, &targets), logits))
}

/// Binds `component` as trainable and returns loss, logits and the bound
/// parameters.
pub fn batch_loss(
    g: &mut Graph,
    enc: &DualEncoder,
    component: &DomainComponent,
    prototypes: &DomainPrototypeSet,
    batch: &[&Sample],
    template: &str,
    temperature: f64,
) -> Result<(Var, Var, BoundComponent)> {
    let bound = component.bind(g, true);
    let (loss, logits) = conditioned_loss(g, enc, component, &bound, prototypes, batch, template, temperature)?;
    Ok((loss, logits, bound))
}

pub fn new_component(
    enc: &DualEncoder,
    domain: &DomainData,
    config: &TrainConfig,
    epochs: usize,
) -> Result<DomainComponent> {
    contract!(
        enc.embed_dim() == enc.width(),
        "prompt modules need the projected width ({}) to equal the model width ({})",
        enc.embed_dim(),
        enc.width()
    );
    DomainComponent::init(
        domain.index,
        &domain.name,
        domain.categories.clone(),
        enc.width(),
        ComponentMeta {
            epochs,
            seed: config.seed,
            mode: config.mode,
            replace_depth: enc.replace_depth(),
            prompt_len: enc.prompt_len(),
            prototype_kind: config.prototype_kind,
            granularity: config.granularity,
        },
    )
}

/// Trains a fresh component for `domain` for `epochs` epochs.
pub fn train_domain(
    enc: &DualEncoder,
    domain: &DomainData,
    prototypes: &DomainPrototypeSet,
    config: &TrainConfig,
    epochs: usize,
) -> Result<(DomainComponent, TrainLog)> {
    config.validate()?;
    contract!(epochs >= 1, "epoch count must be at least 1");
    contract!(!domain.train.is_empty(), "domain {} has no training samples", domain.name);
    contract!(
        prototypes.categories == domain.categories,
        "prototype set does not match domain {}",
        domain.name
    );
    let mut component = new_component(enc, domain, config, epochs)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &component.params(),
    );
    let mut log = TrainLog {
        domain: domain.index,
        ..TrainLog::default()
    };
    for epoch in 0..epochs {
        let mut rng = rng_stream(config.seed, &format!("shuffle-{}-{epoch}", domain.index));
        let order = shuffled_indices(domain.train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &domain.train[i]).collect();
            let mut g = Graph::new();
            let where_ = |e: &dyn std::fmt::Display| {
                Error::Numerical(format!("domain {} epoch {} batch {}: {e}", domain.name, epoch + 1, b + 1))
            };
            let (loss, logits, bound) = batch_loss(
                &mut g,
                enc,
                &component,
                prototypes,
                &batch,
                &config.template,
                config.temperature,
            )
            .map_err(|e| match e {
                Error::Numerical(m) => where_(&m),
                e => e,
            })?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(where_(&format!("loss is {value}")));
            }
            let grads = g.backward(loss).map_err(|e| where_(&e))?;
            let vars = bound.vars();
            contract!(g.params() == vars, "graph holds parameters outside the current component");
            contract!(
                grads.vars().iter().all(|v| vars.contains(v)),
                "gradient reached a parameter outside the current component"
            );
            let grad_tensors: Vec<Tensor> = vars
                .iter()
                .zip(component.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            adam.step(&mut component.params_mut(), &grad_refs)?;
            loss_sum += value * batch.len() as f64;
            let l = g.value(logits);
            correct += batch
                .iter()
                .enumerate()
                .filter(|(i, s)| argmax(l.row_slice(*i)) == s.label)
                .count();
        }
        let n = domain.train.len() as f64;
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        log::info!(
            "{}: epoch {} loss {:.4} train accuracy {:.3}",
            domain.name,
            stats.epoch,
            stats.mean_loss,
            stats.accuracy
        );
        log.epochs.push(stats);
    }
    log.steps = adam.step_count();
    Ok((component, log))
}

/// One pool snapshot per stage plus training logs.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub order: Vec<usize>,
    pub snapshots: Vec<PromptPool>,
    pub logs: Vec<TrainLog>,
}

impl RunOutput {
    pub fn final_pool(&self) -> &PromptPool {
        self.snapshots.last().expect("at least one stage")
    }
}

/// Trains the domains of `dataset` in `order` (domain indices). For each
/// stage: prototypes, training, pool insertion, snapshot. When
/// `checkpoint_dir` is set each stage writes `stage-<n>/pool.bin` and
/// `stage-<n>/metrics.csv`.
pub fn sequential_run(
    enc: &DualEncoder,
    dataset: &SyntheticDataset,
    order: &[usize],
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    provenance: Option<&Provenance>,
) -> Result<RunOutput> {
    config.validate()?;
    contract!(!order.is_empty(), "task sequence is empty");
    for (i, &d) in order.iter().enumerate() {
        contract!(d < dataset.domains.len(), "task sequence names unknown domain {d}");
        contract!(!order[..i].contains(&d), "domain {d} appears twice in the task sequence");
    }
    let mut pool = PromptPool::new();
    let mut snapshots = Vec::with_capacity(order.len());
    let mut logs = Vec::with_capacity(order.len());
    for (stage, &d) in order.iter().enumerate() {
        let domain = &dataset.domains[d];
        let prototypes = build_domain_prototypes(enc, domain, &dataset.templates, config.normalization)?;
        let epochs = config.epochs_for(&domain.name);
        let (component, log) = train_domain(enc, domain, &prototypes, config, epochs)?;
        pool.save_component(component, prototypes)?;
        if let Some(dir) = checkpoint_dir {
            let stage_dir = dir.join(format!("stage-{}", stage + 1));
            pool.save(&stage_dir.join("pool.bin"))?;
            let path = stage_dir.join("metrics.csv");
            std::fs::write(&path, log.to_csv(provenance)).map_err(|e| Error::io(&path, e))?;
        }
        snapshots.push(pool.clone());
        logs.push(log);
    }
    Ok(RunOutput {
        order: order.to_vec(),
        snapshots,
        logs,
    })
}

/// Reads back `stage-1 .. stage-n` pool checkpoints.
pub fn load_checkpoints(dir: &Path, stages: usize) -> Result<Vec<PromptPool>> {
    (1..=stages)
        .map(|s| PromptPool::load(&dir.join(format!("stage-{s}")).join("pool.bin")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Contract(_))));
        let c = TrainConfig {
            temperature: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_table_lookup() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs_for("Aircraft"), 20);
        assert_eq!(c.epochs_for("domain-1"), 5);
    }
}

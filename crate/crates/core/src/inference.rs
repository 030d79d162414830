//! Classification with a prompt pool: Task-ID known, Task-ID predicted,
//! unseen domains, and the all-categories union baseline.
//!
//! Encoder passes are cached: frozen image features and component-conditioned
//! image features per image key, conditioned text features per component,
//! zero-shot text features per category name. Components are immutable, so a
//! cached value is exactly what a fresh pass would return.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use protoprompt_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioned::{encoder_for, image_feature, prototype_input, text_features};
use crate::datagen::{SyntheticDataset, TRAIN_TEMPLATE};
use crate::discriminator::Discriminator;
use crate::encoder::{zero_shot_classify, DualEncoder};
use crate::error::{contract, Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::prompt::{normalize_name, PoolEntry, PromptPool};
use crate::prototype::text_features as template_features;
use crate::util::{argmax, dot, mean_vec, normalized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Cil,
    Til,
    Union,
}

/// How seen-domain component scores enter unseen-domain classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenFallback {
    /// Per category, the max of its zero-shot score and its component scores.
    ZeroShotAndComponents,
    /// Categories known to the vocabulary use component scores only.
    ComponentsOnly,
}

impl FromStr for UnseenFallback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zero-shot-and-components" | "superset" => Ok(Self::ZeroShotAndComponents),
            "components-only" => Ok(Self::ComponentsOnly),
            _ => Err(Error::Config(format!(
                "unknown unseen fallback {s:?} (zero-shot-and-components, components-only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnionVariant {
    /// Every (domain, category) pair scored with its own component.
    Components,
    /// Frozen zero-shot scores over the union of seen categories.
    ZeroShot,
}

impl FromStr for UnionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "components" => Ok(Self::Components),
            "zero-shot" => Ok(Self::ZeroShot),
            _ => Err(Error::Config(format!("unknown union variant {s:?} (components, zero-shot)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceOptions {
    pub discriminator: Discriminator,
    pub unseen: UnseenFallback,
    pub union: UnionVariant,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            discriminator: Discriminator::default(),
            unseen: UnseenFallback::ZeroShotAndComponents,
            union: UnionVariant::Components,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub domain: usize,
    pub category: usize,
    pub name: String,
}

/// Identifies an image for caching: (dataset index, test sample index).
pub type ImageKey = (usize, usize);

pub struct Evaluator {
    enc: DualEncoder,
    templates: Vec<String>,
    train_template: String,
    pub options: InferenceOptions,
    frozen_images: HashMap<ImageKey, Arc<Vec<f64>>>,
    conditioned_images: HashMap<(usize, ImageKey), Arc<Vec<f64>>>,
    conditioned_texts: HashMap<usize, Arc<Vec<Vec<f64>>>>,
    zero_shot_texts: HashMap<String, Arc<Vec<f64>>>,
}

impl Evaluator {
    pub fn new(enc: DualEncoder, templates: Vec<String>, options: InferenceOptions) -> Self {
        Self {
            enc,
            templates,
            train_template: TRAIN_TEMPLATE.to_string(),
            options,
            frozen_images: HashMap::new(),
            conditioned_images: HashMap::new(),
            conditioned_texts: HashMap::new(),
            zero_shot_texts: HashMap::new(),
        }
    }

    pub fn with_train_template(mut self, template: &str) -> Self {
        self.train_template = template.to_string();
        self
    }

    pub fn encoder(&self) -> &DualEncoder {
        &self.enc
    }

    /// Drops every conditioned cache entry (for example after swapping pools
    /// that reuse domain indices).
    pub fn clear_conditioned(&mut self) {
        self.conditioned_images.clear();
        self.conditioned_texts.clear();
    }

    pub fn frozen_image(&mut self, key: Option<ImageKey>, image: &Tensor) -> Result<Arc<Vec<f64>>> {
        if let Some(k) = key {
            if let Some(f) = self.frozen_images.get(&k) {
                return Ok(Arc::clone(f));
            }
        }
        let f = Arc::new(self.enc.image_feature(image)?);
        if let Some(k) = key {
            self.frozen_images.insert(k, Arc::clone(&f));
        }
        Ok(f)
    }

    /// Unit-norm template-ensemble text feature of a category name.
    pub fn zero_shot_text(&mut self, name: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(f) = self.zero_shot_texts.get(name) {
            return Ok(Arc::clone(f));
        }
        let feats = template_features(&self.enc, name, &self.templates)?;
        let f = Arc::new(normalized(&mean_vec(&feats)));
        self.zero_shot_texts.insert(name.to_string(), Arc::clone(&f));
        Ok(f)
    }

    fn conditioned_text(&mut self, entry: &PoolEntry) -> Result<Arc<Vec<Vec<f64>>>> {
        let d = entry.component.domain;
        if let Some(t) = self.conditioned_texts.get(&d) {
            return Ok(Arc::clone(t));
        }
        let c = &entry.component;
        let enc = encoder_for(&self.enc, c)?;
        let mut g = Graph::new();
        let bound = c.bind(&mut g, false);
        let p = g.constant(prototype_input(c, &entry.prototypes));
        let t = text_features(&mut g, &enc, &bound, p, &c.categories, &self.train_template, c.meta.mode)?;
        g.check()?;
        let v = g.value(t);
        let rows = Arc::new((0..v.rows()).map(|i| v.row_slice(i).to_vec()).collect::<Vec<_>>());
        self.conditioned_texts.insert(d, Arc::clone(&rows));
        Ok(rows)
    }

    fn conditioned_image(&mut self, entry: &PoolEntry, key: Option<ImageKey>, image: &Tensor) -> Result<Arc<Vec<f64>>> {
        let d = entry.component.domain;
        if let Some(k) = key {
            if let Some(f) = self.conditioned_images.get(&(d, k)) {
                return Ok(Arc::clone(f));
            }
        }
        let c = &entry.component;
        let enc = encoder_for(&self.enc, c)?;
        let mut g = Graph::new();
        let bound = c.bind(&mut g, false);
        let p = g.constant(prototype_input(c, &entry.prototypes));
        let f = image_feature(&mut g, &enc, &bound, p, image, c.meta.mode)?;
        g.check()?;
        let f = Arc::new(g.value(f).data().to_vec());
        if let Some(k) = key {
            self.conditioned_images.insert((d, k), Arc::clone(&f));
        }
        Ok(f)
    }

    /// Cosine scores of `image` against every category of `entry`, both sides
    /// conditioned on that component.
    pub fn component_scores(&mut self, entry: &PoolEntry, key: Option<ImageKey>, image: &Tensor) -> Result<Vec<f64>> {
        let img = self.conditioned_image(entry, key, image)?;
        let txt = self.conditioned_text(entry)?;
        Ok(txt.iter().map(|t| dot(&img, t)).collect())
    }

    fn within(&mut self, entry: &PoolEntry, key: Option<ImageKey>, image: &Tensor) -> Result<Prediction> {
        let scores = self.component_scores(entry, key, image)?;
        let j = argmax(&scores);
        Ok(Prediction {
            domain: entry.component.domain,
            category: j,
            name: entry.component.categories[j].clone(),
        })
    }

    /// Task-ID given: classify within that domain's categories.
    pub fn classify_til(
        &mut self,
        pool: &PromptPool,
        domain: usize,
        key: Option<ImageKey>,
        image: &Tensor,
    ) -> Result<Prediction> {
        let entry = pool.entry(domain).map_err(|_| {
            Error::Contract(format!("domain {domain} has not been trained at this stage"))
        })?;
        let entry = entry.clone();
        self.within(&entry, key, image)
    }

    /// Task-ID predicted from prototypes, then classified within that
    /// domain's categories.
    pub fn classify_cil(&mut self, pool: &PromptPool, key: Option<ImageKey>, image: &Tensor) -> Result<Prediction> {
        contract!(!pool.is_empty(), "classification needs at least one trained domain");
        let f = self.frozen_image(key, image)?;
        let sets = pool.prototype_sets();
        let t = self.options.discriminator.predict(&f, &sets)?;
        let entry = pool.entries()[t.position].clone();
        self.within(&entry, key, image)
    }

    /// Scores for an untrained domain's categories: zero-shot for all, and
    /// for names already in the vocabulary the component scores of every seen
    /// domain containing them. Returns the winning index and the scores.
    pub fn unseen_scores(
        &mut self,
        pool: &PromptPool,
        categories: &[String],
        key: Option<ImageKey>,
        image: &Tensor,
    ) -> Result<(usize, Vec<f64>)> {
        contract!(!categories.is_empty(), "unseen domain has no categories");
        let f = self.frozen_image(key, image)?;
        let texts = categories
            .iter()
            .map(|c| self.zero_shot_text(c).map(|t| t.as_ref().clone()))
            .collect::<Result<Vec<_>>>()?;
        let (_, mut scores) = zero_shot_classify(&f, &texts)?;
        for (i, c) in categories.iter().enumerate() {
            let norm_name = normalize_name(c);
            let Some(domains) = pool.vocabulary().get(&norm_name).cloned() else {
                continue;
            };
            let mut best: Option<f64> = None;
            for d in domains {
                let entry = pool.entry(d)?.clone();
                let j = entry
                    .component
                    .categories
                    .iter()
                    .position(|x| normalize_name(x) == norm_name)
                    .expect("vocabulary is consistent with the pool");
                let s = self.component_scores(&entry, key, image)?[j];
                best = Some(best.map_or(s, |b: f64| b.max(s)));
            }
            if let Some(b) = best {
                scores[i] = match self.options.unseen {
                    UnseenFallback::ZeroShotAndComponents => scores[i].max(b),
                    UnseenFallback::ComponentsOnly => b,
                };
            }
        }
        Ok((argmax(&scores), scores))
    }

    pub fn classify_unseen(
        &mut self,
        pool: &PromptPool,
        categories: &[String],
        key: Option<ImageKey>,
        image: &Tensor,
    ) -> Result<usize> {
        Ok(self.unseen_scores(pool, categories, key, image)?.0)
    }

    /// Argmax over every seen (domain, category) pair.
    pub fn baseline_union(&mut self, pool: &PromptPool, key: Option<ImageKey>, image: &Tensor) -> Result<Prediction> {
        contract!(!pool.is_empty(), "classification needs at least one trained domain");
        let mut best: Option<(f64, Prediction)> = None;
        for entry in pool.entries().to_vec() {
            let scores = match self.options.union {
                UnionVariant::Components => self.component_scores(&entry, key, image)?,
                UnionVariant::ZeroShot => {
                    let f = self.frozen_image(key, image)?;
                    entry
                        .component
                        .categories
                        .iter()
                        .map(|c| self.zero_shot_text(c).map(|t| dot(&f, &t)))
                        .collect::<Result<Vec<_>>>()?
                }
            };
            for (j, &s) in scores.iter().enumerate() {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((
                        s,
                        Prediction {
                            domain: entry.component.domain,
                            category: j,
                            name: entry.component.categories[j].clone(),
                        },
                    ));
                }
            }
        }
        Ok(best.expect("non-empty pool").1)
    }

    /// Accuracy of `regime` on dataset `d` (test split) given `pool`.
    pub fn seen_accuracy(&mut self, data: &SyntheticDataset, pool: &PromptPool, d: usize, regime: Regime) -> Result<f64> {
        let domain = &data.domains[d];
        let mut correct = 0usize;
        for (i, s) in domain.test.iter().enumerate() {
            let key = Some((d, i));
            let p = match regime {
                Regime::Til => self.classify_til(pool, d, key, &s.image)?,
                Regime::Cil => self.classify_cil(pool, key, &s.image)?,
                Regime::Union => self.baseline_union(pool, key, &s.image)?,
            };
            if normalize_name(&p.name) == normalize_name(&domain.categories[s.label]) {
                correct += 1;
            }
        }
        Ok(correct as f64 / domain.test.len() as f64)
    }

    pub fn unseen_accuracy(&mut self, data: &SyntheticDataset, pool: &PromptPool, d: usize) -> Result<f64> {
        let domain = &data.domains[d];
        let mut correct = 0usize;
        for (i, s) in domain.test.iter().enumerate() {
            if self.classify_unseen(pool, &domain.categories, Some((d, i)), &s.image)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / domain.test.len() as f64)
    }

    /// Frozen zero-shot accuracy per dataset, in `order`.
    pub fn zero_shot_row(&mut self, data: &SyntheticDataset, order: &[usize]) -> Result<Vec<f64>> {
        let empty = PromptPool::new();
        order.iter().map(|&d| self.unseen_accuracy(data, &empty, d)).collect()
    }

    /// `A[u][n]` for snapshot `u` and dataset `order[n]`: seen cells use
    /// `regime`, unseen cells the unseen-domain path.
    pub fn evaluate_matrix(
        &mut self,
        data: &SyntheticDataset,
        order: &[usize],
        snapshots: &[PromptPool],
        regime: Regime,
    ) -> Result<AccuracyMatrix> {
        contract!(
            snapshots.len() == order.len(),
            "{} snapshots for {} stages",
            snapshots.len(),
            order.len()
        );
        let mut values = vec![vec![0.0; order.len()]; order.len()];
        for (u, pool) in snapshots.iter().enumerate() {
            contract!(pool.len() == u + 1, "snapshot {} holds {} components", u + 1, pool.len());
            for (n, &d) in order.iter().enumerate() {
                values[u][n] = if n <= u {
                    self.seen_accuracy(data, pool, d, regime)?
                } else {
                    self.unseen_accuracy(data, pool, d)?
                };
            }
        }
        AccuracyMatrix::new(order.iter().map(|&d| data.domains[d].name.clone()).collect(), values)
    }
}

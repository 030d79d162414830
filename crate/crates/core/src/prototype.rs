//! Per-category image, text and combined prototypes from the frozen encoders.

use std::str::FromStr;

use protoprompt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::datagen::{fill_template, DomainData};
use crate::encoder::DualEncoder;
use crate::error::{contract, Error, Result};
use crate::util::{norm, normalized};

/// Means whose norm falls below this are replaced by the first sample.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Image,
    Text,
    Combined,
}

impl FromStr for PrototypeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" | "ip" => Ok(Self::Image),
            "text" | "tp" => Ok(Self::Text),
            "combined" | "both" => Ok(Self::Combined),
            _ => Err(Error::Config(format!("unknown prototype type {s:?} (image, text, combined)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Category,
    Domain,
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "category" => Ok(Self::Category),
            "domain" => Ok(Self::Domain),
            _ => Err(Error::Config(format!("unknown prototype granularity {s:?} (category, domain)"))),
        }
    }
}

/// Where the L2 normalizations happen. All on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationFlags {
    pub features: bool,
    pub means: bool,
    pub combined: bool,
}

impl Default for NormalizationFlags {
    fn default() -> Self {
        Self {
            features: true,
            means: true,
            combined: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrototype {
    pub domain: usize,
    pub category: usize,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub combined: Vec<f64>,
    pub samples: usize,
    pub templates: usize,
}

impl CategoryPrototype {
    pub fn vector(&self, kind: PrototypeKind) -> &[f64] {
        match kind {
            PrototypeKind::Image => &self.image,
            PrototypeKind::Text => &self.text,
            PrototypeKind::Combined => &self.combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototypeSet {
    pub domain: usize,
    pub categories: Vec<String>,
    pub prototypes: Vec<CategoryPrototype>,
}

impl DomainPrototypeSet {
    pub fn new(domain: usize, categories: Vec<String>, prototypes: Vec<CategoryPrototype>) -> Result<Self> {
        contract!(!categories.is_empty(), "domain {domain} has no categories");
        contract!(
            categories.len() == prototypes.len(),
            "{} categories but {} prototypes",
            categories.len(),
            prototypes.len()
        );
        for (i, c) in categories.iter().enumerate() {
            contract!(!categories[..i].contains(c), "category {c:?} repeated in domain {domain}");
        }
        Ok(Self {
            domain,
            categories,
            prototypes,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.prototypes[0].combined.len()
    }

    pub fn vectors(&self, kind: PrototypeKind) -> Vec<&[f64]> {
        self.prototypes.iter().map(|p| p.vector(kind)).collect()
    }

    /// Unit-norm mean of the category prototypes of `kind`.
    pub fn domain_prototype(&self, kind: PrototypeKind) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = self.vectors(kind).iter().map(|v| v.to_vec()).collect();
        guarded_mean(&rows, true)
    }

    /// `S x d` matrix (or `1 x d` at domain granularity) fed to the prompt
    /// modules.
    pub fn matrix(&self, kind: PrototypeKind, granularity: Granularity) -> Tensor {
        match granularity {
            Granularity::Category => {
                let rows: Vec<Vec<f64>> = self.vectors(kind).iter().map(|v| v.to_vec()).collect();
                Tensor::from_rows(&rows)
            }
            Granularity::Domain => Tensor::from_rows(&[self.domain_prototype(kind)]),
        }
    }
}

/// Mean of `rows`, optionally renormalized. A near-zero mean falls back to
/// the first row.
fn guarded_mean(rows: &[Vec<f64>], renormalize: bool) -> Vec<f64> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if norm(&mean) < DEGENERATE_NORM {
        log::warn!("prototype mean has norm below {DEGENERATE_NORM:e}; using the first sample instead");
        return if renormalize {
            normalized(&rows[0])
        } else {
            rows[0].clone()
        };
    }
    if renormalize {
        normalized(&mean)
    } else {
        mean
    }
}

/// Mean over precomputed feature vectors, with normalization per `flags`.
pub fn prototype_from_features(features: &[Vec<f64>], flags: NormalizationFlags) -> Result<Vec<f64>> {
    contract!(!features.is_empty(), "prototype needs at least one feature");
    let rows: Vec<Vec<f64>> = if flags.features {
        features.iter().map(|f| normalized(f)).collect()
    } else {
        features.to_vec()
    };
    Ok(guarded_mean(&rows, flags.means))
}

pub fn compute_image_prototype(enc: &DualEncoder, images: &[&Tensor], flags: NormalizationFlags) -> Result<Vec<f64>> {
    contract!(!images.is_empty(), "image prototype needs at least one image");
    let feats = images
        .iter()
        .map(|img| enc.image_feature(img))
        .collect::<Result<Vec<_>>>()?;
    prototype_from_features(&feats, flags)
}

pub fn text_features(enc: &DualEncoder, category: &str, templates: &[String]) -> Result<Vec<Vec<f64>>> {
    contract!(!templates.is_empty(), "text prototype needs at least one template");
    templates
        .iter()
        .map(|t| enc.text_feature(&fill_template(t, category)?))
        .collect()
}

pub fn compute_text_prototype(
    enc: &DualEncoder,
    category: &str,
    templates: &[String],
    flags: NormalizationFlags,
) -> Result<Vec<f64>> {
    prototype_from_features(&text_features(enc, category, templates)?, flags)
}

pub fn combine(image: &[f64], text: &[f64], flags: NormalizationFlags) -> Vec<f64> {
    let sum: Vec<f64> = image.iter().zip(text).map(|(a, b)| a + b).collect();
    if flags.combined {
        guarded_mean(&[sum], true)
    } else {
        sum
    }
}

/// `image_features` holds the frozen features of the domain's training
/// images, in the order of `domain.train`.
pub fn build_from_features(
    enc: &DualEncoder,
    domain: &DomainData,
    image_features: &[Vec<f64>],
    templates: &[String],
    flags: NormalizationFlags,
) -> Result<DomainPrototypeSet> {
    contract!(domain.category_count() >= 1, "domain {} has no categories", domain.name);
    contract!(
        image_features.len() == domain.train.len(),
        "{} features for {} training images",
        image_features.len(),
        domain.train.len()
    );
    let mut prototypes = Vec::with_capacity(domain.category_count());
    for (j, name) in domain.categories.iter().enumerate() {
        let feats: Vec<Vec<f64>> = domain
            .train
            .iter()
            .zip(image_features)
            .filter(|(s, _)| s.label == j)
            .map(|(_, f)| f.clone())
            .collect();
        contract!(!feats.is_empty(), "category {name:?} of {} has no training images", domain.name);
        let image = prototype_from_features(&feats, flags)?;
        let text = compute_text_prototype(enc, name, templates, flags)?;
        let combined = combine(&image, &text, flags);
        prototypes.push(CategoryPrototype {
            domain: domain.index,
            category: j,
            image,
            text,
            combined,
            samples: feats.len(),
            templates: templates.len(),
        });
    }
    DomainPrototypeSet::new(domain.index, domain.categories.clone(), prototypes)
}

pub fn build_domain_prototypes(
    enc: &DualEncoder,
    domain: &DomainData,
    templates: &[String],
    flags: NormalizationFlags,
) -> Result<DomainPrototypeSet> {
    let feats = domain
        .train
        .iter()
        .map(|s| enc.image_feature(&s.image))
        .collect::<Result<Vec<_>>>()?;
    build_from_features(enc, domain, &feats, templates, flags)
}

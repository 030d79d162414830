//! Contrastive alignment of the frozen towers on the pretext domain.
//!
//! Only the two output projections are trained. Tower states before the
//! projection are computed once, so each step is a pair of small matmuls.

use protoprompt_autodiff::{Adam, AdamConfig, Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::{fill_template, DomainData};
use crate::encoder::{DualEncoder, FrozenWeights};
use crate::error::{contract, Error, Result};
use crate::util::{argmax, dot, normalized, rng_stream};
use rand::Rng;
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Steps after which the loss must have dropped below its initial value.
    pub warmup: usize,
    /// Set from the run seed, not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 64,
            lr: 1e-2,
            temperature: 0.07,
            warmup: 50,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.batch_size >= 1, "batch size must be positive");
        contract!(
            self.lr > 0.0 && self.lr.is_finite() && self.temperature > 0.0 && self.temperature.is_finite(),
            "lr and temperature must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Zero-shot accuracy on held-out pretext images, template ensemble.
    pub heldout_accuracy: f64,
    pub chance: f64,
}

fn text_states(enc: &DualEncoder, categories: &[String], templates: &[String]) -> Result<Vec<Vec<Tensor>>> {
    templates
        .iter()
        .map(|t| {
            categories
                .iter()
                .map(|c| {
                    let tokens = enc.tokenize(&fill_template(t, c)?);
                    let mut g = Graph::new();
                    let h = enc.encode_text_hidden(&mut g, &tokens, None, None)?;
                    g.check()?;
                    Ok(g.value(h).clone())
                })
                .collect()
        })
        .collect()
}

fn image_state(enc: &DualEncoder, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (h, _) = enc.encode_image_hidden(&mut g, image, None, None)?;
    g.check()?;
    Ok(g.value(h).clone())
}

fn stack_rows(rows: &[&Tensor]) -> Tensor {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), cols, data)
}

/// Trains the output projections of `weights` on `pretext`. Zero steps
/// returns the weights unchanged.
pub fn pretrain_encoders(
    weights: FrozenWeights,
    pretext: &DomainData,
    templates: &[String],
    config: &PretrainConfig,
) -> Result<(FrozenWeights, PretrainReport)> {
    contract!(!templates.is_empty(), "pretraining needs at least one template");
    config.validate()?;
    let enc = DualEncoder::new(weights);
    let cats = &pretext.categories;
    let texts = text_states(&enc, cats, templates)?;
    let train: Vec<Tensor> = pretext
        .train
        .iter()
        .map(|s| image_state(&enc, &s.image))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = pretext.train.iter().map(|s| s.label).collect();
    let test: Vec<Tensor> = pretext
        .test
        .iter()
        .map(|s| image_state(&enc, &s.image))
        .collect::<Result<_>>()?;

    let mut weights = enc.weights().clone();
    let mut w_text = weights.text.proj.as_ref().clone();
    let mut w_image = weights.image.proj.as_ref().clone();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &[&w_text, &w_image],
    );
    let mut rng = rng_stream(config.seed, "pretrain");
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let window = config.warmup.clamp(1, 20);
    let mut early = Vec::new();
    let mut recent = Vec::new();
    for step in 0..config.steps {
        let batch: Vec<usize> = (0..config.batch_size.min(train.len()))
            .map(|_| rng.random_range(0..train.len()))
            .collect();
        let template = rng.random_range(0..templates.len());
        let img = stack_rows(&batch.iter().map(|&i| &train[i]).collect::<Vec<_>>());
        let txt = stack_rows(&texts[template].iter().collect::<Vec<_>>());
        let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

        let mut g = Graph::new();
        let wt = g.param(w_text.clone());
        let wi = g.param(w_image.clone());
        let xi = g.constant(img);
        let xt = g.constant(txt);
        let fi = g.matmul(xi, wi);
        let fi = g.l2_normalize_rows(fi);
        let ft = g.matmul(xt, wt);
        let ft = g.l2_normalize_rows(ft);
        let logits = g.matmul_nt(fi, ft);
        let logits = g.scale(logits, 1.0 / config.temperature);
        let loss = g.cross_entropy(logits, &targets);
        let grads = g.backward(loss).map_err(|e| Error::Numerical(format!("pretraining step {step}: {e}")))?;
        let l = g.value(loss).item();
        if step < window {
            early.push(l);
        }
        recent.push(l);
        if recent.len() > window {
            recent.remove(0);
        }
        let gt = grads.get_or_zeros(wt, w_text.shape());
        let gi = grads.get_or_zeros(wi, w_image.shape());
        adam.step(&mut [&mut w_text, &mut w_image], &[&gt, &gi])?;
        initial_loss = early.iter().sum::<f64>() / early.len() as f64;
        final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
        if step + 1 == config.warmup.max(window) && step + 1 < config.steps && final_loss > initial_loss {
            return Err(Error::Numerical(format!(
                "pretraining diverged: loss {final_loss:.4} after {} steps exceeds initial {initial_loss:.4}",
                step + 1
            )));
        }
    }
    if config.steps > 0 && final_loss > initial_loss {
        return Err(Error::Numerical(format!(
            "pretraining diverged: final loss {final_loss:.4} exceeds initial {initial_loss:.4}"
        )));
    }
    weights.text.proj = Arc::new(w_text);
    weights.image.proj = Arc::new(w_image);

    let ensemble: Vec<Vec<f64>> = (0..cats.len())
        .map(|c| {
            let mut sum = vec![0.0; weights.config.embed_dim];
            for per_template in &texts {
                let f = normalized(per_template[c].matmul(&weights.text.proj).data());
                sum.iter_mut().zip(&f).for_each(|(s, v)| *s += v);
            }
            normalized(&sum)
        })
        .collect();
    let correct = test
        .iter()
        .zip(&pretext.test)
        .filter(|(h, s)| {
            let f = normalized(h.matmul(&weights.image.proj).data());
            let scores: Vec<f64> = ensemble.iter().map(|t| dot(&f, t)).collect();
            argmax(&scores) == s.label
        })
        .count();
    let report = PretrainReport {
        initial_loss,
        final_loss,
        heldout_accuracy: correct as f64 / test.len() as f64,
        chance: 1.0 / cats.len() as f64,
    };
    log::info!(
        "pretraining: loss {:.4} -> {:.4}, held-out zero-shot {:.3} (chance {:.3})",
        report.initial_loss,
        report.final_loss,
        report.heldout_accuracy,
        report.chance
    );
    Ok((weights, report))
}

//! Trainable per-domain prompt components and the append-only prompt pool.
//!
//! A component holds the text general prompt, one image general prompt per
//! layer before the replacement depth, and two single-head attention blocks:
//! text self-attention over the domain prototypes (one output row per
//! category) and image cross-attention from the class token to the
//! prototypes (one instance prompt per image).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use protoprompt_autodiff::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{encode_tensors, Container};
use crate::error::{contract, Error, Result};
use crate::prototype::{CategoryPrototype, DomainPrototypeSet, Granularity, PrototypeKind};
use crate::util::{gaussian_tensor, hex, rng_stream};

pub const POOL_MAGIC: [u8; 8] = *b"PPPROMPT";
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockMode {
    /// Layer norm before attention and feed-forward, residual around both.
    PreNorm,
    /// Feed-forward applied directly to the attention output.
    Plain,
}

impl FromStr for BlockMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre-norm" | "prenorm" | "residual" => Ok(Self::PreNorm),
            "plain" => Ok(Self::Plain),
            _ => Err(Error::Config(format!("unknown block mode {s:?} (pre-norm, plain)"))),
        }
    }
}

/// Single-head attention block followed by a 4x GELU feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub ln_query_gamma: Tensor,
    pub ln_query_beta: Tensor,
    pub ln_context_gamma: Tensor,
    pub ln_context_beta: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ln_ff_gamma: Tensor,
    pub ln_ff_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

const ATTENTION_FIELDS: [&str; 13] = [
    "ln_query_gamma",
    "ln_query_beta",
    "ln_context_gamma",
    "ln_context_beta",
    "w_q",
    "w_k",
    "w_v",
    "ln_ff_gamma",
    "ln_ff_beta",
    "w_ff1",
    "b_ff1",
    "w_ff2",
    "b_ff2",
];

impl AttentionWeights {
    /// Gaussian projections; the last feed-forward layer starts at zero.
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            ln_query_gamma: Tensor::filled(&[1, d], 1.0),
            ln_query_beta: Tensor::zeros(&[1, d]),
            ln_context_gamma: Tensor::filled(&[1, d], 1.0),
            ln_context_beta: Tensor::zeros(&[1, d]),
            w_q: gaussian_tensor(rng, &[d, d], INIT_STD),
            w_k: gaussian_tensor(rng, &[d, d], INIT_STD),
            w_v: gaussian_tensor(rng, &[d, d], INIT_STD),
            ln_ff_gamma: Tensor::filled(&[1, d], 1.0),
            ln_ff_beta: Tensor::zeros(&[1, d]),
            w_ff1: gaussian_tensor(rng, &[d, 4 * d], INIT_STD),
            b_ff1: Tensor::zeros(&[1, 4 * d]),
            w_ff2: Tensor::zeros(&[4 * d, d]),
            b_ff2: Tensor::zeros(&[1, d]),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn fields(&self) -> [&Tensor; 13] {
        [
            &self.ln_query_gamma,
            &self.ln_query_beta,
            &self.ln_context_gamma,
            &self.ln_context_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.ln_ff_gamma,
            &self.ln_ff_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 13] {
        [
            &mut self.ln_query_gamma,
            &mut self.ln_query_beta,
            &mut self.ln_context_gamma,
            &mut self.ln_context_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.ln_ff_gamma,
            &mut self.ln_ff_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }

    fn from_map(prefix: &str, map: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |f: &str| {
            let name = format!("{prefix}.{f}");
            map.remove(&name)
                .ok_or_else(|| Error::Format(format!("missing component tensor {name}")))
        };
        Ok(Self {
            ln_query_gamma: take("ln_query_gamma")?,
            ln_query_beta: take("ln_query_beta")?,
            ln_context_gamma: take("ln_context_gamma")?,
            ln_context_beta: take("ln_context_beta")?,
            w_q: take("w_q")?,
            w_k: take("w_k")?,
            w_v: take("w_v")?,
            ln_ff_gamma: take("ln_ff_gamma")?,
            ln_ff_beta: take("ln_ff_beta")?,
            w_ff1: take("w_ff1")?,
            b_ff1: take("b_ff1")?,
            w_ff2: take("w_ff2")?,
            b_ff2: take("b_ff2")?,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAttention {
        BoundAttention::from_vars(self.fields().map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        }))
    }
}

/// [`AttentionWeights`] placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub ln_query: (Var, Var),
    pub ln_context: (Var, Var),
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub ln_ff: (Var, Var),
    pub ff1: (Var, Var),
    pub ff2: (Var, Var),
}

impl BoundAttention {
    /// Inverse of [`BoundAttention::vars`].
    pub fn from_vars(v: [Var; 13]) -> Self {
        Self {
            ln_query: (v[0], v[1]),
            ln_context: (v[2], v[3]),
            w_q: v[4],
            w_k: v[5],
            w_v: v[6],
            ln_ff: (v[7], v[8]),
            ff1: (v[9], v[10]),
            ff2: (v[11], v[12]),
        }
    }

    pub fn vars(&self) -> [Var; 13] {
        [
            self.ln_query.0,
            self.ln_query.1,
            self.ln_context.0,
            self.ln_context.1,
            self.w_q,
            self.w_k,
            self.w_v,
            self.ln_ff.0,
            self.ln_ff.1,
            self.ff1.0,
            self.ff1.1,
            self.ff2.0,
            self.ff2.1,
        ]
    }

    /// `softmax(q W_q (c W_k)^T / sqrt(d)) c W_v`, with `q` and `c` layer
    /// normalized first in pre-norm mode.
    pub fn attention(&self, g: &mut Graph, query: Var, context: Var, mode: BlockMode) -> Var {
        let (q_in, c_in) = match mode {
            BlockMode::PreNorm => (
                g.layer_norm(query, self.ln_query.0, self.ln_query.1),
                g.layer_norm(context, self.ln_context.0, self.ln_context.1),
            ),
            BlockMode::Plain => (query, context),
        };
        let d = g.value(self.w_q).rows() as f64;
        let q = g.matmul(q_in, self.w_q);
        let k = g.matmul(c_in, self.w_k);
        let v = g.matmul(c_in, self.w_v);
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, 1.0 / d.sqrt());
        let a = g.softmax_rows(s);
        g.matmul(a, v)
    }

    fn ffd(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.ff1.0);
        let h = g.add_row(h, self.ff1.1);
        let h = g.gelu(h);
        let o = g.matmul(h, self.ff2.0);
        g.add_row(o, self.ff2.1)
    }

    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, mode: BlockMode) -> Var {
        let a = self.attention(g, query, context, mode);
        match mode {
            BlockMode::PreNorm => {
                let x = g.add(query, a);
                let h = g.layer_norm(x, self.ln_ff.0, self.ln_ff.1);
                let f = self.ffd(g, h);
                g.add(x, f)
            }
            BlockMode::Plain => self.ffd(g, a),
        }
    }
}

fn check_width(g: &Graph, v: Var, d: usize, what: &str) -> Result<()> {
    let t = g.value(v);
    contract!(
        t.rows() >= 1 && t.cols() == d,
        "{what} has shape {:?}, expected [S >= 1, {d}]",
        t.shape()
    );
    Ok(())
}

/// Text self-attention: one domain prior prompt row per prototype row.
pub fn tsa_forward(
    g: &mut Graph,
    prototypes: Var,
    weights: &BoundAttention,
    mode: BlockMode,
) -> Result<Var> {
    let d = g.value(weights.w_q).rows();
    check_width(g, prototypes, d, "prototype matrix")?;
    Ok(weights.forward(g, prototypes, prototypes, mode))
}

/// Image cross-attention from the class token to the prototypes.
pub fn ica_forward(
    g: &mut Graph,
    cls: Var,
    prototypes: Var,
    weights: &BoundAttention,
    mode: BlockMode,
) -> Result<Var> {
    let d = g.value(weights.w_q).rows();
    check_width(g, prototypes, g.value(weights.w_k).rows(), "prototype matrix")?;
    contract!(
        g.value(cls).dims() == (1, d),
        "class token has shape {:?}, expected [1, {d}]",
        g.value(cls).shape()
    );
    Ok(weights.forward(g, cls, prototypes, mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentMeta {
    pub epochs: usize,
    pub seed: u64,
    pub mode: BlockMode,
    pub replace_depth: usize,
    pub prompt_len: usize,
    pub prototype_kind: PrototypeKind,
    pub granularity: Granularity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainComponent {
    pub domain: usize,
    pub name: String,
    pub categories: Vec<String>,
    /// `prompt_len x d`.
    pub general_text: Tensor,
    /// One `prompt_len x d` prompt per layer before the replacement depth.
    pub general_image: Vec<Tensor>,
    pub tsa: AttentionWeights,
    pub ica: AttentionWeights,
    pub meta: ComponentMeta,
}

/// A component placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundComponent {
    pub general_text: Var,
    pub general_image: Vec<Var>,
    pub tsa: BoundAttention,
    pub ica: BoundAttention,
}

impl BoundComponent {
    /// Every parameter variable, in [`DomainComponent::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.general_text];
        v.extend(&self.general_image);
        v.extend(self.tsa.vars());
        v.extend(self.ica.vars());
        v
    }

    /// Inverse of [`BoundComponent::vars`] for a component with
    /// `general_image_layers` image prompts.
    pub fn from_vars(vars: &[Var], general_image_layers: usize) -> Result<Self> {
        let n = 1 + general_image_layers;
        contract!(vars.len() == n + 26, "expected {} component vars, got {}", n + 26, vars.len());
        let block = |s: &[Var]| BoundAttention::from_vars(s.try_into().expect("13 vars"));
        Ok(Self {
            general_text: vars[0],
            general_image: vars[1..n].to_vec(),
            tsa: block(&vars[n..n + 13]),
            ica: block(&vars[n + 13..]),
        })
    }
}

impl DomainComponent {
    pub fn init(
        domain: usize,
        name: &str,
        categories: Vec<String>,
        width: usize,
        meta: ComponentMeta,
    ) -> Result<Self> {
        contract!(meta.replace_depth >= 1, "replacement depth must be at least 1");
        contract!(meta.prompt_len >= 1, "prompt length must be at least 1");
        contract!(!categories.is_empty(), "component needs at least one category");
        let mut rng = rng_stream(meta.seed, &format!("component-{domain}"));
        let general_text = gaussian_tensor(&mut rng, &[meta.prompt_len, width], INIT_STD);
        let general_image = (1..meta.replace_depth)
            .map(|_| gaussian_tensor(&mut rng, &[meta.prompt_len, width], INIT_STD))
            .collect();
        let tsa = AttentionWeights::init(&mut rng, width);
        let ica = AttentionWeights::init(&mut rng, width);
        Ok(Self {
            domain,
            name: name.to_string(),
            categories,
            general_text,
            general_image,
            tsa,
            ica,
            meta,
        })
    }

    pub fn width(&self) -> usize {
        self.general_text.cols()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("general_text".to_string(), &self.general_text)];
        for (i, t) in self.general_image.iter().enumerate() {
            out.push((format!("general_image.{i}"), t));
        }
        for (prefix, w) in [("tsa", &self.tsa), ("ica", &self.ica)] {
            for (f, t) in ATTENTION_FIELDS.iter().zip(w.fields()) {
                out.push((format!("{prefix}.{f}"), t));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.general_text];
        v.extend(self.general_image.iter_mut());
        v.extend(self.tsa.fields_mut());
        v.extend(self.ica.fields_mut());
        v
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundComponent {
        let mk = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundComponent {
            general_text: mk(g, &self.general_text),
            general_image: self.general_image.iter().map(|t| mk(g, t)).collect(),
            tsa: self.tsa.bind(g, trainable),
            ica: self.ica.bind(g, trainable),
        }
    }

    fn tensor_bytes(&self) -> Vec<u8> {
        encode_tensors(&self.named_tensors())
    }

    /// SHA-256 over metadata and every tensor.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.to_le_bytes());
        h.update(self.name.as_bytes());
        for c in &self.categories {
            h.update([0u8]);
            h.update(c.as_bytes());
        }
        h.update(serde_json::to_vec(&self.meta).expect("component metadata serializes"));
        h.update(self.tensor_bytes());
        hex(&h.finalize())
    }
}

/// Lowercased, trimmed category name used for vocabulary matching.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub component: Arc<DomainComponent>,
    pub prototypes: Arc<DomainPrototypeSet>,
    pub hash: String,
}

/// Components in training order plus the category-name vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptPool {
    entries: Vec<PoolEntry>,
    vocabulary: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    domains: Vec<ManifestEntry>,
    vocabulary: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    domain: usize,
    name: String,
    categories: Vec<String>,
    meta: ComponentMeta,
    hash: String,
    general_image_layers: usize,
    prototype_samples: Vec<usize>,
    prototype_templates: Vec<usize>,
}

impl PromptPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn domains(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.component.domain).collect()
    }

    pub fn contains(&self, domain: usize) -> bool {
        self.entries.iter().any(|e| e.component.domain == domain)
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.vocabulary
    }

    /// Prototype sets in training order.
    pub fn prototype_sets(&self) -> Vec<&DomainPrototypeSet> {
        self.entries.iter().map(|e| e.prototypes.as_ref()).collect()
    }

    pub fn save_component(&mut self, component: DomainComponent, prototypes: DomainPrototypeSet) -> Result<()> {
        contract!(
            !self.contains(component.domain),
            "domain {} is already in the pool",
            component.domain
        );
        contract!(
            component.categories == prototypes.categories && component.domain == prototypes.domain,
            "component and prototype set disagree on domain {}",
            component.domain
        );
        for c in &component.categories {
            let list = self.vocabulary.entry(normalize_name(c)).or_default();
            if !list.contains(&component.domain) {
                list.push(component.domain);
            }
        }
        let hash = component.hash();
        self.entries.push(PoolEntry {
            component: Arc::new(component),
            prototypes: Arc::new(prototypes),
            hash,
        });
        Ok(())
    }

    pub fn entry(&self, domain: usize) -> Result<&PoolEntry> {
        self.entries
            .iter()
            .find(|e| e.component.domain == domain)
            .ok_or_else(|| Error::NotFound(format!("domain {domain} is not in the prompt pool")))
    }

    pub fn load_component(&self, domain: usize) -> Result<Arc<DomainComponent>> {
        let e = self.entry(domain)?;
        let now = e.component.hash();
        contract!(now == e.hash, "component {domain} changed after it was saved");
        Ok(Arc::clone(&e.component))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(POOL_MAGIC);
        let manifest = PoolManifest {
            domains: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    domain: e.component.domain,
                    name: e.component.name.clone(),
                    categories: e.component.categories.clone(),
                    meta: e.component.meta.clone(),
                    hash: e.hash.clone(),
                    general_image_layers: e.component.general_image.len(),
                    prototype_samples: e.prototypes.prototypes.iter().map(|p| p.samples).collect(),
                    prototype_templates: e.prototypes.prototypes.iter().map(|p| p.templates).collect(),
                })
                .collect(),
            vocabulary: self.vocabulary.clone(),
        };
        c.push_json(b"MANI", "manifest", &manifest)?;
        for e in &self.entries {
            let name = format!("domain-{}", e.component.domain);
            c.push(b"COMP", name.clone(), e.component.tensor_bytes());
            let p = &e.prototypes;
            let rows = |k: PrototypeKind| Tensor::from_rows(&p.vectors(k).iter().map(|v| v.to_vec()).collect::<Vec<_>>());
            let (i, t, b) = (rows(PrototypeKind::Image), rows(PrototypeKind::Text), rows(PrototypeKind::Combined));
            c.push_tensors(
                b"PROT",
                &name,
                &[("image".into(), &i), ("text".into(), &t), ("combined".into(), &b)],
            );
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let manifest: PoolManifest = c.json(b"MANI", "manifest")?;
        let mut pool = PromptPool::new();
        for m in manifest.domains {
            let name = format!("domain-{}", m.domain);
            let mut tensors = crate::container::decode_tensors(&c.require(b"COMP", &name)?.payload)?;
            let general_text = tensors
                .remove("general_text")
                .ok_or_else(|| Error::Format(format!("{name}: missing general_text")))?;
            let general_image = (0..m.general_image_layers)
                .map(|i| {
                    tensors
                        .remove(&format!("general_image.{i}"))
                        .ok_or_else(|| Error::Format(format!("{name}: missing general_image.{i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let tsa = AttentionWeights::from_map("tsa", &mut tensors)?;
            let ica = AttentionWeights::from_map("ica", &mut tensors)?;
            let component = DomainComponent {
                domain: m.domain,
                name: m.name,
                categories: m.categories.clone(),
                general_text,
                general_image,
                tsa,
                ica,
                meta: m.meta,
            };
            if component.hash() != m.hash {
                return Err(Error::Format(format!("{name}: component hash mismatch")));
            }
            let mut pt = c.tensors(b"PROT", &name)?;
            let mut take = |k: &str| {
                pt.remove(k)
                    .ok_or_else(|| Error::Format(format!("{name}: missing {k} prototypes")))
            };
            let (img, txt, comb) = (take("image")?, take("text")?, take("combined")?);
            let prototypes = (0..m.categories.len())
                .map(|j| {
                    Ok(CategoryPrototype {
                        domain: m.domain,
                        category: j,
                        image: img.row_slice(j).to_vec(),
                        text: txt.row_slice(j).to_vec(),
                        combined: comb.row_slice(j).to_vec(),
                        samples: *m.prototype_samples.get(j).ok_or_else(|| Error::Format("sample counts".into()))?,
                        templates: *m
                            .prototype_templates
                            .get(j)
                            .ok_or_else(|| Error::Format("template counts".into()))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let set = DomainPrototypeSet::new(m.domain, m.categories, prototypes)?;
            pool.save_component(component, set)?;
        }
        if pool.vocabulary != manifest.vocabulary {
            return Err(Error::Format("pool vocabulary disagrees with its components".into()));
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, &POOL_MAGIC)?)
    }

    /// `category,domains` with domain indices joined by `;`.
    pub fn vocabulary_csv(&self) -> String {
        let mut out = String::from("category,domains\n");
        for (name, domains) in &self.vocabulary {
            let list: Vec<String> = domains.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{name},{}\n", list.join(";")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ComponentMeta {
        ComponentMeta {
            epochs: 1,
            seed: 5,
            mode: BlockMode::PreNorm,
            replace_depth: 4,
            prompt_len: 1,
            prototype_kind: PrototypeKind::Combined,
            granularity: Granularity::Category,
        }
    }

    fn weights_plain(seed: u64, d: usize) -> AttentionWeights {
        let mut rng = rng_stream(seed, "attn");
        let mut w = AttentionWeights::init(&mut rng, d);
        w.w_ff2 = gaussian_tensor(&mut rng, &[4 * d, d], 0.1);
        w
    }

    #[test]
    fn single_row_attention_is_value_projection() {
        let d = 8;
        let w = weights_plain(1, d);
        let p = gaussian_tensor(&mut rng_stream(2, "p"), &[1, d], 1.0);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let pv = g.constant(p.clone());
        let a = b.attention(&mut g, pv, pv, BlockMode::Plain);
        assert_eq!(g.value(a), &p.matmul(&w.w_v));
    }

    #[test]
    fn zero_value_projection_gives_zero_instance_prompt() {
        let d = 8;
        let mut w = weights_plain(1, d);
        w.w_v = Tensor::zeros(&[d, d]);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let cls = g.constant(gaussian_tensor(&mut rng_stream(3, "c"), &[1, d], 1.0));
        let p = g.constant(gaussian_tensor(&mut rng_stream(4, "p"), &[3, d], 1.0));
        let e = ica_forward(&mut g, cls, p, &b, BlockMode::Plain).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tsa_shape_mismatch_is_contract_violation() {
        let w = weights_plain(1, 8);
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let p = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(tsa_forward(&mut g, p, &b, BlockMode::PreNorm), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_save_and_missing_load() {
        let cats = vec!["kalo".to_string()];
        let c = DomainComponent::init(0, "d", cats.clone(), 8, meta()).unwrap();
        let p = CategoryPrototype {
            domain: 0,
            category: 0,
            image: vec![1.0; 8],
            text: vec![1.0; 8],
            combined: vec![1.0; 8],
            samples: 1,
            templates: 1,
        };
        let set = DomainPrototypeSet::new(0, cats, vec![p]).unwrap();
        let mut pool = PromptPool::new();
        pool.save_component(c.clone(), set.clone()).unwrap();
        assert!(matches!(pool.save_component(c, set), Err(Error::Contract(_))));
        assert!(matches!(pool.load_component(3), Err(Error::NotFound(_))));
    }

    #[test]
    fn component_param_order_matches_bound_vars() {
        let c = DomainComponent::init(0, "d", vec!["a".into()], 8, meta()).unwrap();
        let mut g = Graph::new();
        let b = c.bind(&mut g, true);
        let vars = b.vars();
        let params = c.params();
        assert_eq!(vars.len(), params.len());
        for (v, p) in vars.iter().zip(params) {
            assert_eq!(g.value(*v), p);
        }
        assert_eq!(c.general_image.len(), 3);
    }
}

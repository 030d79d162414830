//! Frozen CLIP-style dual encoder with prompt slots.
//!
//! Both towers are pre-norm transformers with bidirectional attention. Prompt
//! tokens always occupy the tail of the sequence:
//!
//! * text: the general prompt is appended before layer 1 and carried through
//!   the stack; the domain prior prompt replaces the first prompt slot before
//!   layer `h` (replacement depth).
//! * image: a fresh general prompt occupies the prompt slots before each of
//!   layers `1..h-1`; before layer `h` the class token is handed to an
//!   instance prompt provider whose output replaces the first prompt slot.
//!
//! Text features pool the last content token, image features pool the class
//! token; prompt tokens never enter pooling. Both are projected into a shared
//! space and L2-normalized.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use protoprompt_autodiff::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{contract, Error, Result};
use crate::util::{self, gaussian_tensor, rng_stream};

pub const ENCODER_MAGIC: [u8; 8] = *b"PPENCODR";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Width of the shared projected feature space.
    pub embed_dim: usize,
    /// Maximum number of content tokens for text.
    pub text_budget: usize,
    /// Side of the square patch grid.
    pub grid: usize,
    pub patch_dim: usize,
    /// Layer (1-based) at which domain prior prompts replace the prompt slot.
    pub replace_depth: usize,
    pub prompt_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 64,
            heads: 4,
            embed_dim: 64,
            text_budget: 16,
            grid: 4,
            patch_dim: 8,
            replace_depth: 4,
            prompt_len: 1,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.layers >= 1, "encoder needs at least one layer");
        contract!(
            (1..=self.layers).contains(&self.replace_depth),
            "replacement depth {} outside 1..={}",
            self.replace_depth,
            self.layers
        );
        contract!(self.prompt_len >= 1, "prompt length must be at least 1");
        contract!(
            self.heads >= 1 && self.width.is_multiple_of(self.heads),
            "width {} not divisible by {} heads",
            self.width,
            self.heads
        );
        contract!(self.text_budget >= 1 && self.grid >= 1 && self.patch_dim >= 1, "empty token budget");
        Ok(())
    }
}

/// Whitespace word-level tokenizer over a fixed word list. Id 0 is `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut all = vec![UNK_TOKEN.to_string()];
        for w in words {
            let w = w.trim().to_lowercase();
            if !w.is_empty() && !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Arc<Tensor>,
    pub ln1_beta: Arc<Tensor>,
    pub w_q: Arc<Tensor>,
    pub b_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub b_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub b_v: Arc<Tensor>,
    pub w_o: Arc<Tensor>,
    pub b_o: Arc<Tensor>,
    pub ln2_gamma: Arc<Tensor>,
    pub ln2_beta: Arc<Tensor>,
    pub w_ff1: Arc<Tensor>,
    pub b_ff1: Arc<Tensor>,
    pub w_ff2: Arc<Tensor>,
    pub b_ff2: Arc<Tensor>,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gamma", "ln1_beta", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_gamma",
    "ln2_beta", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
];

impl LayerWeights {
    fn random(rng: &mut ChaCha8Rng, d: usize, layers: usize) -> Self {
        let a = |t: Tensor| Arc::new(t);
        let attn_std = 1.0 / (d as f64).sqrt();
        let out_std = attn_std / (2.0 * layers as f64).sqrt();
        let ff_std = 1.0 / (4.0 * d as f64).sqrt() / (2.0 * layers as f64).sqrt();
        Self {
            ln1_gamma: a(Tensor::filled(&[1, d], 1.0)),
            ln1_beta: a(Tensor::zeros(&[1, d])),
            w_q: a(gaussian_tensor(rng, &[d, d], attn_std)),
            b_q: a(Tensor::zeros(&[1, d])),
            w_k: a(gaussian_tensor(rng, &[d, d], attn_std)),
            b_k: a(Tensor::zeros(&[1, d])),
            w_v: a(gaussian_tensor(rng, &[d, d], attn_std)),
            b_v: a(Tensor::zeros(&[1, d])),
            w_o: a(gaussian_tensor(rng, &[d, d], out_std)),
            b_o: a(Tensor::zeros(&[1, d])),
            ln2_gamma: a(Tensor::filled(&[1, d], 1.0)),
            ln2_beta: a(Tensor::zeros(&[1, d])),
            w_ff1: a(gaussian_tensor(rng, &[d, 4 * d], attn_std)),
            b_ff1: a(Tensor::zeros(&[1, 4 * d])),
            w_ff2: a(gaussian_tensor(rng, &[4 * d, d], ff_std)),
            b_ff2: a(Tensor::zeros(&[1, d])),
        }
    }

    fn fields(&self) -> [&Arc<Tensor>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn from_fields(mut take: impl FnMut(&str) -> Result<Arc<Tensor>>) -> Result<Self> {
        Ok(Self {
            ln1_gamma: take("ln1_gamma")?,
            ln1_beta: take("ln1_beta")?,
            w_q: take("w_q")?,
            b_q: take("b_q")?,
            w_k: take("w_k")?,
            b_k: take("b_k")?,
            w_v: take("w_v")?,
            b_v: take("b_v")?,
            w_o: take("w_o")?,
            b_o: take("b_o")?,
            ln2_gamma: take("ln2_gamma")?,
            ln2_beta: take("ln2_beta")?,
            w_ff1: take("w_ff1")?,
            b_ff1: take("b_ff1")?,
            w_ff2: take("w_ff2")?,
            b_ff2: take("b_ff2")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    /// Text: token table. Image: patch projection.
    pub embed: Arc<Tensor>,
    /// Image only: patch projection bias. Text keeps a zero row.
    pub embed_bias: Arc<Tensor>,
    /// Image only: class token.
    pub cls: Arc<Tensor>,
    pub pos: Arc<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub ln_final_gamma: Arc<Tensor>,
    pub ln_final_beta: Arc<Tensor>,
    pub proj: Arc<Tensor>,
}

impl Tower {
    fn named(&self, prefix: &str) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = vec![
            (format!("{prefix}.embed"), &self.embed),
            (format!("{prefix}.embed_bias"), &self.embed_bias),
            (format!("{prefix}.cls"), &self.cls),
            (format!("{prefix}.pos"), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("{prefix}.layer{i}.{name}"), t));
            }
        }
        out.push((format!("{prefix}.ln_final_gamma"), &self.ln_final_gamma));
        out.push((format!("{prefix}.ln_final_beta"), &self.ln_final_beta));
        out.push((format!("{prefix}.proj"), &self.proj));
        out
    }

    fn from_named(prefix: &str, layers: usize, map: &mut HashMap<String, Tensor>) -> Result<Self> {
        let mut take = |name: String| -> Result<Arc<Tensor>> {
            map.remove(&name)
                .map(Arc::new)
                .ok_or_else(|| Error::Format(format!("missing weight {name}")))
        };
        let embed = take(format!("{prefix}.embed"))?;
        let embed_bias = take(format!("{prefix}.embed_bias"))?;
        let cls = take(format!("{prefix}.cls"))?;
        let pos = take(format!("{prefix}.pos"))?;
        let mut ls = Vec::with_capacity(layers);
        for i in 0..layers {
            ls.push(LayerWeights::from_fields(|f| take(format!("{prefix}.layer{i}.{f}")))?);
        }
        Ok(Self {
            embed,
            embed_bias,
            cls,
            pos,
            layers: ls,
            ln_final_gamma: take(format!("{prefix}.ln_final_gamma"))?,
            ln_final_beta: take(format!("{prefix}.ln_final_beta"))?,
            proj: take(format!("{prefix}.proj"))?,
        })
    }
}

/// All frozen encoder state. Never receives gradients during continual
/// training; [`FrozenWeights::checksum`] pins it.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenWeights {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub text: Tower,
    pub image: Tower,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    config: EncoderConfig,
    vocab: Vec<String>,
}

impl FrozenWeights {
    /// Random initialization. Each lexicon entry pairs a word with a semantic
    /// code in the generator's latent space; token embeddings are a fixed
    /// random lift of those codes, so words the text tower has never been
    /// trained on still carry meaning.
    pub fn initialize(config: &EncoderConfig, lexicon: &[(String, Vec<f64>)], seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let k = config.patch_dim;
        let vocab = Vocabulary::new(lexicon.iter().map(|(w, _)| w.clone()));
        let mut rng = rng_stream(seed, "encoder-init");
        let lift = gaussian_tensor(&mut rng, &[k, d], 1.0 / (k as f64).sqrt());
        let mut codes = vec![vec![0.0; k]; vocab.len()];
        for (w, code) in lexicon {
            contract!(code.len() == k, "lexicon code for {w} has width {}", code.len());
            let id = vocab.id(&w.trim().to_lowercase()).unwrap();
            codes[id] = code.clone();
        }
        let table = Tensor::from_rows(&codes).matmul(&lift);

        let text_layers = (0..config.layers)
            .map(|_| LayerWeights::random(&mut rng, d, config.layers))
            .collect();
        let text = Tower {
            embed: Arc::new(table),
            embed_bias: Arc::new(Tensor::zeros(&[1, d])),
            cls: Arc::new(Tensor::zeros(&[1, d])),
            pos: Arc::new(gaussian_tensor(&mut rng, &[config.text_budget, d], 0.1)),
            layers: text_layers,
            ln_final_gamma: Arc::new(Tensor::filled(&[1, d], 1.0)),
            ln_final_beta: Arc::new(Tensor::zeros(&[1, d])),
            proj: Arc::new(gaussian_tensor(&mut rng, &[d, config.embed_dim], 1.0 / (d as f64).sqrt())),
        };
        let image_layers = (0..config.layers)
            .map(|_| LayerWeights::random(&mut rng, d, config.layers))
            .collect();
        let image = Tower {
            embed: Arc::new(gaussian_tensor(&mut rng, &[k, d], 1.0 / (k as f64).sqrt())),
            embed_bias: Arc::new(Tensor::zeros(&[1, d])),
            cls: Arc::new(gaussian_tensor(&mut rng, &[1, d], 1.0)),
            pos: Arc::new(gaussian_tensor(&mut rng, &[config.patches() + 1, d], 0.1)),
            layers: image_layers,
            ln_final_gamma: Arc::new(Tensor::filled(&[1, d], 1.0)),
            ln_final_beta: Arc::new(Tensor::zeros(&[1, d])),
            proj: Arc::new(gaussian_tensor(&mut rng, &[d, config.embed_dim], 1.0 / (d as f64).sqrt())),
        };
        Ok(Self {
            config: config.clone(),
            vocab,
            text,
            image,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut v = self.text.named("text");
        v.extend(self.image.named("image"));
        v
    }

    /// SHA-256 over every weight tensor (names, shapes and values) and the
    /// vocabulary. Prompt geometry is not part of the weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in self.vocab.words() {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        util::hex(&h.finalize())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(ENCODER_MAGIC);
        c.push_json(
            b"CONF",
            "manifest",
            &WeightsManifest {
                config: self.config.clone(),
                vocab: self.vocab.words()[1..].to_vec(),
            },
        )?;
        c.push(b"CSUM", "sha256", self.checksum().into_bytes());
        let named: Vec<(String, &Tensor)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.as_ref()))
            .collect();
        c.push_tensors(b"TENS", "weights", &named);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let manifest: WeightsManifest = c.json(b"CONF", "manifest")?;
        manifest.config.validate()?;
        let mut map: HashMap<String, Tensor> = c.tensors(b"TENS", "weights")?.into_iter().collect();
        let layers = manifest.config.layers;
        let text = Tower::from_named("text", layers, &mut map)?;
        let image = Tower::from_named("image", layers, &mut map)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected weight {extra}")));
        }
        let w = Self {
            config: manifest.config,
            vocab: Vocabulary::new(manifest.vocab),
            text,
            image,
        };
        let stored = String::from_utf8_lossy(&c.require(b"CSUM", "sha256")?.payload).to_string();
        if stored != w.checksum() {
            return Err(Error::Format(format!(
                "encoder checksum mismatch: stored {stored}, computed {}",
                w.checksum()
            )));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, &ENCODER_MAGIC)?)
    }
}

/// Supplies the instance prompt for the image tower, given the class token
/// entering layer `h`.
pub trait InstancePromptProvider {
    fn instance_prompt(&mut self, g: &mut Graph, cls: Var) -> Result<Var>;
}

impl<F> InstancePromptProvider for F
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    fn instance_prompt(&mut self, g: &mut Graph, cls: Var) -> Result<Var> {
        self(g, cls)
    }
}

pub struct ImageEncoding {
    pub feature: Var,
    /// Class token entering layer `h`.
    pub cls_at_depth: Var,
}

/// Frozen encoders plus the prompt geometry used to drive them.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    weights: Arc<FrozenWeights>,
    replace_depth: usize,
    prompt_len: usize,
}

impl DualEncoder {
    pub fn new(weights: FrozenWeights) -> Self {
        Self::from_shared(Arc::new(weights))
    }

    pub fn from_shared(weights: Arc<FrozenWeights>) -> Self {
        let replace_depth = weights.config.replace_depth;
        let prompt_len = weights.config.prompt_len;
        Self {
            weights,
            replace_depth,
            prompt_len,
        }
    }

    /// Same frozen weights, different replacement depth / prompt length.
    pub fn with_prompt_geometry(&self, replace_depth: usize, prompt_len: usize) -> Result<Self> {
        let mut cfg = self.weights.config.clone();
        cfg.replace_depth = replace_depth;
        cfg.prompt_len = prompt_len;
        cfg.validate()?;
        Ok(Self {
            weights: Arc::clone(&self.weights),
            replace_depth,
            prompt_len,
        })
    }

    pub fn weights(&self) -> &FrozenWeights {
        &self.weights
    }

    pub fn shared_weights(&self) -> Arc<FrozenWeights> {
        Arc::clone(&self.weights)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.weights.config
    }

    pub fn replace_depth(&self) -> usize {
        self.replace_depth
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn width(&self) -> usize {
        self.weights.config.width
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.config.embed_dim
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.weights.vocab.tokenize(text)
    }

    fn text_embeddings(&self, tokens: &[usize]) -> Result<Tensor> {
        let cfg = &self.weights.config;
        contract!(!tokens.is_empty(), "empty token sequence");
        contract!(
            tokens.len() <= cfg.text_budget,
            "{} tokens exceed the budget of {}",
            tokens.len(),
            cfg.text_budget
        );
        let d = cfg.width;
        let table = &self.weights.text.embed;
        let pos = &self.weights.text.pos;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            contract!(t < table.rows(), "token id {t} outside vocabulary");
            data.extend(table.row_slice(t).iter().zip(pos.row_slice(i)).map(|(a, b)| a + b));
        }
        Ok(Tensor::matrix(tokens.len(), d, data))
    }

    fn image_embeddings(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.weights.config;
        contract!(
            image.dims() == (cfg.patches(), cfg.patch_dim),
            "image shape {:?}, expected [{}, {}]",
            image.shape(),
            cfg.patches(),
            cfg.patch_dim
        );
        let t = &self.weights.image;
        let patches = image.matmul(&t.embed);
        let d = cfg.width;
        let mut data = Vec::with_capacity((cfg.patches() + 1) * d);
        data.extend(t.cls.data().iter().zip(t.pos.row_slice(0)).map(|(a, b)| a + b));
        for i in 0..cfg.patches() {
            data.extend(
                patches
                    .row_slice(i)
                    .iter()
                    .zip(t.embed_bias.data())
                    .zip(t.pos.row_slice(i + 1))
                    .map(|((p, b), q)| p + b + q),
            );
        }
        Ok(Tensor::matrix(cfg.patches() + 1, d, data))
    }

    fn check_prompt(&self, g: &Graph, v: Var, rows: usize, what: &str) -> Result<()> {
        let t = g.value(v);
        contract!(
            t.dims() == (rows, self.width()),
            "{what} has shape {:?}, expected [{rows}, {}]",
            t.shape(),
            self.width()
        );
        Ok(())
    }

    /// Pre-projection pooled text state (after the final layer norm).
    pub fn encode_text_hidden(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        general: Option<Var>,
        prior: Option<Var>,
    ) -> Result<Var> {
        let content = tokens.len();
        let emb = self.text_embeddings(tokens)?;
        let mut x = g.constant(emb);
        let mut prompt_rows = 0;
        if let Some(v) = general {
            self.check_prompt(g, v, self.prompt_len, "general text prompt")?;
            x = g.concat_rows(&[x, v]);
            prompt_rows = self.prompt_len;
        }
        if let Some(p) = prior {
            self.check_prompt(g, p, 1, "domain prior prompt")?;
        }
        let tower = &self.weights.text;
        for (k, layer) in tower.layers.iter().enumerate() {
            if k + 1 == self.replace_depth {
                if let Some(p) = prior {
                    x = replace_first_prompt(g, x, content, prompt_rows, p);
                    prompt_rows = prompt_rows.max(1);
                }
            }
            x = transformer_block(g, x, layer, self.weights.config.heads);
        }
        let pooled = g.slice_rows(x, content - 1, content);
        let gamma = g.constant_shared(Arc::clone(&tower.ln_final_gamma));
        let beta = g.constant_shared(Arc::clone(&tower.ln_final_beta));
        Ok(g.layer_norm(pooled, gamma, beta))
    }

    pub fn project_text(&self, g: &mut Graph, hidden: Var) -> Var {
        let w = g.constant_shared(Arc::clone(&self.weights.text.proj));
        project(g, hidden, w)
    }

    /// Unit-norm text feature. `general` is `prompt_len x width`; `prior` is
    /// one row that replaces the first prompt slot at the replacement depth.
    pub fn encode_text(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        general: Option<Var>,
        prior: Option<Var>,
    ) -> Result<Var> {
        let h = self.encode_text_hidden(g, tokens, general, prior)?;
        Ok(self.project_text(g, h))
    }

    /// Pre-projection pooled class-token state plus the class token entering
    /// the replacement depth.
    pub fn encode_image_hidden(
        &self,
        g: &mut Graph,
        image: &Tensor,
        general: Option<&[Var]>,
        mut provider: Option<&mut dyn InstancePromptProvider>,
    ) -> Result<(Var, Var)> {
        let h = self.replace_depth;
        let emb = self.image_embeddings(image)?;
        let content = emb.rows();
        if let Some(gp) = general {
            contract!(
                gp.len() == h - 1,
                "{} general image prompts supplied, replacement depth {h} needs {}",
                gp.len(),
                h - 1
            );
            for &v in gp {
                self.check_prompt(g, v, self.prompt_len, "general image prompt")?;
            }
        }
        let mut x = g.constant(emb);
        let mut prompt_rows = 0;
        let tower = &self.weights.image;
        let mut cls_at_depth = None;
        for (k, layer) in tower.layers.iter().enumerate() {
            let depth = k + 1;
            if depth < h {
                if let Some(gp) = general {
                    let body = if prompt_rows > 0 { g.slice_rows(x, 0, content) } else { x };
                    x = g.concat_rows(&[body, gp[k]]);
                    prompt_rows = self.prompt_len;
                }
            }
            if depth == h {
                let cls = g.slice_rows(x, 0, 1);
                cls_at_depth = Some(cls);
                if let Some(p) = provider.as_deref_mut() {
                    let e = p.instance_prompt(g, cls)?;
                    self.check_prompt(g, e, 1, "instance prompt")?;
                    x = replace_first_prompt(g, x, content, prompt_rows, e);
                    prompt_rows = prompt_rows.max(1);
                }
            }
            x = transformer_block(g, x, layer, self.weights.config.heads);
        }
        let cls_at_depth = cls_at_depth.expect("replacement depth validated against layer count");
        let pooled = g.slice_rows(x, 0, 1);
        let gamma = g.constant_shared(Arc::clone(&tower.ln_final_gamma));
        let beta = g.constant_shared(Arc::clone(&tower.ln_final_beta));
        Ok((g.layer_norm(pooled, gamma, beta), cls_at_depth))
    }

    pub fn project_image(&self, g: &mut Graph, hidden: Var) -> Var {
        let w = g.constant_shared(Arc::clone(&self.weights.image.proj));
        project(g, hidden, w)
    }

    /// Unit-norm image feature. `general` holds one `prompt_len x width`
    /// prompt for each layer before the replacement depth.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        image: &Tensor,
        general: Option<&[Var]>,
        provider: Option<&mut dyn InstancePromptProvider>,
    ) -> Result<ImageEncoding> {
        let (hidden, cls_at_depth) = self.encode_image_hidden(g, image, general, provider)?;
        Ok(ImageEncoding {
            feature: self.project_image(g, hidden),
            cls_at_depth,
        })
    }

    /// Prompt-free text feature of a raw string.
    pub fn text_feature(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = self.tokenize(text);
        let mut g = Graph::new();
        let f = self.encode_text(&mut g, &tokens, None, None)?;
        g.check()?;
        Ok(g.value(f).data().to_vec())
    }

    /// Prompt-free image feature.
    pub fn image_feature(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let enc = self.encode_image(&mut g, image, None, None)?;
        g.check()?;
        Ok(g.value(enc.feature).data().to_vec())
    }
}

fn project(g: &mut Graph, hidden: Var, w: Var) -> Var {
    let p = g.matmul(hidden, w);
    g.l2_normalize_rows(p)
}

/// Puts `prompt` in the first prompt slot, or appends it when the sequence
/// has no prompt slots yet.
fn replace_first_prompt(g: &mut Graph, x: Var, content: usize, prompt_rows: usize, prompt: Var) -> Var {
    let body = g.slice_rows(x, 0, content);
    if prompt_rows <= 1 {
        g.concat_rows(&[body, prompt])
    } else {
        let rest = g.slice_rows(x, content + 1, content + prompt_rows);
        g.concat_rows(&[body, prompt, rest])
    }
}

/// Pre-norm transformer block with bidirectional multi-head attention.
pub fn transformer_block(g: &mut Graph, x: Var, w: &LayerWeights, heads: usize) -> Var {
    let c = |g: &mut Graph, t: &Arc<Tensor>| g.constant_shared(Arc::clone(t));
    let d = g.value(x).cols();
    let dh = d / heads;

    let (ga, ba) = (c(g, &w.ln1_gamma), c(g, &w.ln1_beta));
    let h = g.layer_norm(x, ga, ba);
    let affine = |g: &mut Graph, inp: Var, wm: &Arc<Tensor>, b: &Arc<Tensor>| {
        let wv = c(g, wm);
        let bv = c(g, b);
        let y = g.matmul(inp, wv);
        g.add_row(y, bv)
    };
    let q = affine(g, h, &w.w_q, &w.b_q);
    let k = affine(g, h, &w.w_k, &w.b_k);
    let v = affine(g, h, &w.w_v, &w.b_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (s, e) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, s, e);
        let kh = g.slice_cols(k, s, e);
        let vh = g.slice_cols(v, s, e);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        outs.push(g.matmul(attn, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let o = affine(g, cat, &w.w_o, &w.b_o);
    let x = g.add(x, o);

    let (gf, bf) = (c(g, &w.ln2_gamma), c(g, &w.ln2_beta));
    let h = g.layer_norm(x, gf, bf);
    let f = affine(g, h, &w.w_ff1, &w.b_ff1);
    let f = g.gelu(f);
    let f = affine(g, f, &w.w_ff2, &w.b_ff2);
    g.add(x, f)
}

/// Frozen zero-shot decision: index of the highest cosine score (lowest index
/// on ties) and all scores.
pub fn zero_shot_classify(image_feature: &[f64], text_features: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    contract!(!text_features.is_empty(), "zero-shot classification needs at least one candidate");
    let scores: Vec<f64> = text_features.iter().map(|t| util::dot(image_feature, t)).collect();
    Ok((util::argmax(&scores), scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon() -> Vec<(String, Vec<f64>)> {
        let mut rng = rng_stream(3, "lex");
        ["a", "photo", "of", "class-3", "chair"]
            .iter()
            .map(|w| (w.to_string(), util::gaussian(&mut rng, 8, 1.0)))
            .collect()
    }

    fn encoder() -> DualEncoder {
        DualEncoder::new(FrozenWeights::initialize(&EncoderConfig::default(), &lexicon(), 9).unwrap())
    }

    fn image(seed: u64) -> Tensor {
        gaussian_tensor(&mut rng_stream(seed, "img"), &[16, 8], 1.0)
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.replace_depth = 0;
        assert!(c.validate().is_err());
        c.replace_depth = 7;
        assert!(c.validate().is_err());
        c = EncoderConfig { heads: 5, ..EncoderConfig::default() };
        assert!(c.validate().is_err());
        c = EncoderConfig { prompt_len: 0, ..EncoderConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn outputs_are_unit_norm() {
        let e = encoder();
        let t = e.text_feature("a photo of a chair").unwrap();
        let i = e.image_feature(&image(1)).unwrap();
        assert!((util::norm(&t) - 1.0).abs() < 1e-6);
        assert!((util::norm(&i) - 1.0).abs() < 1e-6);
        assert_eq!(t.len(), 64);
    }

    #[test]
    fn prompt_free_calls_are_bit_identical() {
        let e = encoder();
        let a = e.text_feature("a photo of class-3").unwrap();
        let b = e.text_feature("a photo of class-3").unwrap();
        assert_eq!(a, b);
        let x = e.image_feature(&image(2)).unwrap();
        let y = e.image_feature(&image(2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_general_prompt_changes_text_output() {
        let e = encoder();
        let tokens = e.tokenize("a photo of chair");
        let base = e.text_feature("a photo of chair").unwrap();
        let mut g = Graph::new();
        let vg = g.constant(Tensor::zeros(&[1, 64]));
        let f = e.encode_text(&mut g, &tokens, Some(vg), None).unwrap();
        assert_ne!(g.value(f).data(), base.as_slice());
    }

    #[test]
    fn token_budget_is_enforced() {
        let e = encoder();
        let tokens = vec![1; 17];
        let mut g = Graph::new();
        assert!(matches!(e.encode_text(&mut g, &tokens, None, None), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_provider_matches_no_general_prompt_path_shape() {
        let e = encoder();
        let img = image(4);
        let mut g = Graph::new();
        let mut zero = |g: &mut Graph, _cls: Var| -> Result<Var> { Ok(g.constant(Tensor::zeros(&[1, 64]))) };
        let enc = e.encode_image(&mut g, &img, None, Some(&mut zero)).unwrap();
        assert_eq!(g.value(enc.cls_at_depth).dims(), (1, 64));
        assert!((g.value(enc.feature).norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn provider_with_wrong_width_is_rejected() {
        let e = encoder();
        let mut bad = |g: &mut Graph, _cls: Var| -> Result<Var> { Ok(g.constant(Tensor::zeros(&[1, 32]))) };
        let mut g = Graph::new();
        assert!(matches!(
            e.encode_image(&mut g, &image(5), None, Some(&mut bad)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn general_image_prompts_must_cover_layers_before_depth() {
        let e = encoder();
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 64]));
        let prompts = vec![p; 2];
        assert!(e.encode_image(&mut g, &image(6), Some(&prompts), None).is_err());
        let prompts = vec![p; 3];
        assert!(e.encode_image(&mut g, &image(6), Some(&prompts), None).is_ok());
    }

    #[test]
    fn zero_shot_examples() {
        let c0 = vec![1.0, 0.0, 0.0];
        let c1 = vec![0.0, 1.0, 0.0];
        let c2 = vec![0.0, 0.0, 1.0];
        let (i, s) = zero_shot_classify(&c2, &[c0.clone(), c1.clone(), c2.clone()]).unwrap();
        assert_eq!(i, 2);
        assert_eq!(s[2], 1.0);
        let img = vec![0.6, 0.8, 0.0];
        assert_eq!(zero_shot_classify(&img, &[c0, c1]).unwrap().0, 1);
        assert!(zero_shot_classify(&img, &[]).is_err());
    }

    #[test]
    fn weights_round_trip_with_checksum() {
        let w = FrozenWeights::initialize(&EncoderConfig::default(), &lexicon(), 9).unwrap();
        let c = w.to_container().unwrap();
        let back = FrozenWeights::from_container(&Container::from_bytes(&c.to_bytes(), &ENCODER_MAGIC).unwrap()).unwrap();
        assert_eq!(back.checksum(), w.checksum());
        assert_eq!(back, w);
    }

    #[test]
    fn corrupted_weights_fail_checksum() {
        let w = FrozenWeights::initialize(&EncoderConfig::default(), &lexicon(), 9).unwrap();
        let mut bytes = w.to_container().unwrap().to_bytes();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        let c = Container::from_bytes(&bytes, &ENCODER_MAGIC).unwrap();
        assert!(matches!(FrozenWeights::from_container(&c), Err(Error::Format(_))));
    }
}

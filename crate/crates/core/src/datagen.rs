//! Seeded synthetic multi-domain benchmark.
//!
//! Every category owns a text code in an 8-dim latent space. Category `j` of
//! every domain starts from a shared skeleton vector `a_j`; domain `n` moves
//! its text codes by `separation * sigma * rho * h_nj` and its images by a
//! further `separation * sigma * u_n` (`u_n` a random unit vector). With zero
//! separation all domains are the same distribution. Images are 4x4 grids of
//! 8-dim patches `R_p z + sigma * eps` with fixed random render matrices `R_p`.
//!
//! Overlap pairs bend the latent of one category towards another to a given
//! cosine similarity and give it a near-duplicate name (`"arm" + name`), or
//! the very same name when `same_name` is set.

use std::path::Path;

use protoprompt_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{contract, Error, Result};
use crate::util::{dot, gaussian, gaussian_tensor, norm, rng_stream};

pub const LATENT_DIM: usize = 8;
pub const GRID: usize = 4;
pub const DATASET_MAGIC: [u8; 8] = *b"PPDOMAIN";
pub const ALIAS_PREFIX: &str = "arm";

/// Share of the separation that moves text codes between domains.
const TEXT_SHIFT: f64 = 0.5;
const FILLER_CODE_STD: f64 = 0.5;
const PATCH_VARIATION: f64 = 0.25;

pub const TEMPLATES: [&str; 8] = [
    "a photo of a {}",
    "a picture of a {}",
    "an image of the {}",
    "a photo of the small {}",
    "a photo of the large {}",
    "a rendering of a {}",
    "a close photo of a {}",
    "a blurry photo of the {}",
];

/// Template used for the text side of training.
pub const TRAIN_TEMPLATE: &str = "a photo of a {}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapPair {
    pub domain_a: usize,
    pub category_a: usize,
    pub domain_b: usize,
    pub category_b: usize,
    pub similarity: f64,
    #[serde(default)]
    pub same_name: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub domains: usize,
    pub categories_per_domain: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// Inter-domain separation in units of `noise`.
    pub separation: f64,
    /// Per-entry patch noise.
    pub noise: f64,
    pub overlap_pairs: Vec<OverlapPair>,
    pub pretext_categories: usize,
    pub pretext_train_per_category: usize,
    pub pretext_test_per_category: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            domains: 4,
            categories_per_domain: 5,
            train_per_category: 24,
            test_per_category: 20,
            separation: 3.0,
            noise: 1.0,
            overlap_pairs: vec![
                OverlapPair {
                    domain_a: 0,
                    category_a: 1,
                    domain_b: 2,
                    category_b: 3,
                    similarity: 0.95,
                    same_name: false,
                },
                OverlapPair {
                    domain_a: 1,
                    category_a: 2,
                    domain_b: 3,
                    category_b: 0,
                    similarity: 0.95,
                    same_name: true,
                },
            ],
            pretext_categories: 32,
            pretext_train_per_category: 24,
            pretext_test_per_category: 8,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        contract!(self.domains >= 1, "benchmark needs at least one domain");
        contract!(self.categories_per_domain >= 1, "domains need at least one category");
        contract!(
            self.train_per_category >= 1 && self.test_per_category >= 1,
            "every category needs at least one train and one test sample"
        );
        contract!(
            self.separation.is_finite() && self.separation >= 0.0,
            "separation must be finite and non-negative"
        );
        contract!(self.noise.is_finite() && self.noise > 0.0, "noise must be positive");
        contract!(
            self.pretext_categories >= 2
                && self.pretext_train_per_category >= 1
                && self.pretext_test_per_category >= 1,
            "pretext set needs two categories and samples in both splits"
        );
        let mut targets = Vec::new();
        for (i, p) in self.overlap_pairs.iter().enumerate() {
            contract!(
                p.domain_a < self.domains && p.domain_b < self.domains,
                "overlap pair {i} names a domain outside 0..{}",
                self.domains
            );
            contract!(
                p.category_a < self.categories_per_domain && p.category_b < self.categories_per_domain,
                "overlap pair {i} names a category outside 0..{}",
                self.categories_per_domain
            );
            contract!(p.domain_a != p.domain_b, "overlap pair {i} stays within one domain");
            contract!(
                (0.0..=1.0).contains(&p.similarity),
                "overlap pair {i} similarity {} outside [0, 1]",
                p.similarity
            );
            let target = (p.domain_b, p.category_b);
            contract!(!targets.contains(&target), "category {target:?} is bent by two overlap pairs");
            targets.push(target);
        }
        for p in &self.overlap_pairs {
            contract!(
                !targets.contains(&(p.domain_a, p.category_a)),
                "overlap pair source ({}, {}) is itself bent by another pair",
                p.domain_a,
                p.category_a
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `patches x patch_dim`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub index: usize,
    pub name: String,
    pub categories: Vec<String>,
    /// Text code per category.
    pub text_codes: Vec<Vec<f64>>,
    /// Image latent per category.
    pub image_latents: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DomainData {
    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn train_images_of(&self, category: usize) -> Vec<&Tensor> {
        self.train.iter().filter(|s| s.label == category).map(|s| &s.image).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: BenchmarkSpec,
    pub domains: Vec<DomainData>,
    pub pretext: DomainData,
    pub templates: Vec<String>,
    /// Every word the generator can emit, each with its semantic code.
    pub lexicon: Vec<(String, Vec<f64>)>,
}

/// Deterministic pseudo-word for a category index.
pub fn category_word(index: usize) -> String {
    const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "te", "so", "na", "vi", "po", "de", "gu", "fa"];
    let mut i = index + 12 * 12 + 1;
    let mut parts = Vec::new();
    while i > 0 {
        parts.push(SYLLABLES[i % 12]);
        i /= 12;
    }
    parts.concat()
}

/// Per-patch render matrices: one shared matrix plus a small per-patch
/// perturbation.
pub fn render_matrices(seed: u64) -> Vec<Tensor> {
    let mut rng = rng_stream(seed, "render");
    let std = 1.0 / (LATENT_DIM as f64).sqrt();
    let shared = gaussian_tensor(&mut rng, &[LATENT_DIM, LATENT_DIM], std);
    (0..GRID * GRID)
        .map(|_| {
            let own = gaussian_tensor(&mut rng, &[LATENT_DIM, LATENT_DIM], std * PATCH_VARIATION);
            let data = shared.data().iter().zip(own.data()).map(|(a, b)| a + b).collect();
            Tensor::matrix(LATENT_DIM, LATENT_DIM, data)
        })
        .collect()
}

/// One image: row `p` is `R_p z + noise * eps`.
pub fn render(latent: &[f64], renderers: &[Tensor], noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(renderers.len() * LATENT_DIM);
    for r in renderers {
        let eps = gaussian(rng, LATENT_DIM, noise);
        for (row, e) in eps.iter().enumerate() {
            data.push(dot(r.row_slice(row), latent) + e);
        }
    }
    Tensor::matrix(renderers.len(), LATENT_DIM, data)
}

/// `target` rotated towards `source` until their cosine is `similarity`, with
/// the norm of `source`.
fn bend_towards(source: &[f64], target: &[f64], similarity: f64) -> Vec<f64> {
    let ns = norm(source);
    let x: Vec<f64> = source.iter().map(|v| v / ns).collect();
    let along = dot(target, &x);
    let mut y: Vec<f64> = target.iter().zip(&x).map(|(t, xv)| t - along * xv).collect();
    let ny = norm(&y);
    if ny < 1e-12 {
        y = vec![0.0; x.len()];
        let k = (0..x.len()).min_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).unwrap();
        y[k] = 1.0;
        let along = x[k];
        y.iter_mut().zip(&x).for_each(|(v, xv)| *v -= along * xv);
        let ny = norm(&y);
        y.iter_mut().for_each(|v| *v /= ny);
    } else {
        y.iter_mut().for_each(|v| *v /= ny);
    }
    let s = similarity;
    let c = (1.0 - s * s).max(0.0).sqrt();
    x.iter().zip(&y).map(|(a, b)| ns * (s * a + c * b)).collect()
}

fn sample_split(
    latents: &[Vec<f64>],
    per_category: usize,
    renderers: &[Tensor],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let mut out = Vec::with_capacity(latents.len() * per_category);
    for _ in 0..per_category {
        for (label, z) in latents.iter().enumerate() {
            out.push(Sample {
                image: render(z, renderers, noise, rng),
                label,
            });
        }
    }
    out
}

pub fn generate(spec: &BenchmarkSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let seed = spec.seed;
    let k = LATENT_DIM;
    let c = spec.categories_per_domain;
    let renderers = render_matrices(seed);

    let mut rng = rng_stream(seed, "skeleton");
    let skeleton: Vec<Vec<f64>> = (0..c).map(|_| gaussian(&mut rng, k, 1.0)).collect();

    let shift = spec.separation * spec.noise;
    let mut names = Vec::with_capacity(spec.domains);
    let mut text_codes = Vec::with_capacity(spec.domains);
    let mut image_latents = Vec::with_capacity(spec.domains);
    for n in 0..spec.domains {
        let mut rng = rng_stream(seed, &format!("domain-{n}-codes"));
        let u = gaussian(&mut rng, k, 1.0);
        let nu = norm(&u);
        let u: Vec<f64> = u.iter().map(|v| v / nu).collect();
        let mut codes = Vec::with_capacity(c);
        let mut latents = Vec::with_capacity(c);
        for a in &skeleton {
            let h = gaussian(&mut rng, k, 1.0 / (k as f64).sqrt());
            let code: Vec<f64> = a
                .iter()
                .zip(&h)
                .zip(&u)
                .map(|((a, h), u)| a + shift * TEXT_SHIFT * (u + h))
                .collect();
            let latent: Vec<f64> = code.iter().zip(&u).map(|(t, u)| t + shift * (1.0 - TEXT_SHIFT) * u).collect();
            codes.push(code);
            latents.push(latent);
        }
        names.push((0..c).map(|j| category_word(n * c + j)).collect::<Vec<_>>());
        text_codes.push(codes);
        image_latents.push(latents);
    }
    for p in &spec.overlap_pairs {
        let src_code = text_codes[p.domain_a][p.category_a].clone();
        let src_latent = image_latents[p.domain_a][p.category_a].clone();
        let (db, cb) = (p.domain_b, p.category_b);
        image_latents[db][cb] = bend_towards(&src_latent, &image_latents[db][cb], p.similarity);
        if p.same_name {
            text_codes[db][cb] = src_code;
            names[db][cb] = names[p.domain_a][p.category_a].clone();
        } else {
            text_codes[db][cb] = bend_towards(&src_code, &text_codes[db][cb], p.similarity);
            names[db][cb] = format!("{ALIAS_PREFIX}{}", names[p.domain_a][p.category_a]);
        }
    }

    let mut domains = Vec::with_capacity(spec.domains);
    for n in 0..spec.domains {
        let mut train_rng = rng_stream(seed, &format!("domain-{n}-train"));
        let mut test_rng = rng_stream(seed, &format!("domain-{n}-test"));
        let lat = &image_latents[n];
        domains.push(DomainData {
            index: n,
            name: format!("domain-{}", n + 1),
            categories: names[n].clone(),
            text_codes: text_codes[n].clone(),
            image_latents: lat.clone(),
            train: sample_split(lat, spec.train_per_category, &renderers, spec.noise, &mut train_rng),
            test: sample_split(lat, spec.test_per_category, &renderers, spec.noise, &mut test_rng),
        });
    }

    let mut rng = rng_stream(seed, "pretext-codes");
    let pcodes: Vec<Vec<f64>> = (0..spec.pretext_categories).map(|_| gaussian(&mut rng, k, 1.0)).collect();
    let mut train_rng = rng_stream(seed, "pretext-train");
    let mut test_rng = rng_stream(seed, "pretext-test");
    let pretext = DomainData {
        index: usize::MAX,
        name: "pretext".into(),
        categories: (0..spec.pretext_categories).map(|j| format!("class-{j}")).collect(),
        text_codes: pcodes.clone(),
        image_latents: pcodes.clone(),
        train: sample_split(&pcodes, spec.pretext_train_per_category, &renderers, spec.noise, &mut train_rng),
        test: sample_split(&pcodes, spec.pretext_test_per_category, &renderers, spec.noise, &mut test_rng),
    };

    let templates: Vec<String> = TEMPLATES.iter().map(|t| t.to_string()).collect();
    let lexicon = build_lexicon(seed, &templates, &domains, &pretext);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        domains,
        pretext,
        templates,
        lexicon,
    })
}

fn build_lexicon(
    seed: u64,
    templates: &[String],
    domains: &[DomainData],
    pretext: &DomainData,
) -> Vec<(String, Vec<f64>)> {
    let mut lexicon: Vec<(String, Vec<f64>)> = Vec::new();
    let mut rng = rng_stream(seed, "filler-codes");
    for t in templates {
        for w in t.split_whitespace().filter(|w| *w != "{}") {
            if !lexicon.iter().any(|(x, _)| x == w) {
                lexicon.push((w.to_string(), gaussian(&mut rng, LATENT_DIM, FILLER_CODE_STD)));
            }
        }
    }
    for d in domains.iter().chain(std::iter::once(pretext)) {
        for (name, code) in d.categories.iter().zip(&d.text_codes) {
            if !lexicon.iter().any(|(x, _)| x == name) {
                lexicon.push((name.clone(), code.clone()));
            }
        }
    }
    lexicon
}

/// Fills a template's `{}` placeholder.
pub fn fill_template(template: &str, category: &str) -> Result<String> {
    contract!(template.contains("{}"), "template {template:?} has no placeholder");
    Ok(template.replacen("{}", category, 1))
}

/// Seeded shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: BenchmarkSpec,
    spec_hash: String,
    domains: Vec<String>,
    templates: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DomainManifest {
    index: Option<usize>,
    name: String,
    categories: Vec<String>,
    text_codes: Vec<Vec<f64>>,
    image_latents: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    test_labels: Vec<usize>,
}

fn stack(samples: &[Sample]) -> Tensor {
    let cols = samples.first().map(|s| s.image.cols()).unwrap_or(LATENT_DIM);
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        data.extend_from_slice(s.image.data());
        rows += s.image.rows();
    }
    Tensor::matrix(rows, cols, data)
}

fn unstack(images: &Tensor, labels: &[usize]) -> Result<Vec<Sample>> {
    let per = GRID * GRID;
    if images.rows() != labels.len() * per {
        return Err(Error::Format(format!(
            "{} image rows for {} labels",
            images.rows(),
            labels.len()
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            image: images.slice_rows(i * per, (i + 1) * per),
            label,
        })
        .collect())
}

impl SyntheticDataset {
    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Writes `dataset.json` plus one binary file per domain.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = DatasetManifest {
            spec: self.spec.clone(),
            spec_hash: crate::util::hash_json(&self.spec)?,
            domains: self.domain_names(),
            templates: self.templates.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join("dataset.json");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        for d in self.domains.iter().chain(std::iter::once(&self.pretext)) {
            domain_container(d)?.write(&dir.join(format!("{}.bin", d.name)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(&path, e),
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut domains = Vec::new();
        for name in &manifest.domains {
            domains.push(read_domain(&dir.join(format!("{name}.bin")))?);
        }
        let pretext = read_domain(&dir.join("pretext.bin"))?;
        let lexicon = build_lexicon(manifest.spec.seed, &manifest.templates, &domains, &pretext);
        Ok(Self {
            spec: manifest.spec,
            domains,
            pretext,
            templates: manifest.templates,
            lexicon,
        })
    }
}

fn domain_container(d: &DomainData) -> Result<Container> {
    let mut c = Container::new(DATASET_MAGIC);
    c.push_json(
        b"META",
        "domain",
        &DomainManifest {
            index: (d.index != usize::MAX).then_some(d.index),
            name: d.name.clone(),
            categories: d.categories.clone(),
            text_codes: d.text_codes.clone(),
            image_latents: d.image_latents.clone(),
            train_labels: d.train.iter().map(|s| s.label).collect(),
            test_labels: d.test.iter().map(|s| s.label).collect(),
        },
    )?;
    let train = stack(&d.train);
    let test = stack(&d.test);
    c.push_tensors(b"TENS", "images", &[("train".into(), &train), ("test".into(), &test)]);
    Ok(c)
}

fn read_domain(path: &Path) -> Result<DomainData> {
    let c = Container::read(path, &DATASET_MAGIC)?;
    let m: DomainManifest = c.json(b"META", "domain")?;
    let mut t = c.tensors(b"TENS", "images")?;
    let train = t.remove("train").ok_or_else(|| Error::Format("missing train images".into()))?;
    let test = t.remove("test").ok_or_else(|| Error::Format("missing test images".into()))?;
    Ok(DomainData {
        index: m.index.unwrap_or(usize::MAX),
        name: m.name,
        categories: m.categories,
        text_codes: m.text_codes,
        image_latents: m.image_latents,
        train: unstack(&train, &m.train_labels)?,
        test: unstack(&test, &m.test_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::cosine;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            train_per_category: 3,
            test_per_category: 2,
            pretext_categories: 4,
            pretext_train_per_category: 2,
            pretext_test_per_category: 1,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn category_words_are_unique() {
        let words: Vec<String> = (0..500).map(category_word).collect();
        let mut sorted = words.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), words.len());
    }

    #[test]
    fn zero_samples_rejected() {
        let spec = BenchmarkSpec {
            train_per_category: 0,
            ..small()
        };
        assert!(matches!(generate(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn overlap_pairs_hit_declared_similarity_and_names() {
        let d = generate(&small()).unwrap();
        let a = &d.domains[0].image_latents[1];
        let b = &d.domains[2].image_latents[3];
        assert!((cosine(a, b) - 0.95).abs() < 1e-9);
        assert_eq!(d.domains[2].categories[3], format!("arm{}", d.domains[0].categories[1]));
        assert_eq!(d.domains[3].categories[0], d.domains[1].categories[2]);
        assert_eq!(d.domains[3].text_codes[0], d.domains[1].text_codes[2]);
    }

    #[test]
    fn similarity_one_gives_identical_latents() {
        let mut spec = small();
        spec.overlap_pairs[0].similarity = 1.0;
        let d = generate(&spec).unwrap();
        let a = &d.domains[0].image_latents[1];
        let b = &d.domains[2].image_latents[3];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_separation_makes_domains_identical() {
        let spec = BenchmarkSpec {
            separation: 0.0,
            overlap_pairs: vec![],
            ..small()
        };
        let d = generate(&spec).unwrap();
        for n in 1..4 {
            assert_eq!(d.domains[n].image_latents, d.domains[0].image_latents);
            assert_eq!(d.domains[n].text_codes, d.domains[0].text_codes);
        }
    }

    #[test]
    fn splits_are_disjoint_and_labelled() {
        let d = generate(&small()).unwrap();
        for dom in &d.domains {
            assert_eq!(dom.train.len(), 15);
            assert_eq!(dom.test.len(), 10);
            assert!(dom.train.iter().all(|s| s.label < 5 && s.image.dims() == (16, 8)));
            for s in &dom.test {
                assert!(dom.train.iter().all(|t| t.image != s.image));
            }
        }
    }

    #[test]
    fn template_fill() {
        assert_eq!(fill_template("a photo of a {}", "kalo").unwrap(), "a photo of a kalo");
        assert!(fill_template("no slot", "x").is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(SyntheticDataset::load(dir.path()).unwrap(), d);
    }
}

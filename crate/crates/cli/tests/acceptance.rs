//! Acceptance criteria, run one after another with a pass/fail line each.
//!
//! `cargo test -p protoprompt-cli --test acceptance`

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protoprompt::config::{Paths, RunConfig};
use protoprompt::datagen::{generate, Sample, SyntheticDataset, TRAIN_TEMPLATE};
use protoprompt::discriminator::Discriminator;
use protoprompt::encoder::{zero_shot_classify, DualEncoder, FrozenWeights};
use protoprompt::inference::{Evaluator, InferenceOptions};
use protoprompt::metrics::*;
use protoprompt::pipeline::{self, Evaluation};
use protoprompt::pretrain::pretrain_encoders;
use protoprompt::prompt::BoundComponent;
use protoprompt::prototype::{build_domain_prototypes, DomainPrototypeSet, NormalizationFlags};
use protoprompt::trainer::{conditioned_loss, new_component, TrainConfig};
use protoprompt::util::{gaussian_tensor, rng_stream};
use protoprompt_autodiff::{finite_difference_check, GradCheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pct2(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn manifest_path(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn reference_taskid() -> AccuracyMatrix {
    let text = std::fs::read_to_string(manifest_path("../../fixtures/taskid_reference.csv")).unwrap();
    AccuracyMatrix::from_csv(&text).unwrap()
}

fn columns(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i}")).collect()
}

fn c1_forgetting_aggregation() -> Outcome {
    let m = reference_taskid();
    let expected = [99.93, 88.97, 98.50, 92.27, 98.96, 100.00, 99.92, 100.00, 99.95, 99.95, 98.29];
    let got = dataset_forgetting(&m);
    let worst = got
        .iter()
        .zip(expected)
        .map(|(g, p)| (g * 100.0 - p).abs())
        .fold(0.0, f64::max);
    check(m.n() == 11 && worst <= 0.005 + 1e-9, format!("max deviation {worst:.4}"))
}

fn c2_transfer_and_last() -> Outcome {
    let zs = [24.42, 88.19, 67.31, 44.68, 55.26, 70.22, 88.50, 59.45, 89.04, 64.71, 65.16];
    let m = AccuracyMatrix::new(columns(11), vec![zs.map(|v| v / 100.0).to_vec(); 11]).unwrap();
    let t = transfer(&m).unwrap() * 100.0;
    let row = [49.86, 95.62, 85.79, 78.61, 98.38, 95.77, 92.11, 99.40, 93.97, 84.49, 81.69];
    let mut values = vec![vec![0.0; 11]; 11];
    values[10] = row.map(|v| v / 100.0).to_vec();
    let l = last(&AccuracyMatrix::new(columns(11), values).unwrap()) * 100.0;
    check(
        (t - 69.25).abs() <= 0.01 && (l - 86.89).abs() <= 0.01,
        format!("transfer {t:.4}, last {l:.4}"),
    )
}

fn brute(a: &[Vec<f64>]) -> [f64; 4] {
    let n = a.len();
    let nf = n as f64;
    let mut avg = 0.0;
    for row in a {
        let mut s = 0.0;
        for v in row {
            s += v;
        }
        avg += s / nf;
    }
    let mut last = 0.0;
    for j in 0..n {
        last += a[n - 1][j];
    }
    let mut forgetting = 0.0;
    for j in 0..n {
        let mut s = 0.0;
        for row in &a[j..] {
            s += row[j];
        }
        forgetting += s / (n - j) as f64;
    }
    let mut transfer = 0.0;
    for j in 1..n {
        let mut s = 0.0;
        for row in &a[..j] {
            s += row[j];
        }
        transfer += s / j as f64;
    }
    [avg / nf, last / nf, forgetting / nf, transfer / (nf - 1.0)]
}

fn c3_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let m = AccuracyMatrix::new(columns(n), a.clone()).unwrap();
        let got = [avg(&m), last(&m), forgetting(&m), transfer(&m).unwrap()];
        for (g, b) in got.iter().zip(brute(&a)) {
            worst = worst.max((g - b).abs());
        }
    }
    check(worst < 1e-12, format!("max deviation {worst:.1e} over 100 matrices"))
}

fn c4_gradcheck() -> Outcome {
    let cfg = RunConfig::shipped_default().unwrap().resolved().unwrap();
    let data = generate(&cfg.benchmark).unwrap();
    let w = FrozenWeights::initialize(&cfg.encoder, &data.lexicon, 3).unwrap();
    let enc = pipeline::encoder_from(&cfg, w).unwrap();
    let domain = &data.domains[1];
    let set = build_domain_prototypes(&enc, domain, &data.templates, NormalizationFlags::default()).unwrap();
    let mut c = new_component(&enc, domain, &TrainConfig::default(), 1).unwrap();
    // Move off the initialization so every block (including zero-initialized
    // output layers) carries gradient.
    let mut rng = rng_stream(11, "gradcheck");
    for p in c.params_mut() {
        let noise = gaussian_tensor(&mut rng, p.shape(), 0.05);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let batch: Vec<&Sample> = [0, 30, 61, 95].iter().map(|&i| &domain.train[i]).collect();
    let params: Vec<_> = c.params().into_iter().cloned().collect();
    let layers = c.general_image.len();
    let config = GradCheckConfig {
        max_entries_per_param: Some(6),
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(
        |g, vars| {
            let bound = BoundComponent::from_vars(vars, layers).unwrap();
            conditioned_loss(g, &enc, &c, &bound, &set, &batch, TRAIN_TEMPLATE, 0.07).unwrap().0
        },
        &params,
        &config,
    )
    .unwrap();
    check(
        report.max_rel_error < 1e-3,
        format!(
            "max relative error {:.2e} over {} entries of {} tensors",
            report.max_rel_error,
            report.entries_checked,
            params.len()
        ),
    )
}

/// The default pipeline run in process, shared by several criteria.
struct DefaultRun {
    cfg: RunConfig,
    eval: Evaluation,
}

fn frozen_outputs(enc: &DualEncoder, data: &SyntheticDataset) -> Vec<u64> {
    let mut bits = Vec::new();
    for d in &data.domains {
        for s in d.test.iter().step_by(7) {
            bits.extend(enc.image_feature(&s.image).unwrap().iter().map(|x| x.to_bits()));
        }
        for c in &d.categories {
            bits.extend(enc.text_feature(&TRAIN_TEMPLATE.replace("{}", c)).unwrap().iter().map(|x| x.to_bits()));
        }
    }
    bits
}

fn train_and_evaluate(cfg: &RunConfig) -> (DualEncoder, SyntheticDataset, Evaluation, Vec<u64>, String) {
    let data = pipeline::generate_data(cfg).unwrap();
    let (weights, _) = pipeline::pretrain(cfg, &data).unwrap();
    let enc = pipeline::encoder_from(cfg, weights).unwrap();
    let before = frozen_outputs(&enc, &data);
    let checksum = enc.weights().checksum();
    let out = pipeline::train(cfg, &enc, &data).unwrap();
    let eval = pipeline::evaluate(cfg, &enc, &data, &out.snapshots).unwrap();
    assert_eq!(enc.weights().checksum(), checksum);
    (enc, data, eval, before, checksum)
}

fn c5_zero_shot_preservation(root: &Path, shared: &mut Option<DefaultRun>) -> Outcome {
    let mut cfg = RunConfig::shipped_default().unwrap().resolved().unwrap();
    cfg.paths = Paths::under(root);
    let (enc, data, eval, before, checksum) = train_and_evaluate(&cfg);
    let after = frozen_outputs(&enc, &data);
    let identical = before == after && enc.weights().checksum() == checksum;

    let mut ev = Evaluator::new(enc.clone(), data.templates.clone(), InferenceOptions::default());
    let empty = protoprompt::prompt::PromptPool::new();
    let mut mismatches = 0;
    let mut checked = 0;
    for d in &data.domains {
        let texts: Vec<Vec<f64>> = d.categories.iter().map(|c| ev.zero_shot_text(c).unwrap().as_ref().clone()).collect();
        for s in &d.test {
            let f = enc.image_feature(&s.image).unwrap();
            let (j, scores) = zero_shot_classify(&f, &texts).unwrap();
            let (k, got) = ev.unseen_scores(&empty, &d.categories, None, &s.image).unwrap();
            let same = j == k && scores.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
            checked += 1;
        }
    }
    *shared = Some(DefaultRun { cfg, eval });
    check(
        identical && mismatches == 0,
        format!(
            "{} frozen output values {}; {mismatches}/{checked} zero-shot mismatches",
            before.len(),
            if identical { "bit-identical" } else { "CHANGED" }
        ),
    )
}

fn taskid_matrix(cfg: &RunConfig) -> AccuracyMatrix {
    let data = generate(&cfg.benchmark).unwrap();
    let w = FrozenWeights::initialize(&cfg.encoder, &data.lexicon, cfg.seed).unwrap();
    let (w, _) = pretrain_encoders(w, &data.pretext, &data.templates, &cfg.pretrain).unwrap();
    let enc = DualEncoder::new(w);
    let sets: Vec<DomainPrototypeSet> = data
        .domains
        .iter()
        .map(|d| build_domain_prototypes(&enc, d, &data.templates, NormalizationFlags::default()).unwrap())
        .collect();
    let features: Vec<Vec<Vec<f64>>> = data
        .domains
        .iter()
        .map(|d| d.test.iter().map(|s| enc.image_feature(&s.image).unwrap()).collect())
        .collect();
    Discriminator::default().accuracy_matrix(data.domain_names(), &sets, &features).unwrap()
}

fn lower(m: &AccuracyMatrix) -> Vec<f64> {
    (0..m.n()).flat_map(|u| (0..=u).map(move |n| (u, n))).map(|(u, n)| m.get(u, n)).collect()
}

fn c6_discriminator() -> Outcome {
    let mut cfg = RunConfig::shipped_default().unwrap().resolved().unwrap();
    cfg.benchmark.overlap_pairs.clear();
    let separated = taskid_matrix(&cfg);
    let min = lower(&separated).into_iter().fold(1.0, f64::min);

    cfg.benchmark.separation = 0.0;
    cfg.benchmark.test_per_category = 100;
    let mixed = taskid_matrix(&cfg);
    let n = mixed.n();
    let chance = 1.0 / n as f64;
    let row = &mixed.values[n - 1];
    let off = row.iter().map(|a| (a - chance).abs()).fold(0.0, f64::max);
    check(
        cfg.benchmark.separation == 0.0 && min >= 0.95 && off <= 0.10,
        format!(
            "separated: min lower-triangle {}; no separation: last row [{}] vs chance {}",
            pct2(min),
            row.iter().map(|a| pct2(*a)).collect::<Vec<_>>().join(", "),
            pct2(chance)
        ),
    )
}

fn c7_relatedness(run: &DefaultRun) -> Outcome {
    let e = &run.eval;
    let n = e.cil.n();
    let cellwise = (0..n).all(|j| e.til.get(n - 1, j) >= e.cil.get(n - 1, j));
    let pairs = run.cfg.benchmark.overlap_pairs.len();
    check(
        pairs == 2 && last(&e.cil) > last(&e.union) && cellwise,
        format!(
            "{pairs} overlap pairs; CIL last {} vs union last {}; TIL last {} (cellwise >= CIL: {cellwise})",
            pct2(last(&e.cil)),
            pct2(last(&e.union)),
            pct2(last(&e.til))
        ),
    )
}

fn c8_granularity(root: &Path, run: &DefaultRun) -> Outcome {
    let mut cfg = RunConfig::shipped_default()
        .unwrap()
        .with_ablations(&["prototype-granularity=domain"])
        .unwrap();
    cfg.paths = Paths::under(root);
    let (_, _, domain_eval, _, _) = train_and_evaluate(&cfg);
    let category = last(&run.eval.cil);
    let domain = last(&domain_eval.cil);
    check(
        category >= domain,
        format!("CIL last: category {} vs domain {}", pct2(category), pct2(domain)),
    )
}

fn c9_no_forgetting(run: &DefaultRun) -> Outcome {
    let til = &run.eval.til;
    let n = til.n();
    let constant = (0..n).all(|j| (j..n).all(|v| til.get(v, j).to_bits() == til.get(j, j).to_bits()));
    let (f, l) = (forgetting(til), last(til));
    check(
        constant && f == l,
        format!("columns constant below the diagonal: {constant}; forgetting {} last {}", pct2(f), pct2(l)),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn c10_determinism(root: &Path) -> Outcome {
    let mut times = Vec::new();
    for name in ["a", "b"] {
        let t = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_protoprompt"))
            .args(["run", "--seed", "0", "--out"])
            .arg(root.join(name))
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        if !status.success() {
            return Err(format!("run {name} exited with {status}"));
        }
        times.push(t.elapsed());
    }
    let a = read_tree(&root.join("a/reports"));
    let b = read_tree(&root.join("b/reports"));
    let slowest = times.iter().max().unwrap();
    check(
        !a.is_empty() && a == b && *slowest < Duration::from_secs(600),
        format!(
            "{} report files {}; slowest run {:.0}s",
            a.len(),
            if a == b { "byte-identical" } else { "DIFFER" },
            slowest.as_secs_f64()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut shared: Option<DefaultRun> = None;
    let mut failed = 0;

    let mut criterion = |id: usize, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(d), Some(b)) if elapsed > b => Err(format!("{d}; over the {}s budget", b.as_secs())),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {id:>2} {name} ({:.2}s): {detail}", elapsed.as_secs_f64());
        if outcome.is_err() {
            failed += 1;
        }
    };

    let secs = |s| Some(Duration::from_secs(s));
    criterion(1, "forgetting aggregation of the reference Task-ID matrix", secs(1), &mut c1_forgetting_aggregation);
    criterion(2, "transfer and last on reference rows", secs(1), &mut c2_transfer_and_last);
    criterion(3, "metrics against brute-force oracles", secs(5), &mut c3_brute_force);
    criterion(4, "finite-difference check of the training loss", secs(60), &mut c4_gradcheck);
    criterion(5, "zero-shot preservation", secs(120), &mut || c5_zero_shot_preservation(&root.join("default"), &mut shared));
    criterion(6, "prototype Task-ID efficacy", secs(120), &mut c6_discriminator);
    let missing = || Err("needs the default run from criterion 5".to_string());
    criterion(7, "category relatedness: CIL over union, TIL over CIL", secs(300), &mut || {
        shared.as_ref().map_or_else(missing, c7_relatedness)
    });
    criterion(8, "category- vs domain-level prototypes", None, &mut || {
        shared.as_ref().map_or_else(missing, |r| c8_granularity(&root.join("domain"), r))
    });
    criterion(9, "TIL columns constant, forgetting equals last", None, &mut || {
        shared.as_ref().map_or_else(missing, c9_no_forgetting)
    });
    criterion(10, "two full runs give byte-identical reports", None, &mut || c10_determinism(&root.join("cli")));

    if failed > 0 {
        println!("{failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}

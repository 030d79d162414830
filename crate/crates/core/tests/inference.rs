mod common;

use std::sync::OnceLock;

use common::*;
use protoprompt::encoder::zero_shot_classify;
use protoprompt::inference::*;
use protoprompt::metrics::{last, AccuracyMatrix};
use protoprompt::prompt::{normalize_name, PromptPool};
use protoprompt::trainer::{load_checkpoints, sequential_run, TrainConfig};
use protoprompt::Error;

const ORDER: [usize; 4] = [0, 1, 2, 3];

fn snapshots() -> &'static [PromptPool] {
    static S: OnceLock<Vec<PromptPool>> = OnceLock::new();
    S.get_or_init(|| {
        let b = bench();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        sequential_run(&b.enc, &b.data, &ORDER, &cfg, None, None).unwrap().snapshots
    })
}

fn evaluator() -> Evaluator {
    let b = bench();
    Evaluator::new(b.enc.clone(), b.data.templates.clone(), InferenceOptions::default())
}

fn matrices() -> &'static [AccuracyMatrix; 3] {
    static M: OnceLock<[AccuracyMatrix; 3]> = OnceLock::new();
    M.get_or_init(|| {
        let b = bench();
        let mut ev = evaluator();
        [Regime::Cil, Regime::Til, Regime::Union]
            .map(|r| ev.evaluate_matrix(&b.data, &ORDER, snapshots(), r).unwrap())
    })
}

#[test]
fn one_seen_domain_makes_all_regimes_agree() {
    let b = bench();
    let pool = &snapshots()[0];
    let mut ev = evaluator();
    for (i, s) in b.data.domains[0].test.iter().enumerate() {
        let key = Some((0, i));
        let til = ev.classify_til(pool, 0, key, &s.image).unwrap();
        assert_eq!(ev.classify_cil(pool, key, &s.image).unwrap(), til);
        assert_eq!(ev.baseline_union(pool, key, &s.image).unwrap(), til);
    }
}

#[test]
fn correct_routing_reproduces_task_id_given_prediction() {
    let b = bench();
    let pool = snapshots().last().unwrap();
    let mut ev = evaluator();
    let mut routed = 0;
    for &d in &ORDER {
        for (i, s) in b.data.domains[d].test.iter().enumerate() {
            let key = Some((d, i));
            let cil = ev.classify_cil(pool, key, &s.image).unwrap();
            if cil.domain == d {
                routed += 1;
                assert_eq!(cil, ev.classify_til(pool, d, key, &s.image).unwrap());
            }
        }
    }
    assert!(routed > 0);
}

#[test]
fn task_id_given_dominates_predicted() {
    let [cil, til, _] = matrices();
    for u in 0..ORDER.len() {
        for n in 0..=u {
            assert!(til.get(u, n) >= cil.get(u, n), "cell ({u},{n})");
        }
        // Unseen cells do not depend on the regime.
        for n in u + 1..ORDER.len() {
            assert_eq!(til.get(u, n), cil.get(u, n));
        }
    }
}

#[test]
fn empty_pool_falls_back_to_plain_zero_shot() {
    let b = bench();
    let mut ev = evaluator();
    let empty = PromptPool::new();
    let domain = &b.data.domains[2];
    let texts: Vec<Vec<f64>> = domain
        .categories
        .iter()
        .map(|c| ev.zero_shot_text(c).unwrap().as_ref().clone())
        .collect();
    for s in domain.test.iter().take(20) {
        let f = b.enc.image_feature(&s.image).unwrap();
        let want = zero_shot_classify(&f, &texts).unwrap();
        let got = ev.unseen_scores(&empty, &domain.categories, None, &s.image).unwrap();
        assert_eq!(got.0, want.0);
        assert!(got.1.iter().zip(&want.1).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn shared_category_takes_the_larger_score() {
    let b = bench();
    // Domains 1 and 3 share one category name; only domain 1 is in the pool.
    let pool = &snapshots()[1];
    let unseen = &b.data.domains[3];
    let shared = unseen
        .categories
        .iter()
        .position(|c| normalize_name(c) == normalize_name(&b.data.domains[1].categories[2]))
        .unwrap();
    let entry = pool.entry(1).unwrap().clone();
    let mut superset = evaluator();
    let mut components = evaluator();
    components.options.unseen = UnseenFallback::ComponentsOnly;
    for s in unseen.test.iter().take(20) {
        let f = b.enc.image_feature(&s.image).unwrap();
        let zs = dot(&f, &superset.zero_shot_text(&unseen.categories[shared]).unwrap());
        let comp = superset.component_scores(&entry, None, &s.image).unwrap()[2];
        let (_, scores) = superset.unseen_scores(pool, &unseen.categories, None, &s.image).unwrap();
        assert_eq!(scores[shared], zs.max(comp));
        for (j, c) in unseen.categories.iter().enumerate() {
            if j != shared {
                let z = dot(&f, &superset.zero_shot_text(c).unwrap());
                assert_eq!(scores[j], z);
            }
        }
        let (_, only) = components.unseen_scores(pool, &unseen.categories, None, &s.image).unwrap();
        assert_eq!(only[shared], comp);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    protoprompt::util::dot(a, b)
}

#[test]
fn aliased_categories_hurt_the_union_baseline() {
    let [cil, _, union] = matrices();
    assert!(last(cil) > last(union), "{} vs {}", last(cil), last(union));

    // Domain 0 category 1 and domain 2 category 3 look alike under different names.
    let b = bench();
    let pool = snapshots().last().unwrap();
    let mut ev = evaluator();
    let alias = &b.data.domains[0].categories[1];
    let mut misrouted = 0;
    for (i, s) in b.data.domains[2].test.iter().enumerate() {
        if s.label == 3 {
            let p = ev.baseline_union(pool, Some((2, i)), &s.image).unwrap();
            misrouted += usize::from(&p.name == alias);
        }
    }
    assert!(misrouted > 0);
}

// Accuracies recorded from the first correct run, as test-split hit counts.
const GOLDEN_CIL: [[usize; 4]; 4] = [[98, 84, 85, 98], [98, 100, 85, 98], [96, 100, 81, 98], [96, 95, 81, 100]];
const GOLDEN_TIL: [[usize; 4]; 4] = [[98, 84, 85, 98], [98, 100, 85, 98], [98, 100, 96, 98], [98, 100, 96, 100]];
const GOLDEN_UNION: [[usize; 4]; 4] = [[98, 84, 85, 98], [98, 100, 85, 98], [98, 100, 69, 98], [97, 100, 68, 77]];

fn hits(m: &AccuracyMatrix, per_domain: usize) -> [[usize; 4]; 4] {
    let mut out = [[0; 4]; 4];
    for (u, row) in out.iter_mut().enumerate() {
        for (n, v) in row.iter_mut().enumerate() {
            *v = (m.get(u, n) * per_domain as f64).round() as usize;
        }
    }
    out
}

#[test]
fn golden_accuracy_matrices() {
    let b = bench();
    let per = b.data.domains[0].test.len();
    let [cil, til, union] = matrices();
    let got = [hits(cil, per), hits(til, per), hits(union, per)];
    assert_eq!(got, [GOLDEN_CIL, GOLDEN_TIL, GOLDEN_UNION]);
}

#[test]
fn missing_checkpoint_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoints(dir.path(), 1), Err(Error::NotFound(_))));
    let b = bench();
    let mut ev = evaluator();
    let e = ev.evaluate_matrix(&b.data, &ORDER, &snapshots()[..2], Regime::Cil).unwrap_err();
    assert!(matches!(e, Error::Contract(_)));
}

#![allow(dead_code)]

use std::sync::OnceLock;

use protoprompt::datagen::{generate, BenchmarkSpec, SyntheticDataset};
use protoprompt::encoder::{DualEncoder, EncoderConfig, FrozenWeights};
use protoprompt::pretrain::{pretrain_encoders, PretrainConfig};
use protoprompt::prompt::{BlockMode, ComponentMeta, DomainComponent};
use protoprompt::prototype::{Granularity, PrototypeKind};

pub struct Bench {
    pub data: SyntheticDataset,
    pub enc: DualEncoder,
}

/// Default benchmark with a pretrained encoder, built once per test binary.
pub fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let data = generate(&BenchmarkSpec::default()).unwrap();
        let w = FrozenWeights::initialize(&EncoderConfig::default(), &data.lexicon, 0).unwrap();
        let (w, _) = pretrain_encoders(w, &data.pretext, &data.templates, &PretrainConfig::default()).unwrap();
        Bench {
            data,
            enc: DualEncoder::new(w),
        }
    })
}

/// Default benchmark with randomly initialized (not pretrained) weights.
pub fn raw() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let data = generate(&BenchmarkSpec::default()).unwrap();
        let w = FrozenWeights::initialize(&EncoderConfig::default(), &data.lexicon, 0).unwrap();
        Bench {
            data,
            enc: DualEncoder::new(w),
        }
    })
}

pub fn meta(mode: BlockMode) -> ComponentMeta {
    ComponentMeta {
        epochs: 1,
        seed: 5,
        mode,
        replace_depth: 4,
        prompt_len: 1,
        prototype_kind: PrototypeKind::Combined,
        granularity: Granularity::Category,
    }
}

pub fn component(domain: usize, categories: Vec<String>, mode: BlockMode) -> DomainComponent {
    DomainComponent::init(domain, &format!("domain-{}", domain + 1), categories, 64, meta(mode)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

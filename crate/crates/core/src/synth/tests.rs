use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::cmal::{train_step_teacher, Adam, AdamConfig, XeExample};
use crate::model::{Model, ModelConfig, PERIOD};

fn small_sizes() -> SplitSizes {
    SplitSizes {
        train: 40,
        val: 10,
        test: 10,
        unlabeled: 30,
    }
}

#[test]
fn vocabulary_has_no_duplicates_and_reserved_ids() {
    let set: HashSet<_> = VOCAB.iter().collect();
    assert_eq!(set.len(), VOCAB.len());
    assert_eq!(token("."), PERIOD);
    assert_eq!(VOCAB.len(), ModelConfig::default().vocab_size);
}

#[test]
fn generation_is_deterministic_and_round_trips() {
    let cfg = GrammarConfig::default();
    let a = Dataset::generate(7, small_sizes(), cfg.clone()).unwrap();
    let b = Dataset::generate(7, small_sizes(), cfg.clone()).unwrap();
    assert_eq!(a, b);
    let c = Dataset::generate(8, small_sizes(), cfg).unwrap();
    assert_ne!(a.records, c.records);

    let mut buf = Vec::new();
    a.write(&mut buf).unwrap();
    let back = Dataset::read(buf.as_slice()).unwrap();
    assert_eq!(a, back);
    let mut again = Vec::new();
    back.write(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn references_parse_back_to_their_scene() {
    let cfg = GrammarConfig::default();
    let ds = Dataset::generate(3, small_sizes(), cfg.clone()).unwrap();
    for r in &ds.records {
        if r.split == Split::Unlabeled {
            assert!(r.references.is_empty());
            continue;
        }
        assert_eq!(r.references.len(), cfg.refs_per_image);
        let distinct: HashSet<_> = r.references.iter().collect();
        assert_eq!(distinct.len(), r.references.len());
        for refr in &r.references {
            assert!(refr.len() <= cfg.max_len);
            assert_eq!(refr.last(), Some(&PERIOD));
            assert_eq!(refr.iter().filter(|&&t| t == PERIOD).count(), 1);
            assert_eq!(parse(refr).as_ref(), Some(&r.scene), "{}", render(refr));
        }
        assert_eq!(r.image.num_regions(), cfg.num_regions);
        assert_eq!(r.image.feature_dim(), cfg.feature_dim);
    }
}

#[test]
fn splits_are_disjoint_and_unlabeled_avoids_held_out_scenes() {
    let ds = Dataset::generate(11, small_sizes(), GrammarConfig::default()).unwrap();
    let scenes = |s| ds.split(s).into_iter().map(|r| r.scene.clone()).collect::<HashSet<_>>();
    let (train, val, test, unl) = (scenes(Split::Train), scenes(Split::Val), scenes(Split::Test), scenes(Split::Unlabeled));
    assert_eq!(train.len(), 40);
    assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    assert!(unl.is_disjoint(&val) && unl.is_disjoint(&test));
    let ids: HashSet<_> = ds.records.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), ds.records.len());
}

#[test]
fn degenerate_requests_are_rejected() {
    let cfg = GrammarConfig::default();
    let empty = SplitSizes {
        train: 0,
        val: 0,
        test: 0,
        unlabeled: 5,
    };
    assert!(generate_dataset(1, empty, &cfg).is_err());
    let greedy_refs = GrammarConfig {
        refs_per_image: 10_000,
        ..cfg.clone()
    };
    assert!(greedy_refs.validate().is_err());
    let short = GrammarConfig { max_len: 4, ..cfg };
    assert!(short.validate().is_err());
}

#[test]
fn unparseable_captions_are_rejected() {
    assert_eq!(parse(&[PERIOD]), None);
    let no_period: Vec<_> = ["a", "red", "dog"].iter().map(|w| token(w)).collect();
    assert_eq!(parse(&no_period), None);
    let garbled: Vec<_> = ["a", "dog", "red", "."].iter().map(|w| token(w)).collect();
    assert_eq!(parse(&garbled), None);
    let ok: Vec<_> = ["a", "photo", "of", "a", "red", "dog", "next", "to", "a", "small", "cat", "."]
        .iter()
        .map(|w| token(w))
        .collect();
    let scene = parse(&ok).unwrap();
    assert_eq!(scene.objects.len(), 2);
    assert_eq!(scene.objects[1].relation, Some(2));
}

#[test]
fn pseudo_captions_round_trip_and_close_with_a_period() {
    assert_eq!(close_caption(vec![5, 6, PERIOD, 7], 4), vec![5, 6, PERIOD]);
    assert_eq!(close_caption(vec![5, 6, 7, 8], 4), vec![5, 6, 7, PERIOD]);

    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 16,
        num_agents: 16,
        ..ModelConfig::default()
    };
    let teacher = Model::init(cfg, 5).unwrap();
    let ds = Dataset::generate(2, small_sizes(), GrammarConfig::default()).unwrap();
    let images: Vec<_> = ds.records.iter().take(3).map(|r| (r.id.clone(), &r.image)).collect();
    let pc = distill(&teacher, &images, 2, 6).unwrap();
    assert_eq!(pc.teacher_sha256, teacher_checksum(&teacher));
    assert_eq!(pc.teacher_sha256.len(), 64);
    for (_, c) in &pc.captions {
        assert!(c.len() <= 6 && c.last() == Some(&PERIOD));
    }
    let mut buf = Vec::new();
    pc.write(&mut buf).unwrap();
    assert_eq!(PseudoCaptions::read(buf.as_slice()).unwrap(), pc);
}

#[test]
fn beam_width_one_matches_greedy() {
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 16,
        ..ModelConfig::default()
    };
    let ds = Dataset::generate(4, small_sizes(), GrammarConfig::default()).unwrap();
    for seed in 0..3 {
        let m = Model::init(cfg.clone(), seed).unwrap();
        for r in ds.records.iter().take(3) {
            let ctx = m.encode(&r.image).unwrap();
            let greedy = m.decode_ar_greedy(&ctx, 8).unwrap();
            let beam = m.decode_ar_beam(&ctx, 1, 8).unwrap();
            assert_eq!(beam.tokens, greedy);
        }
    }
}

#[test]
fn teacher_overfits_a_single_image() {
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 32,
        num_heads: 2,
        ffn_dim: 32,
        ..ModelConfig::default()
    };
    let ds = Dataset::generate(9, small_sizes(), GrammarConfig::default()).unwrap();
    let rec = &ds.records[0];
    let caption = rec.references[0].clone();
    let mut teacher = Model::init(cfg, 1).unwrap();
    let mut opt = Adam::new(AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    })
    .unwrap();
    let batch = [XeExample {
        features: &rec.image,
        target: &caption,
    }];
    let mut loss = f64::INFINITY;
    for _ in 0..150 {
        loss = train_step_teacher(&mut teacher, &batch, &mut opt).unwrap().loss;
    }
    assert!(loss < 0.05, "teacher loss {loss}");
    let ctx = teacher.encode(&rec.image).unwrap();
    assert_eq!(teacher.decode_ar_beam(&ctx, 3, 16).unwrap().tokens, caption);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_phrasing_parses_to_its_scene(
        ents in prop::collection::vec(0usize..15, 1..=3),
        attrs in prop::collection::vec(0usize..10, 3),
        rels in prop::collection::vec(0usize..6, 3),
    ) {
        let scene = SceneDescriptor {
            objects: ents.iter().enumerate().map(|(i, &e)| SceneObject {
                entity: e,
                attribute: attrs[i],
                relation: (i > 0).then_some(rels[i]),
            }).collect(),
        };
        prop_assert!(scene.validate().is_ok());
        let all = phrasings(&scene, 16);
        prop_assert!(all.len() >= GrammarConfig::default().refs_per_image);
        for p in &all {
            prop_assert!(p.len() <= 16);
            prop_assert_eq!(parse(p), Some(scene.clone()));
        }
    }
}

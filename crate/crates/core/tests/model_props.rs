//! Loss, label collapse, schedule and optimiser properties; bit-identical
//! training resume through a checkpoint; generated dataset invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcvn::datagen::{build_dataset, read_dataset, write_dataset, DatasetConfig, Generator, Split, MAX_PRONGS};
use tcvn::io::{config_hash, Checkpoint};
use tcvn::model::{
    adamw_step, collapse_event, collapse_prong, cross_entropy, focal_loss, train_epoch, AdamState, CosineWarmRestarts,
    EventClass, EventFlavor, ModelConfig, ProngClass, TrainConfig, TrainState, TransformerCvn,
};
use tcvn::sparse::{CnnConfig, View};
use tcvn::transformer::TransformerConfig;
use tcvn::{ParamStore, Tensor};

fn distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn focal_at_gamma_zero_is_cross_entropy(seed in any::<u64>(), rows in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs: Vec<Vec<f64>> = (0..rows).map(|_| distribution(&mut rng, 9)).collect();
        let t: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..9)).collect();
        let f = focal_loss(&probs, &t, 0.0).unwrap().value;
        prop_assert!((f - cross_entropy(&probs, &t).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_shrinks_with_gamma(seed in any::<u64>(), g in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = vec![distribution(&mut rng, 9)];
        let t = [rng.gen_range(0..9)];
        let a = focal_loss(&probs, &t, g).unwrap().value;
        let b = focal_loss(&probs, &t, g + 0.5).unwrap().value;
        prop_assert!(b <= a + 1e-15 && b >= 0.0);
    }

    #[test]
    fn event_collapse_conserves_mass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = distribution(&mut rng, 10);
        let c = collapse_event(&p).unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for f in EventFlavor::ALL {
            let want: f64 = EventClass::ALL.iter().zip(&p).filter(|(e, _)| e.flavor() == f).map(|(_, x)| x).sum();
            prop_assert!((c[f.index()] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn prong_collapse_renormalizes_the_retained_mass(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = distribution(&mut rng, 9);
        let c = collapse_prong(&p).unwrap().unwrap();
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let kept = 1.0 - p[ProngClass::Other.index()] - p[ProngClass::Cosmic.index()];
        let gamma = p[ProngClass::PhotonNeutron.index()] + p[ProngClass::PhotonPi0.index()] + p[ProngClass::PhotonOther.index()];
        prop_assert!((c[3] - gamma / kept).abs() < 1e-12);
        prop_assert!((c[1] - p[ProngClass::Muon.index()] / kept).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_periodic_and_bounded(t in 0.0f64..1024.0) {
        let s = CosineWarmRestarts::new(1e-5, 0.0, 1024.0, 16).unwrap();
        let lr = s.lr(t);
        prop_assert!((0.0..=1e-5).contains(&lr));
        prop_assert!((lr - s.lr(t + 64.0)).abs() < 1e-18);
    }
}

#[test]
fn prong_collapse_example() {
    let p = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.15, 0.15];
    let c = collapse_prong(&p).unwrap().unwrap();
    let want = [1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 3.0 / 7.0, 1.0 / 7.0];
    for (a, b) in c.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn schedule_landmarks_of_the_published_settings() {
    let s = CosineWarmRestarts::new(1e-5, 0.0, 1024.0, 16).unwrap();
    assert_eq!(s.cycle_length(), 64.0);
    assert_eq!(s.lr(0.0), 1e-5);
    assert!(s.lr(64.0 - 1e-9) < 1e-20);
    assert!((s.lr(32.0) - 5e-6).abs() < 1e-18);
    assert_eq!(s.lr(64.0), 1e-5);
}

/// Scalar AdamW written out from the update equations.
fn adamw_reference(mut w: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w = w - lr * wd * w - lr * mh / (vh.sqrt() + eps);
    }
    w
}

proptest! {
    #[test]
    fn adamw_matches_scalar_reference(w0 in -3.0f64..3.0, gs in prop::collection::vec(-2.0f64..2.0, 1..12), lr in 1e-4f64..1e-1, wd in 0.0f64..0.1) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![w0])).unwrap();
        let mut state = AdamState::default();
        for g in &gs {
            let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::vector(vec![*g]))].into();
            adamw_step(&mut store, &grads, &mut state, lr, wd).unwrap();
        }
        let want = adamw_reference(w0, &gs, lr, wd);
        prop_assert!((store.get("w").unwrap().data()[0] - want).abs() < 1e-12);
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        cnn: CnnConfig {
            stem_channels: 4,
            blocks: 1,
            layers_per_block: 1,
            growth: 4,
            embedding_dim: 8,
            ..Default::default()
        },
        transformer: TransformerConfig {
            model_dim: 8,
            layers: 1,
            heads: 2,
            type_dim: 4,
            ff_mult: 2,
        },
        head_hidden: 8,
        context: true,
    }
}

#[test]
fn resume_through_a_checkpoint_is_bit_identical() {
    let mc = tiny_config();
    let model = TransformerCvn::new(mc.clone()).unwrap();
    let g = Generator::default();
    let events: Vec<_> = (0..24u64).map(|i| g.generate_seeded(500 + i, EventClass::ALL[i as usize % 10])).collect();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        annealing_epochs: 3.0,
        annealing_cycles: 1,
        batch_size: 8,
        chunk_size: 3,
        epochs: 3,
        ..Default::default()
    };
    let start = TrainState::new(model.init_params(1).unwrap());

    let mut straight = start.clone();
    for _ in 0..3 {
        train_epoch(&model, &mut straight, &events, None, &tc, 7).unwrap();
    }

    let mut first = start;
    train_epoch(&model, &mut first, &events, None, &tc, 7).unwrap();
    let ck = Checkpoint {
        config_hash: config_hash(&mc, &tc),
        model: mc,
        state: first,
    };
    let mut resumed = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().state;
    for _ in 0..2 {
        train_epoch(&model, &mut resumed, &events, None, &tc, 7).unwrap();
    }
    assert_eq!(resumed, straight);
}

#[test]
fn generated_dataset_invariants_and_round_trip() {
    let cfg = DatasetConfig {
        seed: 3,
        train: 120,
        val: 30,
        test: 30,
        cosmic_fraction: 0.1,
    };
    let gen = Generator::default();
    let (data, manifest) = build_dataset(&cfg, &gen).unwrap();
    let (again, _) = build_dataset(&cfg, &gen).unwrap();
    assert_eq!(data, again);
    for s in Split::ALL {
        let evs = data.split(s);
        assert_eq!(evs.len(), cfg.size(s));
        let cosmics = evs.iter().filter(|e| e.label == EventClass::Cosmic).count();
        assert_eq!(cosmics, (cfg.size(s) as f64 * 0.1).floor() as usize);
        for e in evs {
            e.validate().unwrap();
            assert!(e.prongs.len() <= MAX_PRONGS);
            for v in View::BOTH {
                assert!(e.event_map.hits(v).iter().all(|h| h.intensity > 0));
            }
        }
    }
    assert_eq!(manifest.splits.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.jsonl");
    write_dataset(&path, Split::Test, gen.planes, gen.cells, &data.test).unwrap();
    let (header, back) = read_dataset(&path).unwrap();
    assert_eq!(back, data.test);
    assert_eq!((header.planes, header.cells), (gen.planes, gen.cells));
}

#[test]
fn different_seeds_give_different_datasets() {
    let gen = Generator::default();
    let mut cfg = DatasetConfig {
        seed: 1,
        train: 20,
        val: 0,
        test: 0,
        cosmic_fraction: 0.0,
    };
    let (a, _) = build_dataset(&cfg, &gen).unwrap();
    cfg.seed = 2;
    let (b, _) = build_dataset(&cfg, &gen).unwrap();
    assert_ne!(a.train, b.train);
}

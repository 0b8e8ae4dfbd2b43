//! End-to-end gradient checks, input saliency against finite differences,
//! and permutation equivariance of the full model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcvn::datagen::{Event, Generator};
use tcvn::interpret::{dense_input, saliency, ModelProbe, SaliencyModel};
use tcvn::model::{EventClass, Head, ModelConfig, SaliencyTarget, TransformerCvn};
use tcvn::sparse::{CnnConfig, View};
use tcvn::tensor::check_gradients;
use tcvn::transformer::TransformerConfig;

fn tiny(context: bool) -> TransformerCvn {
    TransformerCvn::new(ModelConfig {
        cnn: CnnConfig {
            stem_channels: 4,
            blocks: 1,
            layers_per_block: 2,
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
        context,
    })
    .unwrap()
}

fn events(n: usize, seed: u64) -> Vec<Event> {
    let g = Generator::default();
    (0..n as u64)
        .map(|i| g.generate_seeded(seed + i, EventClass::ALL[(seed + i) as usize % EventClass::COUNT]))
        .collect()
}

/// Zero-initialized biases put pre-activations of empty neighbourhoods
/// exactly on the ReLU kink, where central differences see half a slope.
/// Jittering the biases moves the check to a differentiable point.
fn generic_point(mut store: tcvn::ParamStore) -> tcvn::ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, t) in store.iter_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        }
    }
    store
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    for context in [true, false] {
        let model = tiny(context);
        let store = generic_point(model.init_params(21).unwrap());
        let evs = events(2, 40);
        let refs: Vec<&Event> = evs.iter().collect();
        let report = check_gradients(
            &store,
            |g, p| Ok(model.loss_graph(g, p, &refs, 1.0, refs.len() as f64)?.0),
            1e-6,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.passed(), "context={context}: max relative error {}", report.max_error());
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

fn pure_relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn saliency_matches_finite_differences() {
    let model = TransformerCvn::new(ModelConfig::default()).unwrap();
    let store = model.init_params(5).unwrap();
    let ev = Generator::default().generate_seeded(77, EventClass::NumuCcQe);
    let (planes, cells) = (ev.event_map.planes(), ev.event_map.cells());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (head, map) in [(Head::Prong(0), 1), (Head::Event, 0)] {
        let target = SaliencyTarget {
            head,
            classes: vec![1],
            logits: false,
            map,
        };
        let input = if map == 0 { &ev.event_map } else { &ev.prongs[0].map };
        let grids = dense_input(input);
        let (_, grad) = model.output_gradient(&store, &ev, &target, &grids).unwrap();
        // ten active pixels and ten of their inactive neighbours
        let hits = input.hits(View::X);
        let mut picks = Vec::new();
        for _ in 0..10 {
            let h = hits[rng.gen_range(0..hits.len())];
            picks.push(h.cell as usize * planes + h.plane as usize);
        }
        while picks.len() < 20 {
            let h = hits[rng.gen_range(0..hits.len())];
            let (p, c) = (h.plane as i64 + rng.gen_range(-1..=1), h.cell as i64 + rng.gen_range(-1..=1));
            if (0..planes as i64).contains(&p) && (0..cells as i64).contains(&c) && !input.contains(View::X, p as u16, c as u16) {
                picks.push(c as usize * planes + p as usize);
            }
        }
        let eps = 1e-6;
        let mut nonzero = 0;
        for &i in &picks {
            let eval = |delta: f64| {
                let mut g = grids.clone();
                g[0][i] += delta;
                model.output_gradient(&store, &ev, &target, &g).unwrap().0
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(pure_relative(grad[0][i], fd) < 1e-4, "pixel {i}: analytic {} numeric {fd}", grad[0][i]);
            if grad[0][i] != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero >= 15);
    }
}

#[test]
fn probe_returns_one_map_per_prong_label() {
    let model = tiny(true);
    let store = model.init_params(6).unwrap();
    let ev = Generator::default().generate_seeded(8, EventClass::NueCcRes);
    let probe = ModelProbe::prong_outputs(&model, &store, &ev, 0, false);
    assert_eq!(probe.num_outputs(), 9);
    let maps = saliency(&probe, 100, 80, &dense_input(&ev.prongs[0].map)).unwrap();
    assert_eq!(maps.len(), 9);
    // probabilities sum to one, so the nine gradients cancel
    let total: f64 = (0..100 * 80).map(|i| maps.iter().map(|m| m.views[0][i]).sum::<f64>().abs()).sum();
    assert!(total < 1e-12);
}

#[test]
fn prong_permutation_equivariance_100_events() {
    let model = TransformerCvn::new(ModelConfig::default()).unwrap();
    let store = model.init_params(9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = Generator::default();
    let mut checked = 0;
    for i in 0..100u64 {
        let ev = g.generate_seeded(1000 + i, EventClass::ALL[i as usize % EventClass::COUNT]);
        let mut perm: Vec<usize> = (0..ev.prongs.len()).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = ev.clone();
        shuffled.prongs = perm.iter().map(|&j| ev.prongs[j].clone()).collect();
        let a = model.forward(&store, &ev).unwrap();
        let b = model.forward(&store, &shuffled).unwrap();
        for (x, y) in a.event_logits.iter().zip(&b.event_logits) {
            assert!((x - y).abs() < 1e-9);
        }
        for (k, &j) in perm.iter().enumerate() {
            for (x, y) in b.prong_logits[k].iter().zip(&a.prong_logits[j]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        checked += ev.prongs.len();
    }
    assert!(checked > 100);
}

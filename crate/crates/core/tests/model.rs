mod support;

use bindattn_core::channels::Channels;
use bindattn_core::model::{
    decode, forward, init_state, layout_for, palette_color, sample, sample_from, sample_traced, PassCounter,
};
use bindattn_core::{default_schedule, BindingMode, BindingSchedule, Error, ModelConfig, ModelWeights, WeightMode};
use support::{canonical, layout_of, random_scene};

fn small() -> ModelConfig {
    ModelConfig { layers: 3, steps: 2, ..ModelConfig::default() }
}

#[test]
fn init_is_deterministic_and_bridges_copy_their_sources() {
    for seed in 0..10 {
        let scene = random_scene(seed, 4, 5);
        let cfg = ModelConfig::default();
        let layout = layout_of(&scene, &cfg);
        let a = init_state(&scene, &layout, &cfg).unwrap();
        let b = init_state(&scene, &layout, &cfg).unwrap();
        assert!(a.x.bit_eq(&b.x));
        assert_eq!(a.t, 1.0);
        for i in 0..layout.instances.len() {
            for (bt, src) in layout.bridge_pairs(i) {
                assert_eq!(a.x.row(bt), a.x.row(src));
            }
        }
    }
}

#[test]
fn scene_seed_changes_the_noise() {
    let cfg = ModelConfig::default();
    let mut s7 = canonical();
    let mut s8 = canonical();
    s7.seed = 7;
    s8.seed = 8;
    let layout = layout_of(&s7, &cfg);
    let a = init_state(&s7, &layout, &cfg).unwrap();
    let b = init_state(&s8, &layout, &cfg).unwrap();
    assert!(!a.image_rows().bit_eq(&b.image_rows()));
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = default_schedule(cfg.layers, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let fa = sample(&s7, &w, &sched, &cfg).unwrap();
    let fb = sample(&s8, &w, &sched, &cfg).unwrap();
    assert!(!fa.image_rows().bit_eq(&fb.image_rows()));
}

#[test]
fn one_step_is_one_euler_update() {
    let scene = canonical();
    let cfg = ModelConfig { steps: 1, ..small() };
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = BindingSchedule::parse("SHS", 3).unwrap();
    let layout = layout_for(&scene, &sched, &cfg).unwrap();
    let x0 = init_state(&scene, &layout, &cfg).unwrap();
    let v = forward(&x0, &w, &sched, &cfg).unwrap().velocity;
    let out = sample(&scene, &w, &sched, &cfg).unwrap();
    assert_eq!(out.t, 0.0);
    for (n, tok) in layout.image.clone().enumerate() {
        for c in 0..cfg.dim {
            assert_eq!(out.x.get(tok, c), x0.x.get(tok, c) - v.get(n, c));
        }
    }
    for t in 0..layout.image.start {
        assert_eq!(out.x.row(t), x0.x.row(t), "text rows stay fixed");
    }
}

#[test]
fn guidance_doubles_the_passes() {
    let scene = canonical();
    let sched = BindingSchedule::uniform(BindingMode::SoftImage, 3);
    for (scale, uncond) in [(0.0, 0), (3.0, 4)] {
        let cfg = ModelConfig { steps: 4, cfg_scale: scale, ..small() };
        let w = ModelWeights::from_config(&cfg).unwrap();
        let mut count = PassCounter::default();
        sample_traced(&scene, &w, &sched, &cfg, &mut count).unwrap();
        assert_eq!(count, PassCounter { conditional: 4, unconditional: uncond });
    }
}

#[test]
fn guidance_scale_one_matches_unguided() {
    let scene = canonical();
    let sched = BindingSchedule::uniform(BindingMode::HardImage, 3);
    let base = small();
    let w = ModelWeights::from_config(&base).unwrap();
    let plain = sample(&scene, &w, &sched, &base).unwrap();
    let guided = sample(&scene, &w, &sched, &ModelConfig { cfg_scale: 1.0, ..base.clone() }).unwrap();
    for (a, b) in plain.image_rows().data().iter().zip(guided.image_rows().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_weights_stay_finite_at_default_size() {
    let cfg = ModelConfig::default();
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = default_schedule(cfg.layers, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    for seed in 0..5 {
        let out = sample(&random_scene(seed, 6, 6), &w, &sched, &cfg).unwrap();
        assert!(out.x.is_finite());
    }
}

#[test]
fn blow_up_reports_the_step() {
    let scene = canonical();
    let cfg = small();
    let mut w = ModelWeights::from_config(&cfg).unwrap();
    for j in 0..cfg.dim {
        w.velocity_head.set(j, j, 1e308);
    }
    let err = sample(&scene, &w, &BindingSchedule::uniform(BindingMode::SoftImage, 3), &cfg).unwrap_err();
    assert!(matches!(err, Error::NumericalDivergence { step: 0 }), "{err:?}");
}

#[test]
fn routing_velocity_points_away_from_the_attribute() {
    let scene = canonical();
    let cfg = ModelConfig { weight_mode: WeightMode::routing_middle(12), ..ModelConfig::default() };
    let ch = cfg.channels().unwrap();
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = default_schedule(12, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let layout = layout_for(&scene, &sched, &cfg).unwrap();
    let x0 = init_state(&scene, &layout, &cfg).unwrap();
    let v = forward(&x0, &w, &sched, &cfg).unwrap().velocity;
    // A owns cells 0 and 1; x ← x − v/N moves them toward "red".
    let red = ch.attribute().start + ch.tag_slot("red");
    for cell in 0..2 {
        assert!(v.get(cell, red) < 0.0);
        for j in ch.attribute() {
            if j != red {
                assert_eq!(v.get(cell, j), 0.0);
            }
        }
    }
}

#[test]
fn decode_shape_gray_and_hue() {
    let scene = canonical();
    let cfg = ModelConfig { weight_mode: WeightMode::routing_middle(12), ..ModelConfig::default() };
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = default_schedule(12, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let out = sample(&scene, &w, &sched, &cfg).unwrap();
    let img = decode(&out, &w, 3).unwrap();
    assert_eq!((img.width, img.height, img.pixels.len()), (6, 6, 108));

    // Zero decode head is mid-gray.
    let gray = decode(&out, &ModelWeights::zeros(cfg.dim, cfg.heads, cfg.layers), 1).unwrap();
    assert!(gray.pixels.iter().all(|&p| p == 128));

    // Region A shows the palette hue of "red" up to a positive scale around gray.
    let ch = Channels::for_dim(cfg.dim).unwrap();
    let want = palette_color(ch.tag_slot("red"), ch.attribute_width());
    let px = img.pixel(0, 0);
    let got: Vec<f64> = px.iter().map(|&p| (p as f64 - 127.5) / 127.5).collect();
    let scale = got.iter().zip(&want).map(|(g, w)| g * w).sum::<f64>() / want.iter().map(|w| w * w).sum::<f64>();
    assert!(scale > 0.0);
    for (g, w) in got.iter().zip(&want) {
        assert!(((g - scale * w) * 127.5).abs() <= 2.0, "{px:?} vs {want:?}");
    }
    assert!(decode(&init_state(&scene, &out.layout, &cfg).unwrap(), &w, 1).is_err());
}

#[test]
fn thread_count_does_not_change_the_sample() {
    let scene = random_scene(3, 5, 6);
    let cfg = ModelConfig { steps: 3, ..ModelConfig::default() };
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = default_schedule(cfg.layers, 1.0 / 3.0, 2.0 / 3.0).unwrap();
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| sample(&scene, &w, &sched, &cfg).unwrap())
    };
    assert!(run(1).x.bit_eq(&run(4).x));
}

#[test]
fn sample_from_continues_from_any_state() {
    let scene = canonical();
    let cfg = small();
    let w = ModelWeights::from_config(&cfg).unwrap();
    let sched = BindingSchedule::uniform(BindingMode::HardImage, 3);
    let layout = layout_for(&scene, &sched, &cfg).unwrap();
    let a = sample_from(init_state(&scene, &layout, &cfg).unwrap(), &w, &sched, &cfg, &mut ()).unwrap();
    let b = sample(&scene, &w, &sched, &cfg).unwrap();
    assert!(a.x.bit_eq(&b.x));
}

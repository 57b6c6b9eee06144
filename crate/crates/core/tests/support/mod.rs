//! Shared helpers for integration tests: seeded scene generation and a brute-force
//! mask evaluator written from the role-set definitions.
#![allow(dead_code)]

use std::collections::HashSet;

use bindattn_core::maskgen::{hard_image_predicate, soft_image_predicate, text_binding_predicate};
use bindattn_core::scene::{build_token_layout, rasterize_and_assign, Grid, InstanceSpec, Region, TokenRole};
use bindattn_core::{BindingMode, BindingSchedule, LayerMask, ModelConfig, RngStream, SceneSpec, TokenLayout};

pub const TAGS: [&str; 12] =
    ["red", "blue", "green", "gold", "violet", "striped", "wooden", "glass", "furry", "tiny", "shiny", "dotted"];

pub const CANONICAL: &str = r#"{"grid":{"h":2,"w":2},"global_tags":["garden"],"seed":7,"instances":[
    {"id":"A","tags":["red"],"region":{"bbox":[0,0,0,1]}},
    {"id":"B","tags":["blue"],"region":{"bbox":[1,0,1,1]}}]}"#;

pub fn canonical() -> SceneSpec {
    bindattn_core::parse_scene(CANONICAL).unwrap()
}

fn below(rng: &mut RngStream, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// A valid scene with up to `max_instances` instances on a grid of side `<= max_side`.
/// Regions are boxes or scattered cells; occluded instances are dropped.
pub fn random_scene(seed: u64, max_instances: usize, max_side: usize) -> SceneSpec {
    let mut rng = RngStream::new(seed, "test-scene");
    let grid = Grid { h: 1 + below(&mut rng, max_side), w: 1 + below(&mut rng, max_side) };
    let n = 1 + below(&mut rng, max_instances.min(grid.cells()));
    let global_tags = (0..below(&mut rng, 3)).map(|_| TAGS[below(&mut rng, TAGS.len())].to_string()).collect();
    let mut instances = Vec::new();
    for k in 0..n {
        let region = if below(&mut rng, 2) == 0 {
            let (r0, c0) = (below(&mut rng, grid.h), below(&mut rng, grid.w));
            let (r1, c1) = (r0 + below(&mut rng, grid.h - r0), c0 + below(&mut rng, grid.w - c0));
            Region::Bbox([r0, c0, r1, c1])
        } else {
            let m = 1 + below(&mut rng, 4);
            let mut cells: Vec<[usize; 2]> =
                (0..m).map(|_| [below(&mut rng, grid.h), below(&mut rng, grid.w)]).collect();
            cells.sort();
            cells.dedup();
            Region::Cells(cells)
        };
        let tags = (0..1 + below(&mut rng, 2)).map(|_| TAGS[below(&mut rng, TAGS.len())].to_string()).collect();
        instances.push(InstanceSpec { id: format!("obj{k}"), z: below(&mut rng, 3) as i64, tags, region });
    }
    let control = if below(&mut rng, 2) == 0 {
        Some((0..grid.h).map(|_| (0..grid.w).map(|_| (rng.next_u64() % 1000) as f64 / 999.0).collect()).collect())
    } else {
        None
    };
    let mut scene = SceneSpec { grid, global_tags, seed: rng.next_u64() % 10_000, control, instances };
    // Drop instances that lose every cell to higher layers.
    while let Err(bindattn_core::Error::EmptyInstanceRegion(id)) = rasterize_and_assign(&scene) {
        scene.instances.retain(|i| i.id != id);
    }
    scene.validate().unwrap();
    scene
}

pub fn layout_of(scene: &SceneSpec, cfg: &ModelConfig) -> TokenLayout {
    let a = rasterize_and_assign(scene).unwrap();
    build_token_layout(scene, &a, cfg.text_len_per_tag, cfg.global_text_len(scene)).unwrap()
}

struct Sets {
    global: HashSet<usize>,
    text: Vec<HashSet<usize>>,
    image: Vec<HashSet<usize>>,
    bridge: Vec<HashSet<usize>>,
    all_image: HashSet<usize>,
    background: HashSet<usize>,
}

fn sets(layout: &TokenLayout) -> Sets {
    let n = layout.instances.len();
    let mut s = Sets {
        global: HashSet::new(),
        text: vec![HashSet::new(); n],
        image: vec![HashSet::new(); n],
        bridge: vec![HashSet::new(); n],
        all_image: HashSet::new(),
        background: HashSet::new(),
    };
    for (t, role) in layout.roles.iter().enumerate() {
        match *role {
            TokenRole::GlobalText => {
                s.global.insert(t);
            }
            TokenRole::InstanceText(i) => {
                s.text[i].insert(t);
            }
            TokenRole::Image { owner, .. } => {
                s.all_image.insert(t);
                match owner {
                    Some(i) => s.image[i].insert(t),
                    None => s.background.insert(t),
                };
            }
            TokenRole::Bridge { instance, .. } => {
                s.bridge[instance].insert(t);
            }
        }
    }
    s
}

/// Evaluates every `(q, k)` pair independently from the binding predicates and
/// policy flags.
pub fn brute_force_mask(layout: &TokenLayout, schedule: &BindingSchedule, layer: usize) -> LayerMask {
    let s = sets(layout);
    let mode = schedule.mode(layer);
    let p = schedule.policy;
    let text_binding = p.text_binding_enabled && mode != BindingMode::NaiveIsolation;
    let n = layout.seq_len;
    let mut rows = vec![vec![false; n]; n];
    for (q, row) in rows.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            let allowed = if q == k {
                true
            } else if s.global.contains(&q) {
                s.global.contains(&k) || s.all_image.contains(&k)
            } else if s.background.contains(&q) {
                let images = if mode == BindingMode::SoftImage || p.background_soft_in_hard_layers {
                    &s.all_image
                } else {
                    &s.background
                };
                s.global.contains(&k) || images.contains(&k)
            } else {
                let i = (0..layout.instances.len())
                    .find(|&i| s.text[i].contains(&q) || s.image[i].contains(&q) || s.bridge[i].contains(&q))
                    .expect("every token has a role");
                let id = &layout.instances[i].id;
                if s.text[i].contains(&q) {
                    if text_binding {
                        text_binding_predicate(layout, id, q, k).unwrap()
                    } else {
                        s.text[i].contains(&k) || s.image[i].contains(&k)
                    }
                } else if s.bridge[i].contains(&q) {
                    text_binding && text_binding_predicate(layout, id, q, k).unwrap()
                } else {
                    match mode {
                        BindingMode::HardImage => {
                            hard_image_predicate(layout, id, q, k).unwrap()
                                || (p.hard_global_text_keys && s.global.contains(&k))
                        }
                        BindingMode::NaiveIsolation => hard_image_predicate(layout, id, q, k).unwrap(),
                        BindingMode::SoftImage => {
                            soft_image_predicate(layout, id, q, k).unwrap()
                                || (p.soft_text_keys && (s.text[i].contains(&k) || s.global.contains(&k)))
                        }
                    }
                }
            };
            *cell = allowed;
        }
    }
    LayerMask::from_rows(rows).unwrap()
}

/// Under uniform attention each A image row averages its 8 keys (2 global, 2 own text,
/// 2 A image, 2 B image) once per step; A and B rows stay symmetric per class.
pub fn soft_leak_closed_form(cfg: &ModelConfig) -> f64 {
    let ch = cfg.channels().unwrap();
    let width = ch.attribute_width();
    let (g, a, b) = (ch.tag_slot("garden"), ch.tag_slot("red"), ch.tag_slot("blue"));
    let mut alpha = vec![0.0; width];
    let mut beta = vec![0.0; width];
    for _ in 0..cfg.steps {
        let mix = |own_slot: usize| {
            let mut m: Vec<f64> = (0..width).map(|s| 2.0 * alpha[s] + 2.0 * beta[s]).collect();
            m[g] += 2.0;
            m[own_slot] += 2.0;
            m.iter_mut().for_each(|v| *v /= 8.0);
            m
        };
        let ma = mix(a);
        let mb = mix(b);
        let dt = 1.0 / cfg.steps as f64;
        let na: Vec<f64> = (0..width).map(|s| alpha[s] + dt * (alpha[s] + ma[s])).collect();
        let nb: Vec<f64> = (0..width).map(|s| beta[s] + dt * (beta[s] + mb[s])).collect();
        alpha = na;
        beta = nb;
    }
    alpha[b] / alpha.iter().map(|v| v * v).sum::<f64>().sqrt()
}

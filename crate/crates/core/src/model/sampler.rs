use crate::channels::Channels;
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::maskgen::{assemble_all, BindingMode, BindingSchedule, BridgeMode, LayerMask};
use crate::numerics::{affine, Mat, RngStream};
use crate::scene::{build_token_layout, embed_text, rasterize_and_assign, SceneSpec, TokenLayout};

use super::layer::run_layers;
use super::weights::ModelWeights;
use super::ModelConfig;

/// The full token matrix at flow time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub x: Mat,
    pub layout: TokenLayout,
    pub t: f64,
}

impl TokenState {
    pub fn image_rows(&self) -> Mat {
        let idx: Vec<usize> = self.layout.image.clone().collect();
        self.x.select_rows(&idx)
    }
}

/// Hooks into a sampling run.
pub trait Observer {
    fn forward_pass(&mut self, _conditional: bool) {}
    /// Hidden state after `layer` of the conditional pass at `step`.
    fn layer(&mut self, _step: usize, _layer: usize, _hidden: &Mat) {}
}

impl Observer for () {}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PassCounter {
    pub conditional: usize,
    pub unconditional: usize,
}

impl Observer for PassCounter {
    fn forward_pass(&mut self, conditional: bool) {
        if conditional {
            self.conditional += 1;
        } else {
            self.unconditional += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row per image token, grid order.
    pub velocity: Mat,
    /// Drift of persistent bridge rows, one row per bridge token. Never decoded.
    pub bridge_velocity: Option<Mat>,
}

/// Sinusoidal embedding of `t`, written into the content block.
pub fn time_embedding(t: f64, ch: &Channels) -> Vec<f64> {
    let mut e = vec![0.0; ch.dim];
    let width = ch.content.1 - ch.content.0;
    for (j, slot) in e[ch.content()].iter_mut().enumerate() {
        let pair = (j / 2) as f64;
        let freq = 100f64.powf(-2.0 * pair / width as f64);
        let arg = 10.0 * t * freq;
        *slot = 0.5 * if j % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    e
}

fn position_encoding(r: usize, c: usize) -> [f64; 8] {
    let (r, c) = (r as f64, c as f64);
    [r.sin(), r.cos(), (r / 10.0).sin(), (r / 10.0).cos(), c.sin(), c.cos(), (c / 10.0).sin(), (c / 10.0).cos()]
}

/// Text rows from the tag encoder, image rows from seeded noise plus position and
/// control channels, bridge rows as exact copies of their source image rows; `t = 1`.
pub fn init_state(scene: &SceneSpec, layout: &TokenLayout, cfg: &ModelConfig) -> Result<TokenState> {
    cfg.validate()?;
    let ch = cfg.channels()?;
    let d = cfg.dim;
    if layout.grid != scene.grid || layout.instances.len() != scene.instances.len() {
        return Err(Error::Validation("layout was not built from this scene".into()));
    }
    let mut x = Mat::zeros(layout.seq_len, d);
    let text_stream = RngStream::new(scene.seed, "text");

    let mut put_text = |range: std::ops::Range<usize>, tags: &[String], what: &str| -> Result<()> {
        if range.len() != cfg.text_len_per_tag * tags.len() {
            return Err(Error::Validation(format!(
                "{what}: layout reserves {} text tokens, {} tags need {}",
                range.len(),
                tags.len(),
                cfg.text_len_per_tag * tags.len()
            )));
        }
        if range.is_empty() {
            return Ok(());
        }
        let rows = embed_text(tags, d, cfg.text_len_per_tag, &text_stream)?;
        for (n, tok) in range.enumerate() {
            x.row_mut(tok).copy_from_slice(rows.row(n));
        }
        Ok(())
    };
    put_text(layout.global_text.clone(), &scene.global_tags, "global text")?;
    for (inst, given) in layout.instances.iter().zip(&scene.instances) {
        put_text(inst.text.clone(), &given.tags, &given.id)?;
    }

    for cell in 0..scene.grid.cells() {
        let (r, c) = (cell / scene.grid.w, cell % scene.grid.w);
        let noise = RngStream::indexed(scene.seed, "noise", cell as u64).normal(ch.content.1 - ch.content.0);
        let row = x.row_mut(layout.image_token(cell));
        row[ch.content()].copy_from_slice(&noise);
        row[ch.position()].copy_from_slice(&position_encoding(r, c));
        row[ch.control()].fill(scene.control_at(cell));
    }
    if layout.has_bridges {
        for i in 0..layout.instances.len() {
            for (b, src) in layout.bridge_pairs(i) {
                let copy = x.row(src).to_vec();
                x.row_mut(b).copy_from_slice(&copy);
            }
        }
    }
    Ok(TokenState { x, layout: layout.clone(), t: 1.0 })
}

fn check_weights(weights: &ModelWeights, cfg: &ModelConfig, layers: usize) -> Result<()> {
    if weights.dim != cfg.dim || weights.heads != cfg.heads || weights.num_layers() != cfg.layers {
        return Err(Error::Validation(format!(
            "weights are d={} h={} L={}, config is d={} h={} L={}",
            weights.dim,
            weights.heads,
            weights.num_layers(),
            cfg.dim,
            cfg.heads,
            cfg.layers
        )));
    }
    if layers != cfg.layers {
        return Err(Error::Validation(format!("schedule has {layers} layers, model has {}", cfg.layers)));
    }
    Ok(())
}

fn forward_masked(
    state: &TokenState,
    weights: &ModelWeights,
    masks: &[LayerMask],
    bridge_mode: BridgeMode,
    mut on_layer: impl FnMut(usize, &Mat),
) -> Result<ForwardOutput> {
    let ch = Channels::for_dim(weights.dim)?;
    let te = time_embedding(state.t, &ch);
    let mut h = state.x.clone();
    for r in 0..h.rows() {
        for (v, e) in h.row_mut(r).iter_mut().zip(&te) {
            *v += e;
        }
    }
    let layout = &state.layout;
    let copies: Vec<(usize, usize)> = if bridge_mode == BridgeMode::PerLayerCopy && layout.has_bridges {
        (0..layout.instances.len()).flat_map(|i| layout.bridge_pairs(i)).collect()
    } else {
        Vec::new()
    };
    let h = run_layers(
        h,
        &weights.layers,
        masks,
        weights.heads,
        |_, h| {
            for &(b, src) in &copies {
                let row = h.row(src).to_vec();
                h.row_mut(b).copy_from_slice(&row);
            }
        },
        &mut on_layer,
    )?;
    let image: Vec<usize> = layout.image.clone().collect();
    let velocity = affine(&h.select_rows(&image), &weights.velocity_head, &weights.velocity_bias)?;
    let bridge_velocity = if layout.has_bridges && bridge_mode == BridgeMode::Persistent {
        let bridges: Vec<usize> = (layout.image.end..layout.seq_len).collect();
        Some(affine(&h.select_rows(&bridges), &weights.velocity_head, &weights.velocity_bias)?)
    } else {
        None
    };
    Ok(ForwardOutput { velocity, bridge_velocity })
}

/// One network evaluation: all layers under the schedule's masks, then the velocity
/// head on image rows.
pub fn forward(
    state: &TokenState,
    weights: &ModelWeights,
    schedule: &BindingSchedule,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    check_weights(weights, cfg, schedule.len())?;
    let masks = assemble_all(&state.layout, schedule);
    forward_masked(state, weights, &masks, schedule.policy.bridge_mode, |_, _| {})
}

/// Builds the layout the schedule calls for and samples from `t = 1` to `t = 0`.
pub fn sample(
    scene: &SceneSpec,
    weights: &ModelWeights,
    schedule: &BindingSchedule,
    cfg: &ModelConfig,
) -> Result<TokenState> {
    sample_traced(scene, weights, schedule, cfg, &mut ())
}

pub fn sample_traced(
    scene: &SceneSpec,
    weights: &ModelWeights,
    schedule: &BindingSchedule,
    cfg: &ModelConfig,
    observer: &mut dyn Observer,
) -> Result<TokenState> {
    let layout = layout_for(scene, schedule, cfg)?;
    let state = init_state(scene, &layout, cfg)?;
    sample_from(state, weights, schedule, cfg, observer)
}

/// Scene layout with bridges exactly when the schedule uses them.
pub fn layout_for(scene: &SceneSpec, schedule: &BindingSchedule, cfg: &ModelConfig) -> Result<TokenLayout> {
    let assignment = rasterize_and_assign(scene)?;
    let layout = build_token_layout(scene, &assignment, cfg.text_len_per_tag, cfg.global_text_len(scene))?;
    Ok(if schedule.uses_bridges() { layout } else { layout.without_bridges() })
}

/// Euler integration `x ← x − v/N` over `N` uniform steps from the given state.
pub fn sample_from(
    mut state: TokenState,
    weights: &ModelWeights,
    schedule: &BindingSchedule,
    cfg: &ModelConfig,
    observer: &mut dyn Observer,
) -> Result<TokenState> {
    cfg.validate()?;
    check_weights(weights, cfg, schedule.len())?;
    let bridge_mode = schedule.policy.bridge_mode;
    let masks = assemble_all(&state.layout, schedule);

    let guided = cfg.cfg_scale > 0.0;
    let uncond_layout = TokenLayout::instance_free(state.layout.grid, state.layout.global_text.len());
    let uncond_masks = if guided {
        let soft = BindingSchedule::uniform(BindingMode::SoftImage, cfg.layers).with_policy(schedule.policy);
        assemble_all(&uncond_layout, &soft)
    } else {
        Vec::new()
    };
    let uncond_rows: Vec<usize> = state.layout.global_text.clone().chain(state.layout.image.clone()).collect();

    let image: Vec<usize> = state.layout.image.clone().collect();
    let bridges: Vec<usize> = (state.layout.image.end..state.layout.seq_len).collect();
    let dt = 1.0 / cfg.steps as f64;

    for step in 0..cfg.steps {
        let out = forward_masked(&state, weights, &masks, bridge_mode, |l, h| observer.layer(step, l, h))?;
        observer.forward_pass(true);
        let mut velocity = out.velocity;
        if guided {
            let uncond = TokenState { x: state.x.select_rows(&uncond_rows), layout: uncond_layout.clone(), t: state.t };
            let vu = forward_masked(&uncond, weights, &uncond_masks, bridge_mode, |_, _| {})?.velocity;
            observer.forward_pass(false);
            for (vc, u) in velocity.data_mut().iter_mut().zip(vu.data()) {
                *vc = u + cfg.cfg_scale * (*vc - u);
            }
        }
        for (n, &tok) in image.iter().enumerate() {
            for (xv, v) in state.x.row_mut(tok).iter_mut().zip(velocity.row(n)) {
                *xv -= dt * v;
            }
        }
        match (bridge_mode, out.bridge_velocity) {
            (BridgeMode::Persistent, Some(vb)) => {
                for (n, &tok) in bridges.iter().enumerate() {
                    for (xv, v) in state.x.row_mut(tok).iter_mut().zip(vb.row(n)) {
                        *xv -= dt * v;
                    }
                }
            }
            _ => {
                for &b in &bridges {
                    if let Some(src) = state.layout.bridge_source(b) {
                        let row = state.x.row(src).to_vec();
                        state.x.row_mut(b).copy_from_slice(&row);
                    }
                }
            }
        }
        state.t = if step + 1 == cfg.steps { 0.0 } else { 1.0 - (step + 1) as f64 / cfg.steps as f64 };
        if !state.x.is_finite() {
            return Err(Error::NumericalDivergence { step });
        }
    }
    Ok(state)
}

/// Decode head per image token, `[-1, 1] → [0, 255]`, nearest-neighbour upsampled.
pub fn decode(state: &TokenState, weights: &ModelWeights, cell_px: usize) -> Result<RgbImage> {
    if state.t != 0.0 {
        return Err(Error::Validation(format!("decode needs a fully sampled state, t = {}", state.t)));
    }
    if cell_px == 0 {
        return Err(Error::Validation("cell size must be >= 1 pixel".into()));
    }
    let grid = state.layout.grid;
    let rgb = affine(&state.image_rows(), &weights.decode_head, &weights.decode_bias)?;
    let (width, height) = (grid.w * cell_px, grid.h * cell_px);
    let mut pixels = vec![0u8; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            let cell = (y / cell_px) * grid.w + x / cell_px;
            for k in 0..3 {
                let v = (127.5 + 127.5 * rgb.get(cell, k)).round().clamp(0.0, 255.0);
                pixels[(y * width + x) * 3 + k] = v as u8;
            }
        }
    }
    Ok(RgbImage { width, height, pixels })
}

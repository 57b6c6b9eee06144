//! Static and dynamic checks of what the binding masks let through.
//!
//! * [`reachability`]: boolean closure of the per-layer attention edges.
//! * [`leakage_matrix`]: cosine of each region's attribute channels against every
//!   instance's attribute target.
//! * [`single_instance_oracle`]: the reduced run that bridge tokens must reproduce.
//! * [`vital_layer_search`] and [`run_ablation`]: the layer sweep and ablation arms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::Channels;
use crate::error::{Error, Result};
use crate::maskgen::{
    assemble_all, BindingMode, BindingSchedule, BridgeMode, LayerMask, SchedulePolicy, DEFAULT_HARD_HI, DEFAULT_HARD_LO,
};
use crate::model::{self, init_state, run_layers, time_embedding, ModelConfig, ModelWeights, Observer, TokenState};
use crate::numerics::{affine, Mat, RngStream};
use crate::scene::{build_token_layout, embed_text, rasterize_and_assign, CellAssignment, SceneSpec, TokenLayout};

/// `reach(a, b)`: the initial value of token `a` can affect the final value of token `b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfluenceMatrix {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl InfluenceMatrix {
    pub fn identity(n: usize) -> Self {
        let words = n.div_ceil(64).max(1);
        let mut m = Self { n, words, bits: vec![0; n * words] };
        for a in 0..n {
            m.set(a, a);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> bool {
        self.bits[a * self.words + b / 64] >> (b % 64) & 1 == 1
    }

    #[inline]
    fn set(&mut self, a: usize, b: usize) {
        self.bits[a * self.words + b / 64] |= 1 << (b % 64);
    }

    /// Tokens reachable from `a`.
    pub fn targets(&self, a: usize) -> Vec<usize> {
        (0..self.n).filter(|&b| self.get(a, b)).collect()
    }

    /// Row `a` lists what `a` reaches.
    pub fn to_mask(&self) -> LayerMask {
        LayerMask::from_rows((0..self.n).map(|a| (0..self.n).map(|b| self.get(a, b)).collect()).collect())
            .expect("square")
    }
}

/// Composes the per-layer key → query edges (each with self-loops) across all layers.
///
/// With per-layer bridge copies, a bridge token's dependencies are replaced by its
/// source image token's at the entry of every layer.
pub fn reachability(layout: &TokenLayout, schedule: &BindingSchedule) -> InfluenceMatrix {
    let n = layout.seq_len;
    let mut reach = InfluenceMatrix::identity(n);
    let copies: Vec<(usize, usize)> = if schedule.policy.bridge_mode == BridgeMode::PerLayerCopy && layout.has_bridges {
        (0..layout.instances.len()).flat_map(|i| layout.bridge_pairs(i)).collect()
    } else {
        Vec::new()
    };
    let words = reach.words;
    for mask in assemble_all(layout, schedule) {
        for a in 0..n {
            for &(b, src) in &copies {
                let bit = reach.get(a, src);
                let w = &mut reach.bits[a * words + b / 64];
                if bit {
                    *w |= 1 << (b % 64);
                } else {
                    *w &= !(1 << (b % 64));
                }
            }
        }
        // listeners[k] = queries that attend to key k
        let mut listeners = vec![0u64; n * words];
        for q in 0..n {
            for k in 0..n {
                if mask.allows(q, k) || q == k {
                    listeners[k * words + q / 64] |= 1 << (q % 64);
                }
            }
        }
        let mut next = vec![0u64; n * words];
        for a in 0..n {
            for k in 0..n {
                if reach.get(a, k) {
                    for w in 0..words {
                        next[a * words + w] |= listeners[k * words + w];
                    }
                }
            }
        }
        reach.bits = next;
    }
    reach
}

/// Per-instance attribute target vectors, in scene order.
pub fn instance_attributes(scene: &SceneSpec, ch: &Channels) -> Vec<(String, Vec<f64>)> {
    scene.instances.iter().map(|i| (i.id.clone(), ch.attribute_vector(&i.tags))).collect()
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (dot / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub scene_id: String,
    pub schedule: String,
    /// Fidelity per instance id.
    #[serde(rename = "F")]
    pub fidelity: BTreeMap<String, f64>,
    /// Leakage keyed `"i->j"`: how much of `j`'s attribute shows in `i`'s region.
    #[serde(rename = "L")]
    pub leakage: BTreeMap<String, f64>,
    pub flags: Vec<String>,
}

impl LeakageReport {
    pub fn mean_fidelity(&self) -> f64 {
        if self.fidelity.is_empty() {
            return 0.0;
        }
        self.fidelity.values().sum::<f64>() / self.fidelity.len() as f64
    }

    pub fn leak(&self, from_region: &str, attribute_of: &str) -> Option<f64> {
        self.leakage.get(&format!("{from_region}->{attribute_of}")).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `F(i)`: mean cosine between the attribute channels of region `i` and `a_i`;
/// `L(i, j)`: the same against `a_j`.
pub fn leakage_matrix(
    final_state: &TokenState,
    attributes: &[(String, Vec<f64>)],
    assignment: &CellAssignment,
    ch: &Channels,
) -> LeakageReport {
    let mut report = LeakageReport {
        scene_id: String::new(),
        schedule: String::new(),
        fidelity: BTreeMap::new(),
        leakage: BTreeMap::new(),
        flags: Vec::new(),
    };
    for (i, (id_i, a_i)) in attributes.iter().enumerate() {
        let cells = assignment.cells_of(i);
        if cells.is_empty() {
            report.flags.push(format!("empty-region:{id_i}"));
            continue;
        }
        let mean_cos = |target: &[f64]| {
            cells
                .iter()
                .map(|&c| cosine(&final_state.x.row(final_state.layout.image_token(c))[ch.attribute()], target))
                .sum::<f64>()
                / cells.len() as f64
        };
        report.fidelity.insert(id_i.clone(), mean_cos(a_i));
        for (j, (id_j, a_j)) in attributes.iter().enumerate() {
            if i != j {
                report.leakage.insert(format!("{id_i}->{id_j}"), mean_cos(a_j));
            }
        }
    }
    report
}

/// Samples the scene under `schedule` and scores the final state.
pub fn evaluate(
    scene: &SceneSpec,
    weights: &ModelWeights,
    schedule: &BindingSchedule,
    cfg: &ModelConfig,
) -> Result<(TokenState, LeakageReport)> {
    let ch = cfg.channels()?;
    let assignment = rasterize_and_assign(scene)?;
    let final_state = model::sample(scene, weights, schedule, cfg)?;
    let mut report = leakage_matrix(&final_state, &instance_attributes(scene, &ch), &assignment, &ch);
    report.scene_id = scene.scene_id();
    report.schedule = schedule.to_string();
    if !final_state.layout.has_bridges {
        report.flags.push("no-bridge-layout".into());
    }
    Ok((final_state, report))
}

/// Hidden rows per `[step][layer]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Vec<Mat>>,
}

impl Trajectory {
    pub fn bit_eq(&self, other: &Trajectory) -> bool {
        self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y)))
    }

    fn push(&mut self, step: usize, rows: Mat) {
        if self.steps.len() <= step {
            self.steps.resize_with(step + 1, Vec::new);
        }
        self.steps[step].push(rows);
    }
}

/// Records selected hidden rows after every layer of every conditional pass.
#[derive(Debug, Clone)]
pub struct RowRecorder {
    rows: Vec<usize>,
    pub trajectory: Trajectory,
}

impl RowRecorder {
    pub fn new(rows: Vec<usize>) -> Self {
        Self { rows, trajectory: Trajectory::default() }
    }
}

impl Observer for RowRecorder {
    fn layer(&mut self, step: usize, _layer: usize, hidden: &Mat) {
        self.trajectory.push(step, hidden.select_rows(&self.rows));
    }
}

/// Rows `T_i` followed by `B_i` in the full layout.
pub fn text_and_bridge_rows(layout: &TokenLayout, instance: usize) -> Vec<usize> {
    let inst = &layout.instances[instance];
    inst.text.clone().chain(inst.bridge.clone()).collect()
}

/// Runs instance `id` alone: its text tokens plus image tokens initialized exactly like
/// the full run's bridge tokens, under full attention, same weights and step count.
/// Returns the `[T_i ; image]` hidden rows after every layer of every step.
pub fn single_instance_oracle(
    scene: &SceneSpec,
    id: &str,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let i = scene.instance_index(id)?;
    let ch = cfg.channels()?;
    let assignment = rasterize_and_assign(scene)?;
    let layout = build_token_layout(scene, &assignment, cfg.text_len_per_tag, cfg.global_text_len(scene))?;
    let full_init = init_state(scene, &layout, cfg)?;

    let text =
        embed_text(&scene.instances[i].tags, cfg.dim, cfg.text_len_per_tag, &RngStream::new(scene.seed, "text"))?;
    let bridge_rows: Vec<usize> = layout.instances[i].bridge.clone().collect();
    let bridges = full_init.x.select_rows(&bridge_rows);
    let n_text = text.rows();
    let n = n_text + bridges.rows();
    let mut x = Mat::zeros(n, cfg.dim);
    for r in 0..n_text {
        x.row_mut(r).copy_from_slice(text.row(r));
    }
    for r in 0..bridges.rows() {
        x.row_mut(n_text + r).copy_from_slice(bridges.row(r));
    }

    let masks = vec![LayerMask::full(n); cfg.layers];
    let image: Vec<usize> = (n_text..n).collect();
    let dt = 1.0 / cfg.steps as f64;
    let mut t = 1.0;
    let mut trajectory = Trajectory::default();
    for step in 0..cfg.steps {
        let te = time_embedding(t, &ch);
        let mut h = x.clone();
        for r in 0..n {
            for (v, e) in h.row_mut(r).iter_mut().zip(&te) {
                *v += e;
            }
        }
        let h =
            run_layers(h, &weights.layers, &masks, weights.heads, |_, _| {}, |_, h| trajectory.push(step, h.clone()))?;
        let v = affine(&h.select_rows(&image), &weights.velocity_head, &weights.velocity_bias)?;
        for (n, &tok) in image.iter().enumerate() {
            for (xv, vv) in x.row_mut(tok).iter_mut().zip(v.row(n)) {
                *xv -= dt * vv;
            }
        }
        t = if step + 1 == cfg.steps { 0.0 } else { 1.0 - (step + 1) as f64 / cfg.steps as f64 };
    }
    Ok(trajectory)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    pub fidelity: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchReport {
    pub scene_id: String,
    pub schedule: String,
    pub baseline: f64,
    pub entries: Vec<LayerEntry>,
}

impl LayerSearchReport {
    /// Layer with the largest delta; the earliest wins ties.
    pub fn best_layer(&self) -> Option<usize> {
        let mut best: Option<&LayerEntry> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.delta > b.delta) {
                best = Some(e);
            }
        }
        best.map(|e| e.layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Soft binding everywhere except hard binding at `layer`.
pub fn single_hard_layer(num_layers: usize, layer: usize, policy: SchedulePolicy) -> BindingSchedule {
    let modes =
        (0..num_layers).map(|l| if l == layer { BindingMode::HardImage } else { BindingMode::SoftImage }).collect();
    BindingSchedule::new(modes, policy).expect("no naive layers")
}

/// Hard binding one layer at a time, scored against the all-soft baseline.
pub fn vital_layer_search(scene: &SceneSpec, weights: &ModelWeights, cfg: &ModelConfig) -> Result<LayerSearchReport> {
    vital_layer_search_with(scene, weights, cfg, SchedulePolicy::default())
}

pub fn vital_layer_search_with(
    scene: &SceneSpec,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    policy: SchedulePolicy,
) -> Result<LayerSearchReport> {
    let soft = BindingSchedule::uniform(BindingMode::SoftImage, cfg.layers).with_policy(policy);
    let baseline = evaluate(scene, weights, &soft, cfg)?.1.mean_fidelity();
    let entries = (0..cfg.layers)
        .into_par_iter()
        .map(|l| {
            let fidelity = evaluate(scene, weights, &single_hard_layer(cfg.layers, l, policy), cfg)?.1.mean_fidelity();
            Ok(LayerEntry { layer: l, fidelity, delta: fidelity - baseline })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSearchReport {
        scene_id: scene.scene_id(),
        schedule: "all-soft, hard at one layer".into(),
        baseline,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AblationArm {
    Full,
    Naive,
    NoTextBinding,
    HardAtInput,
    HardAtMiddle,
    HardAtOutput,
}

impl AblationArm {
    pub const ALL: [AblationArm; 6] = [
        AblationArm::Full,
        AblationArm::Naive,
        AblationArm::NoTextBinding,
        AblationArm::HardAtInput,
        AblationArm::HardAtMiddle,
        AblationArm::HardAtOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "FULL",
            AblationArm::Naive => "NAIVE",
            AblationArm::NoTextBinding => "NO_TEXT_BINDING",
            AblationArm::HardAtInput => "HARD_AT_INPUT",
            AblationArm::HardAtMiddle => "HARD_AT_MIDDLE",
            AblationArm::HardAtOutput => "HARD_AT_OUTPUT",
        }
    }

    /// The arm's schedule; `base` supplies the policy flags the arm does not override.
    pub fn schedule(self, num_layers: usize, base: SchedulePolicy) -> Result<BindingSchedule> {
        let third = |lo, hi| Ok(BindingSchedule::hard_range(num_layers, lo, hi)?.with_policy(base));
        match self {
            AblationArm::Full => third(DEFAULT_HARD_LO, DEFAULT_HARD_HI),
            AblationArm::Naive => {
                Ok(BindingSchedule::uniform(BindingMode::NaiveIsolation, num_layers).with_policy(base))
            }
            AblationArm::NoTextBinding => {
                Ok(BindingSchedule::hard_range(num_layers, DEFAULT_HARD_LO, DEFAULT_HARD_HI)?
                    .with_policy(SchedulePolicy { text_binding_enabled: false, ..base }))
            }
            AblationArm::HardAtInput => third(0.0, DEFAULT_HARD_LO),
            AblationArm::HardAtMiddle => third(DEFAULT_HARD_LO, DEFAULT_HARD_HI),
            AblationArm::HardAtOutput => third(DEFAULT_HARD_HI, 1.0),
        }
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationArm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown ablation arm `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub arm: AblationArm,
    pub schedule: BindingSchedule,
    pub layout: TokenLayout,
    pub leakage: LeakageReport,
    pub reach: InfluenceMatrix,
}

pub fn run_ablation(
    scene: &SceneSpec,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    arm: AblationArm,
) -> Result<AblationOutcome> {
    run_ablation_with(scene, weights, cfg, arm, SchedulePolicy::default())
}

pub fn run_ablation_with(
    scene: &SceneSpec,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    arm: AblationArm,
    base: SchedulePolicy,
) -> Result<AblationOutcome> {
    let schedule = arm.schedule(cfg.layers, base)?;
    let (final_state, mut leakage) = evaluate(scene, weights, &schedule, cfg)?;
    leakage.schedule = format!("{arm}:{schedule}");
    let reach = reachability(&final_state.layout, &schedule);
    Ok(AblationOutcome { arm, schedule, layout: final_state.layout, leakage, reach })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scene;

    fn canonical() -> SceneSpec {
        parse_scene(
            r#"{"grid":{"h":2,"w":2},"global_tags":["garden"],"seed":7,"instances":[
                {"id":"A","tags":["red"],"region":{"bbox":[0,0,0,1]}},
                {"id":"B","tags":["blue"],"region":{"bbox":[1,0,1,1]}}]}"#,
        )
        .unwrap()
    }

    fn canonical_layout() -> TokenLayout {
        let s = canonical();
        build_token_layout(&s, &rasterize_and_assign(&s).unwrap(), 2, 2).unwrap()
    }

    #[test]
    fn zero_layers_is_identity() {
        let l = canonical_layout();
        let r = reachability(&l, &BindingSchedule::uniform(BindingMode::SoftImage, 0));
        assert_eq!(r, InfluenceMatrix::identity(l.seq_len));
    }

    #[test]
    fn all_hard_never_crosses_instances() {
        let l = canonical_layout();
        let r = reachability(&l, &BindingSchedule::uniform(BindingMode::HardImage, 3));
        let block = |t: usize| -> Option<usize> {
            (0..2).find(|&i| {
                let inst = &l.instances[i];
                inst.text.contains(&t) || inst.bridge.contains(&t) || inst.image.contains(&t)
            })
        };
        for a in 2..l.seq_len {
            for b in 2..l.seq_len {
                if block(a) != block(b) {
                    assert!(!r.get(a, b), "{a} -> {b}");
                }
            }
        }
    }

    #[test]
    fn all_soft_connects_every_image_pair() {
        let l = canonical_layout();
        let r = reachability(&l, &BindingSchedule::uniform(BindingMode::SoftImage, 1));
        for a in l.image.clone() {
            for b in l.image.clone() {
                assert!(r.get(a, b));
            }
        }
    }

    #[test]
    fn per_layer_copy_replaces_bridge_dependencies() {
        let l = canonical_layout();
        let policy = SchedulePolicy { bridge_mode: BridgeMode::PerLayerCopy, ..SchedulePolicy::default() };
        let s = BindingSchedule::uniform(BindingMode::SoftImage, 1).with_policy(policy);
        let r = reachability(&l, &s);
        // bridge 10 copies image 6 on entry; its own initial value is gone
        assert!(!r.get(10, 10));
        assert!(r.get(6, 10));
        assert!(r.get(6, 2));
        assert!(!r.get(8, 2));
        let two = reachability(&l, &BindingSchedule::uniform(BindingMode::SoftImage, 2).with_policy(policy));
        assert!(two.get(8, 2));
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in AblationArm::ALL {
            assert_eq!(arm.name().parse::<AblationArm>().unwrap(), arm);
        }
        assert!("SIDEWAYS".parse::<AblationArm>().is_err());
        let s = AblationArm::HardAtOutput.schedule(12, SchedulePolicy::default()).unwrap();
        assert_eq!(s.to_string(), "SSSSSSSSHHHH");
        let s = AblationArm::HardAtInput.schedule(12, SchedulePolicy::default()).unwrap();
        assert_eq!(s.to_string(), "HHHHSSSSSSSS");
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine(&[0.3, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 2.0], &[1.0, 0.0]), 0.0);
    }
}

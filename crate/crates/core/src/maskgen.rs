//! Binding masks and per-layer schedules.
//!
//! Three instance-level predicates define the binding:
//!
//! * text binding: `q, k ∈ T_i ∪ B_i` (instance text and its bridge tokens only see each other);
//! * hard image binding: `q ∈ I_i, k ∈ T_i ∪ I_i`;
//! * soft image binding: `q ∈ I_i, k ∈ I_all`.
//!
//! [`assemble_layer_mask`] ORs them together with the policy for global text, background
//! and bridge tokens into one `seq × seq` allow matrix (row = query, column = key).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::encode_pgm;
use crate::scene::{TokenLayout, TokenRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BindingMode {
    #[serde(rename = "HARD")]
    HardImage,
    #[serde(rename = "SOFT")]
    SoftImage,
    #[serde(rename = "NAIVE")]
    NaiveIsolation,
}

impl BindingMode {
    pub fn tag(self) -> &'static str {
        match self {
            BindingMode::HardImage => "HARD",
            BindingMode::SoftImage => "SOFT",
            BindingMode::NaiveIsolation => "NAIVE",
        }
    }

    fn letter(self) -> char {
        match self {
            BindingMode::HardImage => 'H',
            BindingMode::SoftImage => 'S',
            BindingMode::NaiveIsolation => 'N',
        }
    }
}

impl FromStr for BindingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HARD" => Ok(BindingMode::HardImage),
            "SOFT" => Ok(BindingMode::SoftImage),
            "NAIVE" => Ok(BindingMode::NaiveIsolation),
            _ => Err(Error::Validation(format!("unknown binding mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BridgeMode {
    /// Copied from the image rows once at initialization, then evolve on their own.
    Persistent,
    /// Overwritten from their source image rows at the entry of every layer.
    PerLayerCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub text_binding_enabled: bool,
    /// Soft layers also let instance image queries see `T_i ∪ T_g`.
    pub soft_text_keys: bool,
    /// Background image queries see all image keys even in hard layers.
    pub background_soft_in_hard_layers: bool,
    /// Hard layers also let instance image queries see `T_g`.
    pub hard_global_text_keys: bool,
    pub bridge_mode: BridgeMode,
}

impl Default for SchedulePolicy {
    fn default() -> Self {
        Self {
            text_binding_enabled: true,
            soft_text_keys: true,
            background_soft_in_hard_layers: false,
            hard_global_text_keys: false,
            bridge_mode: BridgeMode::Persistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingSchedule {
    modes: Vec<BindingMode>,
    pub policy: SchedulePolicy,
}

pub const DEFAULT_HARD_LO: f64 = 1.0 / 3.0;
pub const DEFAULT_HARD_HI: f64 = 2.0 / 3.0;

/// `x` snapped to the nearest integer when within 1e-9 of it, so `(1/3)·12` is 4.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

impl BindingSchedule {
    pub fn new(modes: Vec<BindingMode>, policy: SchedulePolicy) -> Result<Self> {
        let naive = modes.iter().filter(|&&m| m == BindingMode::NaiveIsolation).count();
        if naive != 0 && naive != modes.len() {
            return Err(Error::Validation("naive isolation must apply to every layer".into()));
        }
        Ok(Self { modes, policy })
    }

    pub fn uniform(mode: BindingMode, layers: usize) -> Self {
        Self { modes: vec![mode; layers], policy: SchedulePolicy::default() }
    }

    /// Hard binding on `[⌊lo·L⌋, ⌈hi·L⌉)`, soft elsewhere.
    pub fn hard_range(num_layers: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Validation(format!("hard range needs 0 <= lo <= hi <= 1, got {lo}:{hi}")));
        }
        let l = num_layers as f64;
        let start = snap(lo * l).floor() as usize;
        let end = (snap(hi * l).ceil() as usize).min(num_layers);
        let modes = (0..num_layers)
            .map(|i| if lo < hi && (start..end).contains(&i) { BindingMode::HardImage } else { BindingMode::SoftImage })
            .collect();
        Ok(Self { modes, policy: SchedulePolicy::default() })
    }

    pub fn with_policy(mut self, policy: SchedulePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn modes(&self) -> &[BindingMode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mode(&self, layer: usize) -> BindingMode {
        self.modes[layer]
    }

    pub fn is_naive(&self) -> bool {
        self.modes.first() == Some(&BindingMode::NaiveIsolation)
    }

    /// Whether layouts run under this schedule carry bridge tokens.
    pub fn uses_bridges(&self) -> bool {
        self.policy.text_binding_enabled && !self.is_naive()
    }

    /// Parses `default`, `all-hard`, `all-soft`, `naive`, or one `H`/`S` letter per layer.
    pub fn parse(text: &str, num_layers: usize) -> Result<Self> {
        match text {
            "default" => default_schedule(num_layers, DEFAULT_HARD_LO, DEFAULT_HARD_HI),
            "all-hard" => Ok(Self::uniform(BindingMode::HardImage, num_layers)),
            "all-soft" => Ok(Self::uniform(BindingMode::SoftImage, num_layers)),
            "naive" => Ok(Self::uniform(BindingMode::NaiveIsolation, num_layers)),
            letters => {
                if letters.chars().count() != num_layers {
                    return Err(Error::Validation(format!(
                        "schedule `{letters}` is not one of default|all-hard|all-soft|naive or {num_layers} H/S letters"
                    )));
                }
                let modes = letters
                    .chars()
                    .map(|c| match c {
                        'H' | 'h' => Ok(BindingMode::HardImage),
                        'S' | 's' => Ok(BindingMode::SoftImage),
                        other => Err(Error::Validation(format!("schedule letter `{other}` is not H or S"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(modes, SchedulePolicy::default())
            }
        }
    }
}

impl fmt::Display for BindingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.modes {
            write!(f, "{}", m.letter())?;
        }
        Ok(())
    }
}

pub fn default_schedule(num_layers: usize, hard_fraction_lo: f64, hard_fraction_hi: f64) -> Result<BindingSchedule> {
    BindingSchedule::hard_range(num_layers, hard_fraction_lo, hard_fraction_hi)
}

fn is_text(layout: &TokenLayout, i: usize, t: usize) -> bool {
    layout.roles[t] == TokenRole::InstanceText(i)
}

fn is_bridge(layout: &TokenLayout, i: usize, t: usize) -> bool {
    matches!(layout.roles[t], TokenRole::Bridge { instance, .. } if instance == i)
}

fn is_inst_image(layout: &TokenLayout, i: usize, t: usize) -> bool {
    matches!(layout.roles[t], TokenRole::Image { owner: Some(o), .. } if o == i)
}

fn check(layout: &TokenLayout, id: &str, q: usize, k: usize) -> Result<usize> {
    let i = layout.instance_index(id)?;
    if q >= layout.seq_len || k >= layout.seq_len {
        return Err(Error::Validation(format!("token index ({q}, {k}) outside sequence of {}", layout.seq_len)));
    }
    Ok(i)
}

/// `q, k ∈ T_i ∪ B_i`.
pub fn text_binding_predicate(layout: &TokenLayout, id: &str, q: usize, k: usize) -> Result<bool> {
    let i = check(layout, id, q, k)?;
    let member = |t| is_text(layout, i, t) || is_bridge(layout, i, t);
    Ok(member(q) && member(k))
}

/// `q ∈ I_i, k ∈ T_i ∪ I_i`.
pub fn hard_image_predicate(layout: &TokenLayout, id: &str, q: usize, k: usize) -> Result<bool> {
    let i = check(layout, id, q, k)?;
    Ok(is_inst_image(layout, i, q) && (is_text(layout, i, k) || is_inst_image(layout, i, k)))
}

/// `q ∈ I_i, k ∈ I_all`.
pub fn soft_image_predicate(layout: &TokenLayout, id: &str, q: usize, k: usize) -> Result<bool> {
    let i = check(layout, id, q, k)?;
    Ok(is_inst_image(layout, i, q) && layout.image.contains(&k))
}

/// Dense `seq × seq` allow matrix, row = query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    seq_len: usize,
    allow: Vec<bool>,
}

impl LayerMask {
    pub fn full(seq_len: usize) -> Self {
        Self { seq_len, allow: vec![true; seq_len * seq_len] }
    }

    pub fn diagonal(seq_len: usize) -> Self {
        let mut m = Self { seq_len, allow: vec![false; seq_len * seq_len] };
        for i in 0..seq_len {
            m.allow[i * seq_len + i] = true;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("mask rows must be square".into()));
        }
        Ok(Self { seq_len: n, allow: rows.into_iter().flatten().collect() })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.seq_len + k]
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.seq_len..(q + 1) * self.seq_len]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allow[q * self.seq_len + k] = v;
    }

    pub fn allowed_keys(&self, q: usize) -> Vec<usize> {
        (0..self.seq_len).filter(|&k| self.allows(q, k)).collect()
    }

    /// Row-major bits packed LSB-first into 64-bit words.
    pub fn to_packed(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.allow.len().div_ceil(64)];
        for (n, &a) in self.allow.iter().enumerate() {
            if a {
                words[n / 64] |= 1 << (n % 64);
            }
        }
        words
    }

    pub fn from_packed(seq_len: usize, words: &[u64]) -> Result<Self> {
        let bits = seq_len * seq_len;
        if words.len() != bits.div_ceil(64) {
            return Err(Error::Shape(format!("{} words cannot hold a {seq_len}x{seq_len} mask", words.len())));
        }
        let allow = (0..bits).map(|n| words[n / 64] >> (n % 64) & 1 == 1).collect();
        Ok(Self { seq_len, allow })
    }

    fn body(&self) -> String {
        let mut s = String::with_capacity(self.seq_len * (self.seq_len + 1));
        for q in 0..self.seq_len {
            s.extend(self.row(q).iter().map(|&a| if a { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    /// `BINDMASK v1 seq=<S> layer=<L> mode=<HARD|SOFT|NAIVE>` followed by S rows of '0'/'1'.
    pub fn to_bindmask(&self, layer: usize, mode: BindingMode) -> String {
        format!("BINDMASK v1 seq={} layer={layer} mode={}\n{}", self.seq_len, mode.tag(), self.body())
    }

    /// Same text format with the header word `REACH` in place of layer and mode.
    pub fn to_reach_dump(&self) -> String {
        format!("BINDMASK v1 seq={} REACH\n{}", self.seq_len, self.body())
    }

    /// 8-bit grayscale rendering, 255 = allowed.
    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<u8> = self.allow.iter().map(|&a| if a { 255 } else { 0 }).collect();
        encode_pgm(self.seq_len, self.seq_len, &gray)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDumpKind {
    Layer { layer: usize, mode: BindingMode },
    Reach,
}

/// Reads a BINDMASK v1 text dump back.
pub fn parse_bindmask(text: &str) -> Result<(MaskDumpKind, LayerMask)> {
    let bad = |m: String| Error::Format { what: "BINDMASK", message: m };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty document".into()))?;
    let words: Vec<&str> = header.split_whitespace().collect();
    if words.len() < 3 || words[0] != "BINDMASK" || words[1] != "v1" {
        return Err(bad(format!("bad header `{header}`")));
    }
    let field = |w: &str, key: &str| -> Result<String> {
        w.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .map(str::to_owned)
            .ok_or_else(|| bad(format!("expected `{key}=` in `{header}`")))
    };
    let seq: usize = field(words[2], "seq")?.parse().map_err(|_| bad("bad seq".into()))?;
    let kind = match &words[3..] {
        ["REACH"] => MaskDumpKind::Reach,
        [l, m] => MaskDumpKind::Layer {
            layer: field(l, "layer")?.parse().map_err(|_| bad("bad layer".into()))?,
            mode: field(m, "mode")?.parse()?,
        },
        _ => return Err(bad(format!("bad header `{header}`"))),
    };
    let mut rows = Vec::with_capacity(seq);
    for line in lines {
        if line.len() != seq {
            return Err(bad(format!("row of length {} in a seq={seq} dump", line.len())));
        }
        rows.push(
            line.bytes()
                .map(|b| match b {
                    b'1' => Ok(true),
                    b'0' => Ok(false),
                    _ => Err(bad(format!("unexpected byte {b:#x}"))),
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if rows.len() != seq {
        return Err(bad(format!("{} rows in a seq={seq} dump", rows.len())));
    }
    Ok((kind, LayerMask::from_rows(rows)?))
}

/// Builds the full allow matrix for one layer.
pub fn assemble_layer_mask(layout: &TokenLayout, schedule: &BindingSchedule, layer: usize) -> LayerMask {
    let mode = schedule.mode(layer);
    let policy = schedule.policy;
    let n = layout.seq_len;
    let mut mask = LayerMask { seq_len: n, allow: vec![false; n * n] };
    let text_binding = policy.text_binding_enabled && mode != BindingMode::NaiveIsolation;

    for q in 0..n {
        let row = &mut mask.allow[q * n..(q + 1) * n];
        let mut open = |r: std::ops::Range<usize>| row[r].iter_mut().for_each(|a| *a = true);
        match layout.roles[q] {
            TokenRole::GlobalText => {
                open(layout.global_text.clone());
                open(layout.image.clone());
            }
            TokenRole::InstanceText(i) => {
                let inst = &layout.instances[i];
                open(inst.text.clone());
                if text_binding {
                    open(inst.bridge.clone());
                } else {
                    inst.image.iter().for_each(|&k| row[k] = true);
                }
            }
            TokenRole::Bridge { instance, .. } => {
                if text_binding {
                    let inst = &layout.instances[instance];
                    open(inst.text.clone());
                    open(inst.bridge.clone());
                }
            }
            TokenRole::Image { owner: Some(i), .. } => {
                let inst = &layout.instances[i];
                match mode {
                    BindingMode::HardImage | BindingMode::NaiveIsolation => {
                        open(inst.text.clone());
                        inst.image.iter().for_each(|&k| row[k] = true);
                        if mode == BindingMode::HardImage && policy.hard_global_text_keys {
                            row[layout.global_text.clone()].iter_mut().for_each(|a| *a = true);
                        }
                    }
                    BindingMode::SoftImage => {
                        open(layout.image.clone());
                        if policy.soft_text_keys {
                            open(inst.text.clone());
                            open(layout.global_text.clone());
                        }
                    }
                }
            }
            TokenRole::Image { owner: None, .. } => {
                open(layout.global_text.clone());
                if mode == BindingMode::SoftImage || policy.background_soft_in_hard_layers {
                    open(layout.image.clone());
                } else {
                    layout.background.iter().for_each(|&k| row[k] = true);
                }
            }
        }
        row[q] = true;
    }
    mask
}

/// One mask per layer of the schedule.
pub fn assemble_all(layout: &TokenLayout, schedule: &BindingSchedule) -> Vec<LayerMask> {
    (0..schedule.len()).map(|l| assemble_layer_mask(layout, schedule, l)).collect()
}

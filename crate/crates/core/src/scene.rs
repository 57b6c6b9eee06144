//! Scene ingestion, region rasterization and token sequence layout.
//!
//! The token sequence is always laid out as
//! `[global text][instance texts, in list order][image, row-major][bridges, in list order]`.
//! Bridge tokens are copies of an instance's image tokens; the n-th bridge token of an
//! instance corresponds to its n-th image token in row-major order.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::Channels;
use crate::error::{Error, Result};
use crate::numerics::{rng_uniform, Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> usize {
        r * self.w + c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Region {
    /// Inclusive `[row0, col0, row1, col1]`.
    Bbox([usize; 4]),
    Cells(Vec<[usize; 2]>),
}

impl Region {
    /// Cell indices covered by the region, row-major.
    pub fn cells(&self, grid: Grid) -> Vec<usize> {
        let mut out = match self {
            Region::Bbox([r0, c0, r1, c1]) => {
                let mut v = Vec::new();
                for r in *r0..=*r1 {
                    for c in *c0..=*c1 {
                        v.push(grid.cell(r, c));
                    }
                }
                v
            }
            Region::Cells(cells) => cells.iter().map(|[r, c]| grid.cell(*r, *c)).collect(),
        };
        out.sort_unstable();
        out
    }

    fn validate(&self, grid: Grid, path: &str) -> Result<()> {
        match self {
            Region::Bbox([r0, c0, r1, c1]) => {
                if r0 > r1 || c0 > c1 {
                    return Err(Error::Validation(format!("{path}.bbox: inverted box {:?}", [r0, c0, r1, c1])));
                }
                if *r1 >= grid.h || *c1 >= grid.w {
                    return Err(Error::Validation(format!(
                        "{path}.bbox: {:?} exceeds the {}x{} grid",
                        [r0, c0, r1, c1],
                        grid.h,
                        grid.w
                    )));
                }
            }
            Region::Cells(cells) => {
                if cells.is_empty() {
                    return Err(Error::Validation(format!("{path}.cells: empty cell list")));
                }
                let mut seen = HashSet::new();
                for [r, c] in cells {
                    if *r >= grid.h || *c >= grid.w {
                        return Err(Error::Validation(format!(
                            "{path}.cells: [{r}, {c}] outside the {}x{} grid",
                            grid.h, grid.w
                        )));
                    }
                    if !seen.insert((*r, *c)) {
                        return Err(Error::Validation(format!("{path}.cells: duplicate cell [{r}, {c}]")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub id: String,
    #[serde(default)]
    pub z: i64,
    pub tags: Vec<String>,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grid: Grid,
    #[serde(default)]
    pub global_tags: Vec<String>,
    pub seed: u64,
    /// Row-major control map (depth/edge stand-in), clamped to `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<Vec<f64>>>,
    pub instances: Vec<InstanceSpec>,
}

impl SceneSpec {
    /// Checks every schema invariant and clamps the control map.
    pub fn validate(&mut self) -> Result<()> {
        let grid = self.grid;
        if grid.h == 0 || grid.w == 0 {
            return Err(Error::Validation(format!("grid: dimensions must be >= 1, got {}x{}", grid.h, grid.w)));
        }
        if self.instances.is_empty() || self.instances.len() > grid.cells() {
            return Err(Error::Validation(format!(
                "instances: need between 1 and {} instances, got {}",
                grid.cells(),
                self.instances.len()
            )));
        }
        let mut ids = HashSet::new();
        for (n, inst) in self.instances.iter().enumerate() {
            let path = format!("instances[{n}]");
            if inst.id.is_empty() {
                return Err(Error::Validation(format!("{path}.id: empty id")));
            }
            if !ids.insert(inst.id.as_str()) {
                return Err(Error::Validation(format!("{path}.id: duplicate instance id `{}`", inst.id)));
            }
            if inst.tags.is_empty() {
                return Err(Error::Validation(format!("{path}.tags: at least one tag is required")));
            }
            inst.region.validate(grid, &format!("{path}.region"))?;
        }
        if let Some(ctrl) = &mut self.control {
            if ctrl.len() != grid.h || ctrl.iter().any(|r| r.len() != grid.w) {
                return Err(Error::Validation(format!("control: expected a {}x{} grid", grid.h, grid.w)));
            }
            for (r, row) in ctrl.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Validation(format!("control[{r}][{c}]: non-finite value")));
                    }
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(())
    }

    /// Control value of a cell, 0 without a control map.
    pub fn control_at(&self, cell: usize) -> f64 {
        self.control.as_ref().map_or(0.0, |c| c[cell / self.grid.w][cell % self.grid.w])
    }

    pub fn instance_index(&self, id: &str) -> Result<usize> {
        self.instances.iter().position(|i| i.id == id).ok_or_else(|| Error::UnknownInstance(id.to_owned()))
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serializes")
    }

    /// Short content hash of the canonical form.
    pub fn scene_id(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates a JSON scene document.
pub fn parse_scene(document: &str) -> Result<SceneSpec> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let mut scene: SceneSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse { path, message: e.into_inner().to_string() }
    })?;
    scene.validate()?;
    Ok(scene)
}

/// Owner of every grid cell after overlap resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellAssignment {
    pub grid: Grid,
    /// Instance index per cell, `None` for background.
    pub labels: Vec<Option<usize>>,
}

impl CellAssignment {
    pub fn cells_of(&self, instance: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c] == Some(instance)).collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&c| self.labels[c].is_none()).collect()
    }
}

/// Highest `z` wins a contested cell; equal `z` goes to the later-listed instance.
pub fn rasterize_and_assign(scene: &SceneSpec) -> Result<CellAssignment> {
    let grid = scene.grid;
    let mut labels: Vec<Option<usize>> = vec![None; grid.cells()];
    for (n, inst) in scene.instances.iter().enumerate() {
        for cell in inst.region.cells(grid) {
            let take = match labels[cell] {
                None => true,
                Some(prev) => inst.z >= scene.instances[prev].z,
            };
            if take {
                labels[cell] = Some(n);
            }
        }
    }
    let a = CellAssignment { grid, labels };
    for (n, inst) in scene.instances.iter().enumerate() {
        if !a.labels.contains(&Some(n)) {
            return Err(Error::EmptyInstanceRegion(inst.id.clone()));
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    GlobalText,
    InstanceText(usize),
    Image {
        cell: usize,
        owner: Option<usize>,
    },
    /// `source` is the sequence index of the image token this bridge copies.
    Bridge {
        instance: usize,
        source: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceTokens {
    pub id: String,
    pub text: Range<usize>,
    /// Image token indices of the instance, ascending (row-major).
    pub image: Vec<usize>,
    /// Empty when the layout carries no bridges.
    pub bridge: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub seq_len: usize,
    pub grid: Grid,
    pub global_text: Range<usize>,
    pub image: Range<usize>,
    pub instances: Vec<InstanceTokens>,
    pub background: Vec<usize>,
    pub roles: Vec<TokenRole>,
    pub has_bridges: bool,
}

impl TokenLayout {
    pub fn instance_index(&self, id: &str) -> Result<usize> {
        self.instances.iter().position(|i| i.id == id).ok_or_else(|| Error::UnknownInstance(id.to_owned()))
    }

    /// Sequence index of the image token for a grid cell.
    #[inline]
    pub fn image_token(&self, cell: usize) -> usize {
        self.image.start + cell
    }

    /// `(bridge index, source image index)` pairs of an instance, in order.
    pub fn bridge_pairs(&self, instance: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let inst = &self.instances[instance];
        inst.bridge.clone().zip(inst.image.iter().copied())
    }

    pub fn bridge_source(&self, token: usize) -> Option<usize> {
        match self.roles.get(token) {
            Some(TokenRole::Bridge { source, .. }) => Some(*source),
            _ => None,
        }
    }

    pub fn bridge_len(&self) -> usize {
        self.instances.iter().map(|i| i.bridge.len()).sum()
    }

    /// Same layout with the trailing bridge segment removed.
    pub fn without_bridges(&self) -> TokenLayout {
        let seq_len = self.seq_len - self.bridge_len();
        let mut out = self.clone();
        out.seq_len = seq_len;
        out.roles.truncate(seq_len);
        for i in &mut out.instances {
            i.bridge = seq_len..seq_len;
        }
        out.has_bridges = false;
        out
    }

    /// Layout with no instances: global text followed by the image grid, all background.
    pub fn instance_free(grid: Grid, global_text_len: usize) -> TokenLayout {
        let image = global_text_len..global_text_len + grid.cells();
        let mut roles = vec![TokenRole::GlobalText; global_text_len];
        roles.extend((0..grid.cells()).map(|cell| TokenRole::Image { cell, owner: None }));
        TokenLayout {
            seq_len: image.end,
            grid,
            global_text: 0..global_text_len,
            background: image.clone().collect(),
            image,
            instances: Vec::new(),
            roles,
            has_bridges: false,
        }
    }
}

/// Lays out the full sequence, bridges included.
pub fn build_token_layout(
    scene: &SceneSpec,
    assignment: &CellAssignment,
    text_len_per_tag: usize,
    global_text_len: usize,
) -> Result<TokenLayout> {
    if assignment.grid != scene.grid || assignment.labels.len() != scene.grid.cells() {
        return Err(Error::Validation("assignment grid does not match the scene".into()));
    }
    let grid = scene.grid;
    let mut roles = vec![TokenRole::GlobalText; global_text_len];
    let mut cursor = global_text_len;
    let mut instances = Vec::with_capacity(scene.instances.len());
    for (n, inst) in scene.instances.iter().enumerate() {
        let len = text_len_per_tag * inst.tags.len();
        roles.extend(std::iter::repeat_n(TokenRole::InstanceText(n), len));
        instances.push(InstanceTokens {
            id: inst.id.clone(),
            text: cursor..cursor + len,
            image: Vec::new(),
            bridge: 0..0,
        });
        cursor += len;
    }
    let image = cursor..cursor + grid.cells();
    let mut background = Vec::new();
    for (cell, owner) in assignment.labels.iter().enumerate() {
        let tok = image.start + cell;
        roles.push(TokenRole::Image { cell, owner: *owner });
        match owner {
            Some(i) => instances[*i].image.push(tok),
            None => background.push(tok),
        }
    }
    cursor = image.end;
    for (n, inst) in instances.iter_mut().enumerate() {
        inst.bridge = cursor..cursor + inst.image.len();
        roles.extend(inst.image.iter().map(|&source| TokenRole::Bridge { instance: n, source }));
        cursor += inst.image.len();
    }
    Ok(TokenLayout {
        seq_len: cursor,
        grid,
        global_text: 0..global_text_len,
        image,
        instances,
        background,
        roles,
        has_bridges: true,
    })
}

/// Encodes a tag list into `text_len_per_tag` rows per tag.
///
/// Each tag draws its content block from its own labelled sub-stream and lights up
/// its attribute slot, so an instance's encoding never depends on other instances.
pub fn embed_text(tags: &[String], dim: usize, text_len_per_tag: usize, stream: &RngStream) -> Result<Mat> {
    if tags.is_empty() {
        return Err(Error::Validation("embed_text: empty tag list".into()));
    }
    let ch = Channels::for_dim(dim)?;
    let mut m = Mat::zeros(tags.len() * text_len_per_tag, dim);
    let mut row = 0;
    for tag in tags {
        let mut s = stream.derive(&format!("tag/{tag}"));
        let slot = ch.attribute.0 + ch.tag_slot(tag);
        for _ in 0..text_len_per_tag {
            let content = rng_uniform(&mut s, ch.content.1 - ch.content.0, -1.0, 1.0)?;
            let r = m.row_mut(row);
            r[ch.content()].copy_from_slice(&content);
            r[slot] = 1.0;
            row += 1;
        }
    }
    Ok(m)
}

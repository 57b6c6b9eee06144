use std::io::{Read, Write};

use crate::channels::Channels;
use crate::error::{Error, Result};
use crate::numerics::{rng_uniform, Mat, RngStream};

use super::{ModelConfig, WeightMode};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1_scale: Vec<f64>,
    pub norm1_shift: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub norm2_scale: Vec<f64>,
    pub norm2_shift: Vec<f64>,
    /// `d × 4d`
    pub mlp_in: Mat,
    pub mlp_in_bias: Vec<f64>,
    /// `4d × d`
    pub mlp_out: Mat,
    pub mlp_out_bias: Vec<f64>,
}

impl LayerWeights {
    pub fn zeros(d: usize) -> Self {
        Self {
            norm1_scale: vec![1.0; d],
            norm1_shift: vec![0.0; d],
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            norm2_scale: vec![1.0; d],
            norm2_shift: vec![0.0; d],
            mlp_in: Mat::zeros(d, 4 * d),
            mlp_in_bias: vec![0.0; 4 * d],
            mlp_out: Mat::zeros(4 * d, d),
            mlp_out_bias: vec![0.0; d],
        }
    }

    fn random(d: usize, stream: &RngStream) -> Result<Self> {
        let mat = |name: &str, rows: usize, cols: usize, scale: f64| -> Result<Mat> {
            let s = scale / (rows as f64).sqrt();
            Mat::from_vec(rows, cols, rng_uniform(&mut stream.derive(name), rows * cols, -s, s)?)
        };
        let vec = |name: &str, n: usize, center: f64, spread: f64| -> Result<Vec<f64>> {
            rng_uniform(&mut stream.derive(name), n, center - spread, center + spread)
        };
        Ok(Self {
            norm1_scale: vec("norm1_scale", d, 1.0, 0.1)?,
            norm1_shift: vec("norm1_shift", d, 0.0, 0.1)?,
            wq: mat("wq", d, d, 1.0)?,
            wk: mat("wk", d, d, 1.0)?,
            wv: mat("wv", d, d, 0.5)?,
            wo: mat("wo", d, d, 0.5)?,
            norm2_scale: vec("norm2_scale", d, 1.0, 0.1)?,
            norm2_shift: vec("norm2_shift", d, 0.0, 0.1)?,
            mlp_in: mat("mlp_in", d, 4 * d, 1.0)?,
            mlp_in_bias: vec("mlp_in_bias", 4 * d, 0.0, 0.1)?,
            mlp_out: mat("mlp_out", 4 * d, d, 0.3)?,
            mlp_out_bias: vec("mlp_out_bias", d, 0.0, 0.05)?,
        })
    }

    fn tensors(&self) -> [&[f64]; 12] {
        [
            &self.norm1_scale,
            &self.norm1_shift,
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            &self.norm2_scale,
            &self.norm2_shift,
            self.mlp_in.data(),
            &self.mlp_in_bias,
            self.mlp_out.data(),
            &self.mlp_out_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            &mut self.norm1_scale,
            &mut self.norm1_shift,
            self.wq.data_mut(),
            self.wk.data_mut(),
            self.wv.data_mut(),
            self.wo.data_mut(),
            &mut self.norm2_scale,
            &mut self.norm2_shift,
            self.mlp_in.data_mut(),
            &mut self.mlp_in_bias,
            self.mlp_out.data_mut(),
            &mut self.mlp_out_bias,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Random,
    Routing,
}

impl WeightKind {
    fn tag(self) -> &'static str {
        match self {
            WeightKind::Random => "RANDOM",
            WeightKind::Routing => "ROUTING",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub dim: usize,
    pub heads: usize,
    pub kind: WeightKind,
    pub seed: u64,
    pub layers: Vec<LayerWeights>,
    pub velocity_head: Mat,
    pub velocity_bias: Vec<f64>,
    /// `d × 3`
    pub decode_head: Mat,
    pub decode_bias: Vec<f64>,
}

/// Color written by the routing decode head for an attribute slot: a fully saturated
/// hue at `slot / width`, scaled into `[-0.25, 0.25]` per channel.
pub fn palette_color(slot: usize, width: usize) -> [f64; 3] {
    let h = slot as f64 / width as f64 * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [(r - 0.5) * 0.5, (g - 0.5) * 0.5, (b - 0.5) * 0.5]
}

impl ModelWeights {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        match &cfg.weight_mode {
            WeightMode::Random { seed } => Self::random(cfg, *seed),
            WeightMode::Routing { transport_layers } => Self::routing(cfg, transport_layers),
        }
    }

    /// All-zero layers (each layer is the identity) with zero heads.
    pub fn zeros(dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            dim,
            heads,
            kind: WeightKind::Random,
            seed: 0,
            layers: (0..layers).map(|_| LayerWeights::zeros(dim)).collect(),
            velocity_head: Mat::zeros(dim, dim),
            velocity_bias: vec![0.0; dim],
            decode_head: Mat::zeros(dim, 3),
            decode_bias: vec![0.0; 3],
        }
    }

    fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.dim;
        let root = RngStream::new(seed, "weights");
        let layers = (0..cfg.layers)
            .map(|l| LayerWeights::random(d, &root.derive(&format!("layer{l}"))))
            .collect::<Result<Vec<_>>>()?;
        let s = 0.5 / (d as f64).sqrt();
        Ok(Self {
            dim: d,
            heads: cfg.heads,
            kind: WeightKind::Random,
            seed,
            layers,
            velocity_head: Mat::from_vec(d, d, rng_uniform(&mut root.derive("velocity"), d * d, -s, s)?)?,
            velocity_bias: vec![0.0; d],
            decode_head: Mat::from_vec(d, 3, rng_uniform(&mut root.derive("decode"), d * 3, -s, s)?)?,
            decode_bias: vec![0.0; 3],
        })
    }

    /// Value transport is the identity on the attribute block at `transport_layers`
    /// and zero elsewhere; queries and keys are zero so every allowed key gets the
    /// same score and attention mass is decided by the mask alone.
    fn routing(cfg: &ModelConfig, transport_layers: &[usize]) -> Result<Self> {
        let d = cfg.dim;
        let ch = Channels::for_dim(d)?;
        let mut w = Self::zeros(d, cfg.heads, cfg.layers);
        w.kind = WeightKind::Routing;
        for &l in transport_layers {
            let lw = &mut w.layers[l];
            for j in ch.attribute() {
                lw.wv.set(j, j, 1.0);
                lw.wo.set(j, j, 1.0);
            }
        }
        for j in ch.attribute() {
            w.velocity_head.set(j, j, -1.0);
        }
        let width = ch.attribute_width();
        for (s, j) in ch.attribute().enumerate() {
            let c = palette_color(s, width);
            for (k, v) in c.iter().enumerate() {
                w.decode_head.set(j, k, *v);
            }
        }
        Ok(w)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn header(&self) -> String {
        format!(
            "BINDW v1 d={} h={} L={} mode={} seed={}\n",
            self.dim,
            self.heads,
            self.layers.len(),
            self.kind.tag(),
            self.seed
        )
    }

    /// Snapshot: header line, then little-endian f64 values. Per layer, in order:
    /// norm1 scale, norm1 shift, W_Q, W_K, W_V, W_O, norm2 scale, norm2 shift,
    /// MLP in (d×4d), MLP in bias, MLP out (4d×d), MLP out bias; then the velocity
    /// head (d×d), its bias, the decode head (d×3) and its bias. Matrices are row-major.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.header().as_bytes())?;
        let tail: [&[f64]; 4] =
            [self.velocity_head.data(), &self.velocity_bias, self.decode_head.data(), &self.decode_bias];
        for t in self.layers.iter().flat_map(|l| l.tensors()).chain(tail) {
            for v in t {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let bad = |m: String| Error::Format { what: "BINDW snapshot", message: m };
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not utf-8".into()))?;
        let words: Vec<&str> = header.split_whitespace().collect();
        if words.len() != 7 || words[0] != "BINDW" || words[1] != "v1" {
            return Err(bad(format!("bad header `{header}`")));
        }
        fn field<'a>(w: &'a str, key: &str) -> Option<&'a str> {
            w.strip_prefix(key).and_then(|r| r.strip_prefix('='))
        }
        let num = |w: &str, key: &str| -> Result<u64> {
            field(w, key).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad {key}")))
        };
        let d = num(words[2], "d")? as usize;
        let heads = num(words[3], "h")? as usize;
        let layers = num(words[4], "L")? as usize;
        let kind = match field(words[5], "mode").unwrap_or("") {
            "RANDOM" => WeightKind::Random,
            "ROUTING" => WeightKind::Routing,
            m => return Err(bad(format!("unknown mode {m}"))),
        };
        let seed = num(words[6], "seed")?;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(bad(format!("d={d} not divisible by h={heads}")));
        }

        let mut w = Self::zeros(d, heads, layers);
        w.kind = kind;
        w.seed = seed;
        let mut floats = bytes[nl + 1..].chunks_exact(8);
        let total = layers * (2 * d + 4 * d * d + 2 * d + 8 * d * d + 4 * d + d) + d * d + d + 3 * d + 3;
        if bytes.len() - nl - 1 != total * 8 {
            return Err(bad(format!("expected {total} values, found {} bytes", bytes.len() - nl - 1)));
        }
        let mut fill = |dst: &mut [f64]| {
            for v in dst {
                let chunk: [u8; 8] = floats.next().expect("length checked").try_into().expect("8 bytes");
                *v = f64::from_le_bytes(chunk);
            }
        };
        for l in &mut w.layers {
            for t in l.tensors_mut() {
                fill(t);
            }
        }
        fill(w.velocity_head.data_mut());
        fill(&mut w.velocity_bias);
        fill(w.decode_head.data_mut());
        fill(&mut w.decode_bias);
        Ok(w)
    }
}

//! Command implementations behind the `bindattn` binary.
//!
//! Every command writes its artifacts plus a `manifest.json` into the output
//! directory. The manifest carries no timestamps or thread counts, so identical
//! inputs give byte-identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use bindattn_core::analysis::{reachability, run_ablation_with, vital_layer_search_with, AblationArm};
use bindattn_core::imageio::encode_ppm;
use bindattn_core::maskgen::assemble_all;
use bindattn_core::model::{decode, layout_for, sample};
use bindattn_core::{
    parse_scene, BindingSchedule, BridgeMode, ModelConfig, ModelWeights, SceneSpec, SchedulePolicy, WeightMode,
};

pub const TOOL: &str = "bindattn";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Output { context: String, source: std::io::Error },
}

impl CliError {
    /// 2 for bad input, 3 for numerical failure, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Output { .. } => 1,
        }
    }
}

impl From<bindattn_core::Error> for CliError {
    fn from(e: bindattn_core::Error) -> Self {
        match e {
            bindattn_core::Error::NumericalDivergence { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "bindattn",
    version,
    about = "Attribute binding masks for a toy joint-attention diffusion transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a scene and write the decoded image.
    Render(RenderArgs),
    /// Write every layer's attention mask and the reachability matrix.
    Masks(RunArgs),
    /// Score hard binding at each single layer against an all-soft baseline.
    Search(RunArgs),
    /// Fidelity and leakage for one ablation arm, or all of them.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsKind {
    Random,
    Routing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BridgeKind {
    Persistent,
    PerLayer,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scene JSON file.
    pub scene: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Guidance scale; 0 turns the unconditional pass off.
    #[arg(long = "cfg", default_value_t = 0.0)]
    pub cfg_scale: f64,
    #[arg(long, value_enum, default_value_t = WeightsKind::Random)]
    pub weights: WeightsKind,
    /// Transport layer for routing weights; defaults to `layers / 2`.
    #[arg(long)]
    pub routing_layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub weight_seed: u64,
    /// `default`, `all-hard`, `all-soft`, `naive`, or one H/S letter per layer.
    #[arg(long, default_value = "default")]
    pub schedule: String,
    /// Hard binding on the layer fraction `lo:hi`; overrides `--schedule`.
    #[arg(long)]
    pub hard_range: Option<String>,
    #[arg(long)]
    pub no_text_binding: bool,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub soft_text_keys: OnOff,
    #[arg(long, value_enum, default_value_t = BridgeKind::Persistent)]
    pub bridge: BridgeKind,
    /// Background image tokens see every image token in hard layers too.
    #[arg(long)]
    pub background_soft: bool,
    /// Instance image tokens see the global text in hard layers.
    #[arg(long)]
    pub hard_global_text: bool,
    #[arg(long, default_value_t = 2)]
    pub tokens_per_tag: usize,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write per-layer masks into this directory.
    #[arg(long)]
    pub dump_masks: Option<PathBuf>,
    /// Also write a weight snapshot to this file.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    #[arg(short, long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Pixels per grid cell side.
    #[arg(long, default_value_t = 8)]
    pub cell_px: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// FULL, NAIVE, NO_TEXT_BINDING, HARD_AT_INPUT, HARD_AT_MIDDLE, HARD_AT_OUTPUT or `all`.
    #[arg(long, default_value = "FULL")]
    pub arm: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scene: String,
    pub scene_id: String,
    pub config_digest: String,
    pub seed: u64,
    pub weight_seed: u64,
    pub outputs: Vec<OutputEntry>,
}

/// Everything a command needs, resolved from the flags.
pub struct Setup {
    pub scene: SceneSpec,
    pub cfg: ModelConfig,
    pub schedule: BindingSchedule,
    pub weights: ModelWeights,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    cfg: &'a ModelConfig,
    schedule: String,
    policy: &'a SchedulePolicy,
    extra: &'a BTreeMap<&'static str, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Input(format!("--hard-range expects lo:hi, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

impl RunArgs {
    pub fn policy(&self) -> SchedulePolicy {
        SchedulePolicy {
            text_binding_enabled: !self.no_text_binding,
            soft_text_keys: self.soft_text_keys == OnOff::On,
            background_soft_in_hard_layers: self.background_soft,
            hard_global_text_keys: self.hard_global_text,
            bridge_mode: match self.bridge {
                BridgeKind::Persistent => BridgeMode::Persistent,
                BridgeKind::PerLayer => BridgeMode::PerLayerCopy,
            },
        }
    }

    pub fn config(&self) -> CliResult<ModelConfig> {
        let weight_mode = match self.weights {
            WeightsKind::Random => WeightMode::Random { seed: self.weight_seed },
            WeightsKind::Routing => WeightMode::routing_at(self.routing_layer.unwrap_or(self.layers / 2)),
        };
        let cfg = ModelConfig {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            text_len_per_tag: self.tokens_per_tag,
            weight_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> CliResult<BindingSchedule> {
        let base = match &self.hard_range {
            Some(r) => {
                let (lo, hi) = parse_range(r)?;
                BindingSchedule::hard_range(self.layers, lo, hi)?
            }
            None => BindingSchedule::parse(&self.schedule, self.layers)?,
        };
        Ok(base.with_policy(self.policy()))
    }

    pub fn setup(&self) -> CliResult<Setup> {
        let text = fs::read_to_string(&self.scene)
            .map_err(|e| CliError::Input(format!("cannot read scene {}: {e}", self.scene.display())))?;
        let scene = parse_scene(&text)?;
        let cfg = self.config()?;
        let schedule = self.schedule()?;
        let weights = ModelWeights::from_config(&cfg)?;
        Ok(Setup { scene, cfg, schedule, weights })
    }
}

/// Collects output files and builds the manifest.
struct Outputs<'a> {
    dir: &'a Path,
    entries: Vec<OutputEntry>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> CliResult<Self> {
        fs::create_dir_all(dir)
            .map_err(|source| CliError::Output { context: format!("creating {}", dir.display()), source })?;
        Ok(Self { dir, entries: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        write_file(&self.dir.join(name), bytes)?;
        self.entries.push(OutputEntry { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn finish(
        self,
        command: &str,
        run: &RunArgs,
        setup: &Setup,
        extra: BTreeMap<&'static str, String>,
    ) -> CliResult<Manifest> {
        let digest = DigestInput {
            cfg: &setup.cfg,
            schedule: setup.schedule.to_string(),
            policy: &setup.schedule.policy,
            extra: &extra,
        };
        let manifest = Manifest {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: command.into(),
            scene: run.scene.display().to_string(),
            scene_id: setup.scene.scene_id(),
            config_digest: sha256_hex(serde_json::to_string(&digest).expect("config serializes").as_bytes()),
            seed: setup.scene.seed,
            weight_seed: run.weight_seed,
            outputs: self.entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_file(&self.dir.join("manifest.json"), text.as_bytes())?;
        Ok(manifest)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Output { context: format!("writing {}", path.display()), source })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T> {
    match threads {
        None => f(),
        Some(0) => Err(CliError::Input("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn side_outputs(run: &RunArgs, setup: &Setup) -> CliResult<()> {
    if let Some(dir) = &run.dump_masks {
        write_masks(dir, setup)?;
    }
    if let Some(path) = &run.save_weights {
        let mut bytes = Vec::new();
        setup.weights.write_snapshot(&mut bytes)?;
        write_file(path, &bytes)?;
    }
    Ok(())
}

/// `layer_NNN.txt` and `layer_NNN.pgm` per layer, plus `reach.txt`. Returns the file names.
fn write_masks(dir: &Path, setup: &Setup) -> CliResult<Vec<(String, Vec<u8>)>> {
    let layout = layout_for(&setup.scene, &setup.schedule, &setup.cfg)?;
    let mut files = Vec::new();
    for (l, mask) in assemble_all(&layout, &setup.schedule).iter().enumerate() {
        files.push((format!("layer_{l:03}.txt"), mask.to_bindmask(l, setup.schedule.mode(l)).into_bytes()));
        files.push((format!("layer_{l:03}.pgm"), mask.to_pgm()));
    }
    files.push(("reach.txt".into(), reachability(&layout, &setup.schedule).to_mask().to_reach_dump().into_bytes()));
    fs::create_dir_all(dir)
        .map_err(|source| CliError::Output { context: format!("creating {}", dir.display()), source })?;
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
    }
    Ok(files)
}

pub fn cmd_render(args: &RenderArgs) -> CliResult<Manifest> {
    let run = &args.run;
    let setup = run.setup()?;
    with_threads(run.threads, || {
        side_outputs(run, &setup)?;
        let state = sample(&setup.scene, &setup.weights, &setup.schedule, &setup.cfg)?;
        let image = decode(&state, &setup.weights, args.cell_px)?;
        let mut out = Outputs::new(&run.out)?;
        out.write("render.ppm", &encode_ppm(&image))?;
        out.finish("render", run, &setup, BTreeMap::from([("cell_px", args.cell_px.to_string())]))
    })
}

pub fn cmd_masks(run: &RunArgs) -> CliResult<Manifest> {
    let setup = run.setup()?;
    with_threads(run.threads, || {
        side_outputs(run, &setup)?;
        let files = write_masks(&run.out, &setup)?;
        let mut out = Outputs::new(&run.out)?;
        out.entries = files.iter().map(|(n, b)| OutputEntry { path: n.clone(), sha256: sha256_hex(b) }).collect();
        out.finish("masks", run, &setup, BTreeMap::new())
    })
}

pub fn cmd_search(run: &RunArgs) -> CliResult<Manifest> {
    let setup = run.setup()?;
    with_threads(run.threads, || {
        side_outputs(run, &setup)?;
        let report = vital_layer_search_with(&setup.scene, &setup.weights, &setup.cfg, setup.schedule.policy)?;
        let mut out = Outputs::new(&run.out)?;
        out.write("search.json", format!("{}\n", report.to_json()).as_bytes())?;
        out.finish("search", run, &setup, BTreeMap::new())
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<Manifest> {
    let run = &args.run;
    let setup = run.setup()?;
    let arms: Vec<AblationArm> =
        if args.arm.eq_ignore_ascii_case("all") { AblationArm::ALL.to_vec() } else { vec![args.arm.parse()?] };
    with_threads(run.threads, || {
        side_outputs(run, &setup)?;
        let mut reports = BTreeMap::new();
        for arm in &arms {
            let outcome = run_ablation_with(&setup.scene, &setup.weights, &setup.cfg, *arm, setup.schedule.policy)?;
            reports.insert(arm.name(), outcome.leakage);
        }
        let mut out = Outputs::new(&run.out)?;
        let text = if arms.len() == 1 {
            reports.values().next().expect("one arm").to_json()
        } else {
            serde_json::to_string_pretty(&reports).expect("reports serialize")
        };
        out.write("leakage.json", format!("{text}\n").as_bytes())?;
        out.finish("analyze", run, &setup, BTreeMap::from([("arm", args.arm.to_ascii_uppercase())]))
    })
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> CliResult<Manifest> {
    match &cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Masks(a) => cmd_masks(a),
        Command::Search(a) => cmd_search(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}

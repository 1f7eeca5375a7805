//! Command-line entry points: graph building, synthetic data generation,
//! training, forecasting, nested regional runs, ensembles, evaluation,
//! spectra, and cyclone tracking.
//!
//! Every run writes a manifest next to its outputs recording the resolved
//! configuration, seeds, input hashes, and output hashes; `rerun` replays a
//! manifest into a fresh directory and must reproduce the same output
//! hashes bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ensemble::{ensemble_forecast, EnsembleSpec, PerlinSpec};
use crate::error::{Error, Result};
use crate::evaluation as eval;
use crate::fieldio::{self, FieldSeries, FieldTensor, LoadedField};
use crate::meshgraph::{self, GraphConfig, LatLon, RegionBox};
use crate::nesting::{self, GlobalDrive, NestMode, RegionWindow};
use crate::network::{GraphTensors, Messaging, Model, NetworkConfig};
use crate::synthdata::{
    generate_advection, generate_advection_two_res, AdvectParams, VortexParams, VortexScenario,
};
use crate::tensorcore::{load_params, save_params, ParamStore, Real};
use crate::tracking::{track_cyclone, TrackerConfig};
use crate::training::{
    denormalize, fit_norm, normalize, pairs_from_series, rollout, train, LossKind, NormStats,
    OptimizerKind, TrainConfig,
};

#[derive(Parser)]
#[command(name = "nestcast", version, about = "Global-regional forecasting on spherical graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a multi-scale earth graph (or a regional window graph).
    BuildGraph(BuildGraphArgs),
    /// Generate synthetic field sequences.
    GenData(GenDataArgs),
    /// Train a forecast model on a field sequence.
    Train(TrainArgs),
    /// Autoregressive forecast from an initial state.
    Forecast(ForecastArgs),
    /// Nested regional forecast.
    Nest(NestArgs),
    /// Perturbed-initial-condition ensemble forecast.
    Ensemble(EnsembleArgs),
    /// Verification metrics between forecast and truth.
    Evaluate(EvaluateArgs),
    /// Zonal power spectrum (and spectral error against a truth file).
    Spectrum(SpectrumArgs),
    /// Track a cyclone through a field sequence.
    Track(TrackArgs),
    /// Re-execute a recorded run manifest into a new output directory.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct BuildGraphArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    levels: u32,
    /// Refinement box lat0,lat1,lon0,lon1 (repeatable).
    #[arg(long = "region")]
    regions: Vec<String>,
    #[arg(long, default_value_t = 0.6)]
    g2m_factor: f64,
    /// Regional window rows/cols r0,r1,c0,c1 into the h×w grid; switches to
    /// a regional graph whose grid nodes are the window's fine cells.
    #[arg(long)]
    window: Option<String>,
    #[arg(long, default_value_t = 2)]
    boundary: usize,
    #[arg(long, default_value_t = 1)]
    refine: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Advect,
    Vortex,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.15)]
    rotation: f64,
    #[arg(long, default_value_t = 0.01)]
    diffusion: f64,
    #[arg(long, default_value_t = 1.0)]
    innovation: f64,
    /// Also emit the same trajectory on a refine-times finer grid.
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    out_fine: Option<PathBuf>,
    /// Vortex start, degrees.
    #[arg(long, default_value_t = 16.5, allow_negative_numbers = true)]
    start_lat: f64,
    #[arg(long, default_value_t = -151.5, allow_negative_numbers = true)]
    start_lon: f64,
    #[arg(long)]
    remove_after: Option<usize>,
    #[arg(long, default_value = "f64le")]
    dtype: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MessagingArg {
    Gated,
    Mlp,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NestModeArg {
    Nng,
    Bf,
    None,
}

impl From<NestModeArg> for NestMode {
    fn from(m: NestModeArg) -> Self {
        match m {
            NestModeArg::Nng => NestMode::Nng,
            NestModeArg::Bf => NestMode::BoundaryForcing,
            NestModeArg::None => NestMode::NoForcing,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    latent: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0)]
    gate_dim: usize,
    #[arg(long, default_value_t = 64)]
    gate_hidden: usize,
    #[arg(long, default_value_t = 64)]
    attn_hidden: usize,
    #[arg(long, value_enum, default_value_t = MessagingArg::Gated)]
    messaging: MessagingArg,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value = "global")]
    loss: String,
    /// Fraction of the sequence used for training pairs.
    #[arg(long, default_value_t = 0.85)]
    train_frac: f64,
    /// Allow reading data stored at a different precision.
    #[arg(long, default_value_t = false)]
    convert: bool,
    /// Regional coupling mode; switches to nested-pair training.
    #[arg(long, value_enum)]
    nest_mode: Option<NestModeArg>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long, default_value_t = 2)]
    boundary: usize,
    #[arg(long, default_value_t = 1)]
    refine: usize,
    #[arg(long)]
    data_fine: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    init: PathBuf,
    /// Step of the init file to start from (default: last).
    #[arg(long)]
    init_step: Option<usize>,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = false)]
    convert: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NestArgs {
    #[arg(long)]
    regional_graph: PathBuf,
    #[arg(long)]
    regional_ckpt: PathBuf,
    /// Optional global model; without it the coarse data drives the nest.
    #[arg(long)]
    global_graph: Option<PathBuf>,
    #[arg(long)]
    global_ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    data_fine: PathBuf,
    #[arg(long)]
    window: String,
    #[arg(long, default_value_t = 2)]
    boundary: usize,
    #[arg(long, default_value_t = 1)]
    refine: usize,
    #[arg(long, value_enum)]
    mode: NestModeArg,
    #[arg(long, default_value_t = 0)]
    start_step: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    init_step: Option<usize>,
    #[arg(long, default_value_t = 10)]
    members: usize,
    #[arg(long, default_value_t = 0.05)]
    amplitude: f64,
    #[arg(long, default_value_t = 3)]
    octaves: usize,
    #[arg(long, default_value_t = 4.0)]
    base_period: f64,
    #[arg(long, default_value_t = 0.5)]
    persistence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    clim: Option<PathBuf>,
    #[arg(long, default_value = "rmse,acc,csi,sedi")]
    metrics: String,
    #[arg(long, default_value_t = 0.9)]
    threshold_q: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    field: PathBuf,
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Truth file for a per-wavenumber normalized error.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    fields: PathBuf,
    /// Initial eye position lat,lon in degrees.
    #[arg(long)]
    init: String,
    #[arg(long, default_value_t = 0)]
    start_step: usize,
    #[arg(long, default_value_t = 5e-5)]
    vorticity_threshold: f64,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Record of one CLI run, written beside its outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(fieldio::sha256_hex(&bytes))
}

fn walk_sorted(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            walk_sorted(&entry, out)?;
        } else {
            out.push(entry);
        }
    }
    Ok(())
}

struct ManifestBuilder {
    subcommand: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: serde_json::Value,
    inputs: Vec<PathBuf>,
    out_roots: Vec<PathBuf>,
    start: Instant,
}

impl ManifestBuilder {
    fn new(subcommand: &str, argv: &[String]) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            config: serde_json::Value::Null,
            seeds: serde_json::Value::Null,
            inputs: Vec::new(),
            out_roots: Vec::new(),
            start: Instant::now(),
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output_root(&mut self, path: &Path) {
        self.out_roots.push(path.to_path_buf());
    }

    /// Hash inputs and outputs and write the manifest next to the first
    /// output root (inside it when it is a directory).
    fn finish(self) -> Result<PathBuf> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            if p.is_dir() {
                let mut files = Vec::new();
                walk_sorted(p, &mut files)?;
                for f in files {
                    let rel = f.strip_prefix(p).unwrap_or(&f).to_string_lossy().to_string();
                    inputs.insert(
                        format!("{}/{rel}", p.file_name().unwrap_or_default().to_string_lossy()),
                        sha256_file(&f)?,
                    );
                }
            } else {
                inputs.insert(p.to_string_lossy().to_string(), sha256_file(p)?);
            }
        }
        let mut outputs = BTreeMap::new();
        for root in &self.out_roots {
            if root.is_dir() {
                let mut files = Vec::new();
                walk_sorted(root, &mut files)?;
                for f in files {
                    if f.file_name().is_some_and(|n| n == "manifest.json") {
                        continue;
                    }
                    let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().to_string();
                    outputs.insert(rel, sha256_file(&f)?);
                }
            } else if root.is_file() {
                outputs.insert(
                    root.file_name().unwrap_or_default().to_string_lossy().to_string(),
                    sha256_file(root)?,
                );
            }
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            argv: self.argv,
            config: self.config,
            seeds: self.seeds,
            inputs,
            outputs,
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
        };
        let first = self
            .out_roots
            .first()
            .ok_or_else(|| Error::InvalidArgument("run produced no outputs".into()))?;
        let path = if first.is_dir() {
            first.join("manifest.json")
        } else {
            first.with_file_name(format!(
                "{}.manifest.json",
                first.file_name().unwrap_or_default().to_string_lossy()
            ))
        };
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn parse_csv_numbers<const N: usize>(s: &str, what: &str) -> Result<[f64; N]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("bad {what} `{s}`: {e}")))?;
    if parts.len() != N {
        return Err(Error::InvalidArgument(format!(
            "{what} needs {N} comma-separated numbers, got {}",
            parts.len()
        )));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(&parts);
    Ok(out)
}

fn parse_window(s: &str, boundary: usize, refine: usize) -> Result<RegionWindow> {
    let v = parse_csv_numbers::<4>(s, "window")?;
    Ok(RegionWindow {
        row0: v[0] as usize,
        row1: v[1] as usize,
        col0: v[2] as usize,
        col1: v[3] as usize,
        boundary_width: boundary,
        refine,
    })
}

fn load_series(path: &Path) -> Result<LoadedField> {
    fieldio::read_field(path)
}

/// Checkpoint metadata stored alongside the parameter blobs.
#[derive(Debug, Serialize, Deserialize)]
struct CkptExtra {
    network: NetworkConfig,
    norm: NormStats,
    graph_h: usize,
    graph_w: usize,
    graph_levels: u32,
    channels: Vec<String>,
}

fn messaging_of(arg: MessagingArg) -> Messaging {
    match arg {
        MessagingArg::Gated => Messaging::Gated,
        MessagingArg::Mlp => Messaging::Mlp,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_train_typed<T: Real>(
    args: &TrainArgs,
    graph: &meshgraph::EarthGraph,
    series: &FieldSeries,
    fine: Option<&FieldSeries>,
    window: Option<&RegionWindow>,
) -> Result<(serde_json::Value, NormStats, NetworkConfig)> {
    let stats = fit_norm(series);
    let mode: Option<NestMode> = args.nest_mode.map(Into::into);
    let base_channels = series.steps[0].c;
    let (n_in, n_out) = match mode {
        Some(m) => (base_channels * m.input_channel_factor(), base_channels),
        None => (base_channels, base_channels),
    };
    let net_cfg = NetworkConfig {
        latent_dim: args.latent,
        n_blocks: args.blocks,
        n_heads: args.heads,
        gate_dim: args.gate_dim,
        gate_hidden: args.gate_hidden,
        attn_hidden: args.attn_hidden,
        n_channels: n_in,
        out_channels: if n_in == n_out { 0 } else { n_out },
        messaging: messaging_of(args.messaging),
    };
    let mut store: ParamStore<T> = ParamStore::new();
    let mut rng = crate::rng::substream(args.seed, "init");
    let model = Model::build(net_cfg.clone(), &mut store, &mut rng)?;
    let gt: GraphTensors<T> = GraphTensors::new(graph);

    let pairs = match (mode, fine, window) {
        (Some(m), Some(fine), Some(win)) => {
            let coarse_norm: Vec<FieldTensor> =
                series.steps.iter().map(|f| normalize(f, &stats)).collect();
            let fine_norm: Vec<FieldTensor> =
                fine.steps.iter().map(|f| normalize(f, &stats)).collect();
            let n_train =
                (((series.len() - 1) as f64) * args.train_frac).floor().max(1.0) as usize;
            nesting::regional_training_pairs::<T>(&coarse_norm, &fine_norm, win, m, 0..n_train)?
        }
        (None, _, _) => {
            let n_train =
                (((series.len() - 1) as f64) * args.train_frac).floor().max(1.0) as usize;
            pairs_from_series::<T>(series, &stats, 0..n_train)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "nested training needs --window and --data-fine".into(),
            ))
        }
    };
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if pairs[0].0.rows() != gt.n_grid {
        return Err(Error::shape(
            "train",
            format!(
                "data has {} grid points per step, graph has {}",
                pairs[0].0.rows(),
                gt.n_grid
            ),
        ));
    }

    let optimizer = match args.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::Adam,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown optimizer `{other}` (sgd|adam)"
            )))
        }
    };
    let loss = match args.loss.as_str() {
        "global" => LossKind::Global,
        "pointwise" => LossKind::Pointwise,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown loss `{other}` (global|pointwise)"
            )))
        }
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        lr0: args.lr,
        batch: args.batch,
        seed: args.seed,
        momentum: 0.9,
        optimizer,
        loss,
        shuffle: true,
    };
    let outcome = train(&model, &mut store, &gt, &pairs, &train_cfg)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let extra = CkptExtra {
        network: net_cfg.clone(),
        norm: stats.clone(),
        graph_h: graph.config.h,
        graph_w: graph.config.w,
        graph_levels: graph.config.levels,
        channels: series.channels.clone(),
    };
    save_params(&store, &args.out, Some(args.seed), serde_json::to_value(&extra)?)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let csv_path = args.out.join("loss_curve.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok((
        json!({
            "network": net_cfg,
            "train": train_cfg,
            "pairs": pairs.len(),
            "final_loss": outcome.loss_curve.last(),
        }),
        stats,
        net_cfg,
    ))
}

/// Load a checkpoint with its metadata at the precision it was written in,
/// then run `f` generically.
fn with_ckpt<R>(
    dir: &Path,
    mut f: impl FnMut(ModelBundle) -> Result<R>,
) -> Result<R> {
    let manifest_path = dir.join("params.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let dtype = probe["dtype"].as_str().unwrap_or("f32le").to_string();
    if dtype == "f64le" {
        let (store, extra) = load_params::<f64>(dir, false)?;
        let extra: CkptExtra = serde_json::from_value(extra)?;
        f(ModelBundle::F64(store, extra))
    } else {
        let (store, extra) = load_params::<f32>(dir, false)?;
        let extra: CkptExtra = serde_json::from_value(extra)?;
        f(ModelBundle::F32(store, extra))
    }
}

enum ModelBundle {
    F32(ParamStore<f32>, CkptExtra),
    F64(ParamStore<f64>, CkptExtra),
}

impl ModelBundle {
    fn rebuild<T: Real>(store: &ParamStore<T>, extra: &CkptExtra) -> Result<(Model, ParamStore<T>)> {
        // Rebuild the layout with a throwaway store, then bind the loaded
        // values by path order (paths are deterministic).
        let mut fresh: ParamStore<T> = ParamStore::new();
        let mut rng = crate::rng::substream(0, "init");
        let model = Model::build(extra.network.clone(), &mut fresh, &mut rng)?;
        let mut bound: ParamStore<T> = ParamStore::new();
        for id in fresh.ids() {
            let path = fresh.leaf(id).path.clone();
            let loaded = store.by_path(&path).ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint is missing parameter `{path}`"))
            })?;
            bound.add(path, store.leaf(loaded).value.clone());
        }
        Ok((model, bound))
    }
}

fn forecast_series<T: Real>(
    store: &ParamStore<T>,
    extra: &CkptExtra,
    graph: &meshgraph::EarthGraph,
    init: &FieldTensor,
    steps: usize,
) -> Result<Vec<FieldTensor>> {
    let (model, store) = ModelBundle::rebuild(store, extra)?;
    let gt: GraphTensors<T> = GraphTensors::new(graph);
    if init.c != extra.network.n_channels {
        return Err(Error::shape(
            "forecast",
            format!(
                "init has {} channels, model expects {}",
                init.c, extra.network.n_channels
            ),
        ));
    }
    if init.h * init.w != gt.n_grid {
        return Err(Error::shape(
            "forecast",
            format!("init grid {}×{} does not match graph", init.h, init.w),
        ));
    }
    let z0 = normalize(init, &extra.norm);
    let states = rollout(&model, &store, &gt, &z0.to_node_matrix::<T>(), steps)?;
    Ok(states
        .iter()
        .map(|m| {
            denormalize(
                &FieldTensor::from_node_matrix(m, init.h, init.w, init.grid),
                &extra.norm,
            )
        })
        .collect())
}

fn cmd_build_graph(args: &BuildGraphArgs, mb: &mut ManifestBuilder) -> Result<()> {
    let mut regions = Vec::new();
    for r in &args.regions {
        let v = parse_csv_numbers::<4>(r, "region")?;
        regions.push(RegionBox::new(v[0], v[1], v[2], v[3]));
    }
    let graph = match &args.window {
        None => {
            let cfg = GraphConfig {
                h: args.h,
                w: args.w,
                levels: args.levels,
                regions,
                g2m_factor: args.g2m_factor,
            };
            meshgraph::build_earth_graph(cfg)?
        }
        Some(wspec) => {
            let window = parse_window(wspec, args.boundary, args.refine)?;
            nesting::build_regional_graph(args.h, args.w, &window, args.levels)?
        }
    };
    meshgraph::save_graph(&graph, &args.out)?;
    mb.config = json!({
        "h": args.h, "w": args.w, "levels": args.levels,
        "regions": args.regions, "g2m_factor": args.g2m_factor,
        "window": args.window, "boundary": args.boundary, "refine": args.refine,
        "grid_nodes": graph.n_grid(), "mesh_nodes": graph.n_mesh(),
        "mesh_edges": graph.n_mesh_edges(),
        "g2m_edges": graph.g2m.len(), "m2g_edges": graph.m2g.len(),
    });
    mb.output_root(&args.out);
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs, mb: &mut ManifestBuilder) -> Result<()> {
    match args.kind {
        DataKind::Advect => {
            let params = AdvectParams {
                channels: args.channels,
                rotation: args.rotation,
                diffusion: args.diffusion,
                innovation: args.innovation,
                ..Default::default()
            };
            let prov = json!({"generator": "advect", "seed": args.seed, "params": params});
            match (args.refine, &args.out_fine) {
                (Some(r), Some(out_fine)) => {
                    let (coarse, fine) = generate_advection_two_res(
                        params.clone(),
                        args.seed,
                        args.h,
                        args.w,
                        r,
                        args.steps,
                    );
                    fieldio::write_series(&args.out, &coarse, &args.dtype, prov.clone())?;
                    fieldio::write_series(out_fine, &fine, &args.dtype, prov)?;
                    mb.output_root(&args.out);
                    mb.output_root(out_fine);
                }
                (None, None) => {
                    let series =
                        generate_advection(params, args.seed, args.h, args.w, args.steps);
                    fieldio::write_series(&args.out, &series, &args.dtype, prov)?;
                    mb.output_root(&args.out);
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "--refine and --out-fine must be given together".into(),
                    ))
                }
            }
        }
        DataKind::Vortex => {
            let params = VortexParams {
                start: LatLon::new(args.start_lat, args.start_lon),
                remove_after: args.remove_after,
                ..Default::default()
            };
            let scenario = VortexScenario::new(params.clone(), args.h, args.w);
            let series = scenario.generate(args.steps);
            let prov = json!({"generator": "vortex", "params": params});
            fieldio::write_series(&args.out, &series, &args.dtype, prov)?;
            mb.output_root(&args.out);
        }
    }
    mb.config = json!({
        "kind": match args.kind { DataKind::Advect => "advect", DataKind::Vortex => "vortex" },
        "h": args.h, "w": args.w, "steps": args.steps, "channels": args.channels,
        "rotation": args.rotation, "diffusion": args.diffusion,
        "innovation": args.innovation, "dtype": args.dtype,
    });
    mb.seeds = json!({"seed": args.seed});
    Ok(())
}

fn cmd_train(args: &TrainArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.graph);
    mb.input(&args.data);
    let graph = meshgraph::load_graph(&args.graph)?;
    let loaded = load_series(&args.data)?;
    let requested = match args.precision {
        PrecisionArg::F32 => "f32le",
        PrecisionArg::F64 => "f64le",
    };
    loaded.header.require_dtype(requested, args.convert)?;
    if loaded.series.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 steps to train".into()));
    }
    let (fine, window) = match (&args.data_fine, &args.window) {
        (Some(df), Some(w)) => {
            mb.input(df);
            let fine = load_series(df)?;
            let win = parse_window(w, args.boundary, args.refine)?;
            // Restrict the fine series to the window frame.
            let fine_window: Vec<FieldTensor> = fine
                .series
                .steps
                .iter()
                .map(|f| {
                    nesting::extract_region(
                        f,
                        &RegionWindow {
                            row0: win.row0 * win.refine,
                            row1: (win.row1 + 1) * win.refine - 1,
                            col0: win.col0 * win.refine,
                            col1: ((win.col1 + 1) * win.refine - 1) % f.w,
                            boundary_width: 0,
                            refine: 1,
                        },
                        false,
                    )
                })
                .collect::<Result<_>>()?;
            (
                Some(FieldSeries::new(fine.series.channels.clone(), fine_window)),
                Some(win),
            )
        }
        (None, None) => (None, None),
        _ => {
            return Err(Error::InvalidArgument(
                "--data-fine and --window must be given together".into(),
            ))
        }
    };

    let (config, _, _) = match args.precision {
        PrecisionArg::F32 => run_train_typed::<f32>(
            args,
            &graph,
            &loaded.series,
            fine.as_ref(),
            window.as_ref(),
        )?,
        PrecisionArg::F64 => run_train_typed::<f64>(
            args,
            &graph,
            &loaded.series,
            fine.as_ref(),
            window.as_ref(),
        )?,
    };
    mb.config = config;
    mb.seeds = json!({"seed": args.seed});
    mb.output_root(&args.out);
    Ok(())
}

fn cmd_forecast(args: &ForecastArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.graph);
    mb.input(&args.params);
    mb.input(&args.init);
    let graph = meshgraph::load_graph(&args.graph)?;
    let loaded = load_series(&args.init)?;
    let init_step = args.init_step.unwrap_or(loaded.series.len() - 1);
    let init = loaded
        .series
        .steps
        .get(init_step)
        .ok_or_else(|| Error::InvalidArgument(format!("init step {init_step} out of range")))?
        .clone();

    let fields = with_ckpt(&args.params, |bundle| match &bundle {
        ModelBundle::F32(store, extra) => forecast_series(store, extra, &graph, &init, args.steps),
        ModelBundle::F64(store, extra) => forecast_series(store, extra, &graph, &init, args.steps),
    })?;
    if fields.is_empty() {
        return Err(Error::InvalidArgument("forecast needs --steps ≥ 1".into()));
    }
    let series = FieldSeries::new(loaded.series.channels.clone(), fields);
    fieldio::write_series(
        &args.out,
        &series,
        &loaded.header.dtype,
        json!({"generator": "forecast", "init_step": init_step, "steps": args.steps}),
    )?;
    mb.config = json!({"init_step": init_step, "steps": args.steps});
    mb.output_root(&args.out);
    Ok(())
}

fn cmd_nest(args: &NestArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.regional_graph);
    mb.input(&args.regional_ckpt);
    mb.input(&args.data);
    mb.input(&args.data_fine);
    if let (Some(g), Some(c)) = (&args.global_graph, &args.global_ckpt) {
        mb.input(g);
        mb.input(c);
    }
    let rgraph = meshgraph::load_graph(&args.regional_graph)?;
    let window = parse_window(&args.window, args.boundary, args.refine)?;
    let mode: NestMode = args.mode.into();
    let coarse = load_series(&args.data)?;
    let fine = load_series(&args.data_fine)?;

    let fine_window: Vec<FieldTensor> = fine
        .series
        .steps
        .iter()
        .map(|f| {
            nesting::extract_region(
                f,
                &RegionWindow {
                    row0: window.row0 * window.refine,
                    row1: (window.row1 + 1) * window.refine - 1,
                    col0: window.col0 * window.refine,
                    col1: ((window.col1 + 1) * window.refine - 1) % f.w,
                    boundary_width: 0,
                    refine: 1,
                },
                false,
            )
        })
        .collect::<Result<_>>()?;

    let out_fields = with_ckpt(&args.regional_ckpt, |bundle| match bundle {
        ModelBundle::F32(store, extra) => nest_rollout_typed::<f32>(
            &store, &extra, &rgraph, &coarse.series, &fine_window, &window, mode, args,
        ),
        ModelBundle::F64(store, extra) => nest_rollout_typed::<f64>(
            &store, &extra, &rgraph, &coarse.series, &fine_window, &window, mode, args,
        ),
    })?;
    let series = FieldSeries::new(coarse.series.channels.clone(), out_fields);
    fieldio::write_series(
        &args.out,
        &series,
        &coarse.header.dtype,
        json!({"generator": "nest", "mode": mode, "start_step": args.start_step}),
    )?;
    mb.config = json!({
        "mode": mode, "window": args.window, "boundary": args.boundary,
        "refine": args.refine, "steps": args.steps, "start_step": args.start_step,
    });
    mb.output_root(&args.out);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn nest_rollout_typed<T: Real>(
    store: &ParamStore<T>,
    extra: &CkptExtra,
    rgraph: &meshgraph::EarthGraph,
    coarse: &FieldSeries,
    fine_window: &[FieldTensor],
    window: &RegionWindow,
    mode: NestMode,
    args: &NestArgs,
) -> Result<Vec<FieldTensor>> {
    let (model, store) = ModelBundle::rebuild(store, extra)?;
    let gt: GraphTensors<T> = GraphTensors::new(rgraph);
    let stats = &extra.norm;
    let z0 = normalize(&fine_window[args.start_step], stats);

    // With a global checkpoint the nest is driven by the global model's own
    // rollout; otherwise the coarse data sequence stands in for it. The
    // global rollout runs in its own normalized space and its forecasts are
    // re-normalized with the regional statistics before entering the nest.
    let rolled = match (&args.global_graph, &args.global_ckpt) {
        (Some(ggraph_dir), Some(gckpt_dir)) => {
            if args.start_step >= coarse.len() {
                return Err(Error::InvalidArgument("start step outside coarse data".into()));
            }
            let ggraph = meshgraph::load_graph(ggraph_dir)?;
            // Both checkpoints must share a precision; conversion between
            // them is not attempted.
            let (gstore, gextra) = load_params::<T>(gckpt_dir, false)?;
            let gextra: CkptExtra = serde_json::from_value(gextra)?;
            let forecasts =
                forecast_series(&gstore, &gextra, &ggraph, &coarse.steps[args.start_step], args.steps)?;
            let drive: Vec<FieldTensor> =
                forecasts.iter().map(|f| normalize(f, stats)).collect();
            nesting::nng_rollout(
                (&model, &store, &gt),
                GlobalDrive::Sequence(&drive),
                &z0,
                window,
                mode,
                args.steps,
            )?
        }
        (None, None) => {
            if args.start_step + args.steps >= coarse.len() {
                return Err(Error::InvalidArgument(format!(
                    "start {} + steps {} exceeds the {}-step coarse data",
                    args.start_step,
                    args.steps,
                    coarse.len()
                )));
            }
            let coarse_norm: Vec<FieldTensor> = (args.start_step + 1
                ..=args.start_step + args.steps)
                .map(|t| normalize(&coarse.steps[t], stats))
                .collect();
            nesting::nng_rollout(
                (&model, &store, &gt),
                GlobalDrive::Sequence(&coarse_norm),
                &z0,
                window,
                mode,
                args.steps,
            )?
        }
        _ => {
            return Err(Error::InvalidArgument(
                "--global-graph and --global-ckpt must be given together".into(),
            ))
        }
    };
    Ok(rolled.iter().map(|f| denormalize(f, stats)).collect())
}

fn cmd_ensemble(args: &EnsembleArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.graph);
    mb.input(&args.params);
    mb.input(&args.init);
    let graph = meshgraph::load_graph(&args.graph)?;
    let loaded = load_series(&args.init)?;
    let init_step = args.init_step.unwrap_or(loaded.series.len() - 1);
    let init = loaded
        .series
        .steps
        .get(init_step)
        .ok_or_else(|| Error::InvalidArgument(format!("init step {init_step} out of range")))?
        .clone();
    let spec = EnsembleSpec {
        members: args.members,
        noise: PerlinSpec {
            octaves: args.octaves,
            base_period: args.base_period,
            persistence: args.persistence,
            amplitude: args.amplitude,
            seed: args.seed,
        },
    };
    let threads = std::env::var("NESTCAST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let (members, mean) = with_ckpt(&args.params, |bundle| match bundle {
        ModelBundle::F32(store, extra) => {
            ensemble_typed::<f32>(&store, &extra, &graph, &init, &spec, args.steps, threads)
        }
        ModelBundle::F64(store, extra) => {
            ensemble_typed::<f64>(&store, &extra, &graph, &init, &spec, args.steps, threads)
        }
    })?;
    let channels = loaded.series.channels.clone();
    for (n, member) in members.iter().enumerate() {
        let path = args.out.join(format!("member_{n:03}.fld"));
        fieldio::write_series(
            &path,
            &FieldSeries::new(channels.clone(), member.clone()),
            &loaded.header.dtype,
            json!({"generator": "ensemble-member", "member": n}),
        )?;
    }
    fieldio::write_series(
        &args.out.join("mean.fld"),
        &FieldSeries::new(channels, mean),
        &loaded.header.dtype,
        json!({"generator": "ensemble-mean", "members": args.members}),
    )?;
    mb.config = json!({"spec": spec, "steps": args.steps, "threads": threads, "init_step": init_step});
    mb.seeds = json!({"seed": args.seed});
    mb.output_root(&args.out);
    Ok(())
}

fn ensemble_typed<T: Real>(
    store: &ParamStore<T>,
    extra: &CkptExtra,
    graph: &meshgraph::EarthGraph,
    init: &FieldTensor,
    spec: &EnsembleSpec,
    steps: usize,
    threads: usize,
) -> Result<(Vec<Vec<FieldTensor>>, Vec<FieldTensor>)> {
    let (model, store) = ModelBundle::rebuild(store, extra)?;
    let gt: GraphTensors<T> = GraphTensors::new(graph);
    let z0 = normalize(init, &extra.norm);
    let (members, mean) = ensemble_forecast(&model, &store, &gt, &z0, spec, steps, threads)?;
    let denorm = |fields: Vec<FieldTensor>| -> Vec<FieldTensor> {
        fields.iter().map(|f| denormalize(f, &extra.norm)).collect()
    };
    Ok((
        members.into_iter().map(denorm).collect(),
        denorm(mean),
    ))
}

#[allow(clippy::needless_range_loop)] // channel index addresses parallel per-channel arrays
fn cmd_evaluate(args: &EvaluateArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.pred);
    mb.input(&args.truth);
    let pred = load_series(&args.pred)?;
    let truth = load_series(&args.truth)?;
    let steps = pred.series.len().min(truth.series.len());
    if steps == 0 {
        return Err(Error::InvalidArgument("no overlapping steps".into()));
    }
    let first = &pred.series.steps[0];
    if !first.same_shape(&truth.series.steps[0]) {
        return Err(Error::shape("evaluate", "pred and truth shapes differ"));
    }
    let clim = match &args.clim {
        Some(p) => {
            mb.input(p);
            let c = load_series(p)?;
            Some(c.series.steps[0].clone())
        }
        None => None,
    };
    let wanted: Vec<&str> = args.metrics.split(',').map(|s| s.trim()).collect();
    let weights = eval::lat_weights_for(first);
    let c = first.c;

    let mut report = json!({
        "steps": steps,
        "channels": pred.series.channels,
    });
    if wanted.contains(&"rmse") {
        let per_step: Vec<Vec<f64>> = (0..steps)
            .map(|t| eval::rmse(&pred.series.steps[t], &truth.series.steps[t], &weights))
            .collect();
        let mean: Vec<f64> = (0..c)
            .map(|ch| per_step.iter().map(|r| r[ch]).sum::<f64>() / steps as f64)
            .collect();
        report["rmse"] = json!({"per_step": per_step, "mean": mean});
    }
    if wanted.contains(&"acc") {
        match &clim {
            Some(clim) => {
                let per_step: Vec<Vec<f64>> = (0..steps)
                    .map(|t| eval::acc(&pred.series.steps[t], &truth.series.steps[t], clim, &weights))
                    .collect();
                let mean: Vec<f64> = (0..c)
                    .map(|ch| per_step.iter().map(|r| r[ch]).sum::<f64>() / steps as f64)
                    .collect();
                report["acc"] = json!({"per_step": per_step, "mean": mean});
            }
            None => {
                report["acc"] = json!(null);
                eprintln!("warning: acc requested without --clim; skipped");
            }
        }
    }
    if wanted.contains(&"csi") || wanted.contains(&"sedi") {
        // Per-channel exceedance threshold from the truth distribution over
        // the evaluation period.
        let thresholds: Vec<f64> = (0..c)
            .map(|ch| {
                let all: Vec<f64> = (0..steps)
                    .flat_map(|t| truth.series.steps[t].channel(ch).to_vec())
                    .collect();
                eval::quantile(&all, args.threshold_q)
            })
            .collect();
        let mut csi_v = Vec::new();
        let mut sedi_v = Vec::new();
        for ch in 0..c {
            let mut counts = eval::ContingencyCounts::default();
            for t in 0..steps {
                let step_counts = eval::exceedance_counts(
                    &pred.series.steps[t],
                    &truth.series.steps[t],
                    ch,
                    thresholds[ch],
                );
                counts.tp += step_counts.tp;
                counts.fp += step_counts.fp;
                counts.fn_ += step_counts.fn_;
                counts.tn += step_counts.tn;
            }
            csi_v.push(eval::csi(&counts));
            let (s, clamped) = eval::sedi(&counts);
            sedi_v.push(json!({"value": s, "clamped": clamped}));
        }
        report["thresholds"] = json!(thresholds);
        if wanted.contains(&"csi") {
            report["csi"] = json!(csi_v);
        }
        if wanted.contains(&"sedi") {
            report["sedi"] = json!(sedi_v);
        }
    }
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(&args.out, e))?;
    mb.config = json!({"metrics": args.metrics, "threshold_q": args.threshold_q});
    mb.output_root(&args.out);
    Ok(())
}

fn cmd_spectrum(args: &SpectrumArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.field);
    let loaded = load_series(&args.field)?;
    let field = loaded
        .series
        .steps
        .get(args.step)
        .ok_or_else(|| Error::InvalidArgument(format!("step {} out of range", args.step)))?;
    let weights = eval::lat_weights_for(field);
    let spectra: Vec<Vec<f64>> = (0..field.c)
        .map(|ch| eval::zonal_spectrum(field, ch, &weights))
        .collect();
    let errors = match &args.truth {
        Some(truth_path) => {
            mb.input(truth_path);
            let truth = load_series(truth_path)?;
            let tf = truth
                .series
                .steps
                .get(args.step)
                .ok_or_else(|| Error::InvalidArgument("truth step out of range".into()))?;
            Some(
                (0..field.c)
                    .map(|ch| {
                        let pt = eval::zonal_spectrum(tf, ch, &weights);
                        eval::spectral_error(&spectra[ch], &pt)
                    })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let mut csv = String::from("wavenumber");
    for name in &loaded.series.channels {
        csv.push_str(&format!(",power_{name}"));
    }
    if errors.is_some() {
        for name in &loaded.series.channels {
            csv.push_str(&format!(",err_{name}"));
        }
    }
    csv.push('\n');
    for k in 0..spectra[0].len() {
        csv.push_str(&k.to_string());
        for s in &spectra {
            csv.push_str(&format!(",{}", s[k]));
        }
        if let Some(errs) = &errors {
            for e in errs {
                csv.push_str(&format!(",{}", e[k]));
            }
        }
        csv.push('\n');
    }
    fs::write(&args.out, csv).map_err(|e| Error::io(&args.out, e))?;
    mb.config = json!({"step": args.step});
    mb.output_root(&args.out);
    Ok(())
}

fn cmd_track(args: &TrackArgs, mb: &mut ManifestBuilder) -> Result<()> {
    mb.input(&args.fields);
    let loaded = load_series(&args.fields)?;
    let init = parse_csv_numbers::<2>(&args.init, "init position")?;
    let cfg = TrackerConfig {
        vorticity_threshold: args.vorticity_threshold,
        ..Default::default()
    };
    let track = track_cyclone(
        &loaded.series,
        LatLon::new(init[0], init[1]),
        args.start_step,
        &cfg,
    )?;
    let out = json!({"config": cfg, "track": track});
    fs::write(&args.out, serde_json::to_string_pretty(&out)?)
        .map_err(|e| Error::io(&args.out, e))?;
    mb.output_root(&args.out);
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("step,lat,lon,mslp\n");
        for fx in &track.fixes {
            csv.push_str(&format!("{},{},{},{}\n", fx.step, fx.lat, fx.lon, fx.mslp));
        }
        fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
        mb.output_root(csv_path);
    }
    mb.config = json!({"init": args.init, "start_step": args.start_step});
    Ok(())
}

/// Output-path flags whose values `rerun` remaps into the new directory.
const OUT_FLAGS: [&str; 4] = ["--out", "--out-fine", "--csv", "--params-out"];

fn cmd_rerun(args: &RerunArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.manifest).map_err(|e| Error::io(&args.manifest, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut argv = manifest.argv.clone();
    let mut i = 0;
    while i + 1 < argv.len() {
        if OUT_FLAGS.contains(&argv[i].as_str()) {
            let old = PathBuf::from(&argv[i + 1]);
            let name = old
                .file_name()
                .ok_or_else(|| Error::InvalidArgument("bad output path in manifest".into()))?;
            argv[i + 1] = args.out.join(name).to_string_lossy().to_string();
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(run(&argv))
}

/// Execute a full argv (`argv[0]` is the program name). Returns the process
/// exit code: 0 ok, 1 runtime error, 2 usage error, 3 data-format error.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let sub = match &cli.command {
        Command::BuildGraph(_) => "build-graph",
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Forecast(_) => "forecast",
        Command::Nest(_) => "nest",
        Command::Ensemble(_) => "ensemble",
        Command::Evaluate(_) => "evaluate",
        Command::Spectrum(_) => "spectrum",
        Command::Track(_) => "track",
        Command::Rerun(_) => "rerun",
    };
    let mut mb = ManifestBuilder::new(sub, argv);
    let result = match &cli.command {
        Command::BuildGraph(a) => cmd_build_graph(a, &mut mb),
        Command::GenData(a) => cmd_gen_data(a, &mut mb),
        Command::Train(a) => cmd_train(a, &mut mb),
        Command::Forecast(a) => cmd_forecast(a, &mut mb),
        Command::Nest(a) => cmd_nest(a, &mut mb),
        Command::Ensemble(a) => cmd_ensemble(a, &mut mb),
        Command::Evaluate(a) => cmd_evaluate(a, &mut mb),
        Command::Spectrum(a) => cmd_spectrum(a, &mut mb),
        Command::Track(a) => cmd_track(a, &mut mb),
        Command::Rerun(a) => {
            return match cmd_rerun(a) {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
    };
    match result {
        Ok(()) => match mb.finish() {
            Ok(path) => {
                eprintln!("manifest: {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Entry point for the binary.
pub fn run_from_env() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    run(&argv)
}

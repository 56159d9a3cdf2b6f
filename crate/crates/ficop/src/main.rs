//! Batch command-line surface: scene generation, evaluation runs, matching,
//! registration, gradient checks, ablation sweeps and heatmap emission.
//!
//! Exit codes: 0 success, 1 internal failure (e.g. a failed gradient check),
//! 2 configuration validation, 3 partial per-scene failures, 4 I/O.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ficop::matcher::{
    match_global, match_patch_constrained, CorrespondenceSet, Provenance,
};
use ficop::params::ParamSet;
use ficop::pipeline::{
    oracle_correlation, predicted_correlation, run_scenes, CorrelationMode, MatchMode,
    PipelineConfig, QueryMaskMode,
};
use ficop::registration::{register_ransac, register_spectral, RegistrationConfig};
use ficop::scene::ScenePair;
use ficop::synthgen::{generate_scene, write_scene, SynthConfig};
use ficop::tensor_io::{load_scene, read_tensor, write_tensor, TensorBlob, TensorData};
use ficop::{FicopError, Result};

#[derive(Parser)]
#[command(name = "ficop", about = "Fine-grained correspondence 6D pose pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes and an index file.
    Gen(GenArgs),
    /// Run the full pipeline over a scene list and write reports.
    Eval(EvalArgs),
    /// Ablation sweep: eval once per value of a swept knob (requires --sweep).
    Sweep(EvalArgs),
    /// Match a single scene and dump the correspondence set.
    Match(MatchArgs),
    /// Register a dumped correspondence set to a pose estimate.
    Pose(PoseArgs),
    /// Finite-difference verification of the loss gradients.
    Gradcheck(GradcheckArgs),
    /// Render binarized correlation rows as heatmap overlays.
    Viz(VizArgs),
}

/// Flat run configuration; loadable from TOML, every field overridable by a
/// CLI flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    scene_list: String,
    param_dir: Option<String>,
    output_dir: String,
    patch: usize,
    tau: f64,
    d_th: f64,
    lambda1: f64,
    lambda2: f64,
    match_mode: MatchMode,
    correlation_mode: CorrelationMode,
    query_mask_mode: QueryMaskMode,
    registration: RegistrationConfig,
    seed: u64,
    /// 0 = library default thread count.
    parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            scene_list: "scenes/index.jsonl".into(),
            param_dir: None,
            output_dir: "out".into(),
            patch: p.patch,
            tau: p.tau,
            d_th: p.d_th,
            lambda1: 1.0,
            lambda2: 1.0,
            match_mode: p.match_mode,
            correlation_mode: p.correlation_mode,
            query_mask_mode: p.query_mask_mode,
            registration: p.registration,
            seed: p.seed,
            parallelism: 0,
        }
    }
}

impl RunConfig {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            patch: self.patch,
            tau: self.tau,
            d_th: self.d_th,
            correlation_mode: self.correlation_mode,
            match_mode: self.match_mode,
            query_mask_mode: self.query_mask_mode,
            registration: self.registration.clone(),
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(FicopError::Config("lambda1/lambda2 must be nonnegative".into()));
        }
        self.pipeline().validate()
    }
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene_list: Option<String>,
    #[arg(long)]
    param_dir: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    d_th: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// patch_constrained | global
    #[arg(long)]
    match_mode: Option<String>,
    /// oracle | predicted
    #[arg(long)]
    correlation_mode: Option<String>,
    /// object | valid_depth
    #[arg(long)]
    query_mask_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(name: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| FicopError::Config(format!("invalid {name}: {v}")))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            None => RunConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| FicopError::io(path, e))?;
                toml::from_str(&text)
                    .map_err(|e| FicopError::Config(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(v) = &self.scene_list {
            cfg.scene_list = v.clone();
        }
        if let Some(v) = &self.param_dir {
            cfg.param_dir = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.patch {
            cfg.patch = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.d_th {
            cfg.d_th = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = &self.match_mode {
            cfg.match_mode = parse_enum("match_mode", v)?;
        }
        if let Some(v) = &self.correlation_mode {
            cfg.correlation_mode = parse_enum("correlation_mode", v)?;
        }
        if let Some(v) = &self.query_mask_mode {
            cfg.query_mask_mode = parse_enum("query_mask_mode", v)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output directory for the scene tree.
    #[arg(long, default_value = "scenes")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2000)]
    object_points: usize,
    #[arg(long, default_value_t = 0)]
    clutter_points: usize,
    #[arg(long, default_value_t = 0.0)]
    clutter_similarity: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Object copies at unrelated poses in the query view.
    #[arg(long, default_value_t = 0)]
    decoys: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run once per value: e.g. --sweep tau=0.01,0.02,0.03,0.04,0.05
    /// (swappable knobs: tau, d_th, patch).
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Scene manifest to match.
    #[arg(long)]
    manifest: PathBuf,
    /// Output correspondence file (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Optionally dump the correlation map as an FTZ tensor.
    #[arg(long)]
    dump_cp: Option<PathBuf>,
}

#[derive(Args)]
struct PoseArgs {
    /// Correspondence file written by `match`.
    #[arg(long)]
    pairs: PathBuf,
    /// spectral | ransac
    #[arg(long, default_value = "spectral")]
    method: String,
    /// Output JSON file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Instances per loss.
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Corrupt one analytic gradient entry to prove the check catches it.
    #[arg(long, default_value_t = false)]
    inject_bug: bool,
}

#[derive(Args)]
struct VizArgs {
    /// Scene manifest (supplies the base raster and resolution).
    #[arg(long)]
    manifest: PathBuf,
    /// Correlation map dump (FTZ rank-3 tensor N_p x G x G).
    #[arg(long)]
    cp: PathBuf,
    #[arg(long, default_value_t = 0.04)]
    tau: f64,
    /// Single patch index; all patches if omitted.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value = "viz")]
    out_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    scene_id: String,
    manifest: String,
    flags: Vec<String>,
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    // Validates the shared run config too, so a bad tau in the config file
    // fails fast even though generation does not use it.
    args.config.resolve()?;
    let base_seed = args.config.seed.unwrap_or(0);
    std::fs::create_dir_all(&args.out_dir).map_err(|e| FicopError::io(&args.out_dir, e))?;
    let mut index = Vec::new();
    for i in 0..args.n {
        let cfg = SynthConfig {
            seed: base_seed.wrapping_add(i as u64),
            height: args.height,
            width: args.width,
            feature_dim: args.feature_dim,
            n_object_points: args.object_points,
            n_clutter_points: args.clutter_points,
            clutter_similarity: args.clutter_similarity,
            feature_noise_sigma: args.noise_sigma,
            n_decoys: args.decoys,
            ..SynthConfig::default()
        };
        let scene = generate_scene(&cfg)?;
        let dir = args.out_dir.join(format!("scene_{i:04}"));
        write_scene(&scene, &dir)?;
        let mut flags = Vec::new();
        let cloned_clutter = args.clutter_similarity >= 1.0 && args.clutter_points > 0;
        if cloned_clutter || args.decoys > 0 {
            flags.push("high-ambiguity".to_string());
        }
        index.push(IndexEntry {
            scene_id: scene.scene_id.clone(),
            manifest: format!("scene_{i:04}/manifest.json"),
            flags,
        });
    }
    let path = args.out_dir.join("index.jsonl");
    let f = std::fs::File::create(&path).map_err(|e| FicopError::io(&path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for e in &index {
        let line = serde_json::to_string(e).map_err(|e| FicopError::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| FicopError::io(&path, e))?;
    }
    w.flush().map_err(|e| FicopError::io(&path, e))?;
    eprintln!("wrote {} scenes to {}", args.n, args.out_dir.display());
    Ok(())
}

fn load_scene_list(list: &Path) -> Result<Vec<ScenePair>> {
    let text = std::fs::read_to_string(list).map_err(|e| FicopError::io(list, e))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: IndexEntry =
            serde_json::from_str(line).map_err(|e| FicopError::format(list, e.to_string()))?;
        scenes.push(load_scene(&base.join(&entry.manifest))?);
    }
    if scenes.is_empty() {
        return Err(FicopError::Validation(format!("empty scene list {}", list.display())));
    }
    Ok(scenes)
}

fn with_pool<T: Send>(parallelism: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if parallelism == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| FicopError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs one eval pass; returns the number of failed scenes.
fn eval_once(cfg: &RunConfig, report_name: &str) -> Result<usize> {
    let scenes = load_scene_list(Path::new(&cfg.scene_list))?;
    let pipeline = cfg.pipeline();
    let run = with_pool(cfg.parallelism, || run_scenes(&scenes, &pipeline))?;

    let out_dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(out_dir).map_err(|e| FicopError::io(out_dir, e))?;

    #[derive(Serialize)]
    struct ReportFile<'a> {
        config: &'a RunConfig,
        report: Option<&'a ficop::metrics::EvalReport>,
        failures: &'a [(String, String)],
    }
    let path = out_dir.join(report_name);
    let body = serde_json::to_string_pretty(&ReportFile {
        config: cfg,
        report: run.report.as_ref(),
        failures: &run.failures,
    })
    .map_err(|e| FicopError::Config(e.to_string()))?;
    std::fs::write(&path, body + "\n").map_err(|e| FicopError::io(&path, e))?;

    if let Some(r) = &run.report {
        eprintln!(
            "{report_name}: {} scenes, mean AR {:.4}, mean ADD {:.6} m, ADD acc {:.4}, mIoU {:.4}, {} failures",
            r.scenes.len(),
            r.mean_ar,
            r.mean_add,
            r.add_accuracy,
            r.mean_iou,
            run.failures.len()
        );
    }
    for (id, err) in &run.failures {
        eprintln!("scene {id} failed: {err}");
    }
    Ok(run.failures.len())
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let (key, vals) = spec
        .split_once('=')
        .ok_or_else(|| FicopError::Config(format!("sweep spec '{spec}' is not KEY=V1,V2,...")))?;
    let values = vals
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| FicopError::Config(format!("sweep value '{v}' is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Err(FicopError::Config("sweep needs at least one value".into()));
    }
    Ok((key.to_string(), values))
}

fn cmd_eval(args: &EvalArgs, sweep_required: bool) -> Result<usize> {
    let cfg = args.config.resolve()?;
    let Some(spec) = &args.sweep else {
        if sweep_required {
            return Err(FicopError::Config("sweep requires --sweep KEY=V1,V2,...".into()));
        }
        return eval_once(&cfg, "report.json");
    };
    let (key, values) = parse_sweep(spec)?;
    let mut failures = 0;
    for v in values {
        let mut c = cfg.clone();
        match key.as_str() {
            "tau" => c.tau = v,
            "d_th" => c.d_th = v,
            "patch" => c.patch = v as usize,
            other => {
                return Err(FicopError::Config(format!("unknown sweep knob '{other}'")))
            }
        }
        c.validate()?;
        failures += eval_once(&c, &format!("report_{key}_{v}.json"))?;
    }
    Ok(failures)
}

fn cmd_match(args: &MatchArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let scene = load_scene(&args.manifest)?;
    let pipeline = cfg.pipeline();
    let (h, _) = scene.anchor.resolution();
    let grid = pipeline.grid_for(h)?;

    let (c_p, anchor_view, query_view) = match cfg.correlation_mode {
        CorrelationMode::Oracle => {
            (oracle_correlation(&scene, grid)?, scene.anchor.clone(), scene.query.clone())
        }
        CorrelationMode::Predicted => {
            let params = match &cfg.param_dir {
                Some(dir) => ParamSet::load(Path::new(dir))?,
                None => ParamSet::seeded(scene.anchor.feature_dim(), cfg.patch, cfg.seed)?,
            };
            let (p, ea, eq) = predicted_correlation(&scene, &params)?;
            (
                p,
                ficop::scene::ViewData { features: ea, ..scene.anchor.clone() },
                ficop::scene::ViewData { features: eq, ..scene.query.clone() },
            )
        }
    };

    if let Some(path) = &args.dump_cp {
        let blob = TensorBlob::new(
            c_p.values.shape().to_vec(),
            TensorData::F64(c_p.values.iter().copied().collect()),
        )?;
        write_tensor(&blob, path)?;
    }

    let mask_a = scene.anchor.mask.clone();
    let mask_q = match cfg.query_mask_mode {
        QueryMaskMode::Object => scene.query.mask.clone(),
        QueryMaskMode::ValidDepth => scene.query.valid_depth_mask(),
    };
    let set = match cfg.match_mode {
        MatchMode::PatchConstrained => match_patch_constrained(
            &anchor_view,
            &query_view,
            &mask_a,
            &mask_q,
            &c_p,
            cfg.tau,
            cfg.d_th,
        )?,
        MatchMode::Global => match_global(&anchor_view, &query_view, &mask_a, &mask_q, cfg.d_th)?,
    };
    set.write_jsonl(&args.out)?;
    eprintln!("{} pairs -> {}", set.len(), args.out.display());
    Ok(())
}

fn cmd_pose(args: &PoseArgs) -> Result<()> {
    let set = CorrespondenceSet::read_jsonl(&args.pairs, Provenance::Global)?;
    let cfg = RegistrationConfig { seed: args.seed, ..Default::default() };
    let est = match args.method.as_str() {
        "spectral" => register_spectral(&set, &cfg)?,
        "ransac" => register_ransac(&set, &cfg)?,
        other => return Err(FicopError::Config(format!("unknown method '{other}'"))),
    };
    let body = serde_json::to_string_pretty(&est)
        .map_err(|e| FicopError::Config(e.to_string()))?;
    match &args.out {
        Some(path) => std::fs::write(path, body + "\n").map_err(|e| FicopError::io(path, e))?,
        None => println!("{body}"),
    }
    eprintln!(
        "{}: {} inliers, rms {:.6}{}",
        args.method,
        est.inlier_count,
        est.rms_residual,
        if est.low_confidence { " (LOW CONFIDENCE)" } else { "" }
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let tol = 1e-4;
    let mut all_ok = true;
    println!("{:<12} {:>6} {:>14} {:>6}", "loss", "seed", "max_rel_err", "ok");
    for seed in 0..args.trials {
        let rel = if args.inject_bug {
            ficop::losses::fd_check_feature_injected_bug(seed)?
        } else {
            ficop::losses::fd_check_feature(seed)?
        };
        let ok = rel < tol;
        all_ok &= ok;
        println!("{:<12} {:>6} {:>14.3e} {:>6}", "feature", seed, rel, if ok { "pass" } else { "FAIL" });
    }
    for seed in 0..args.trials {
        let rel = ficop::losses::fd_check_correlation(seed)?;
        let ok = rel < tol;
        all_ok &= ok;
        println!("{:<12} {:>6} {:>14.3e} {:>6}", "correlation", seed, rel, if ok { "pass" } else { "FAIL" });
    }
    Ok(all_ok)
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    let scene = load_scene(&args.manifest)?;
    let blob = read_tensor(&args.cp)?;
    let shape = blob.shape().to_vec();
    if shape.len() != 3 {
        return Err(FicopError::format(&args.cp, "correlation dump must be rank 3"));
    }
    let TensorData::F64(data) = blob.data() else {
        return Err(FicopError::format(&args.cp, "correlation dump must be f64"));
    };
    let values = ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), data.clone())
        .map_err(|e| FicopError::format(&args.cp, e.to_string()))?;
    let g1 = (shape[0] as f64).sqrt() as usize;
    let c_p = ficop::pcp::PatchCorrelationMap::new(values, g1, shape[1])?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| FicopError::io(&args.out_dir, e))?;
    let patches: Vec<usize> = match args.patch {
        Some(p) => vec![p],
        None => (0..c_p.n_patches()).collect(),
    };
    for p in patches {
        let raster = ficop::viz::patch_overlay(&c_p, args.tau, p, &scene.query.depth)?;
        raster.write_ppm(&args.out_dir.join(format!("patch_{p:03}.ppm")))?;
    }
    eprintln!("heatmaps written to {}", args.out_dir.display());
    Ok(())
}

fn exit_for(err: &FicopError) -> ExitCode {
    match err {
        FicopError::Config(_) | FicopError::Validation(_) => ExitCode::from(2),
        FicopError::Io { .. } | FicopError::Format { .. } => ExitCode::from(4),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<ExitCode> = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a).map(|()| ExitCode::SUCCESS),
        Cmd::Eval(a) => cmd_eval(a, false).map(|failures| {
            if failures > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS }
        }),
        Cmd::Sweep(a) => cmd_eval(a, true).map(|failures| {
            if failures > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS }
        }),
        Cmd::Match(a) => cmd_match(a).map(|()| ExitCode::SUCCESS),
        Cmd::Pose(a) => cmd_pose(a).map(|()| ExitCode::SUCCESS),
        Cmd::Gradcheck(a) => cmd_gradcheck(a).map(|ok| {
            if ok { ExitCode::SUCCESS } else { ExitCode::from(1) }
        }),
        Cmd::Viz(a) => cmd_viz(a).map(|()| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

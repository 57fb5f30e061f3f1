//! `autolift` command-line driver.
//!
//! Payloads go to stdout as JSON; logs and errors go to stderr as JSON
//! lines. Output files are written to a temporary sibling and renamed into
//! place, so a failed run never leaves a partial file behind.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use autolift::aggregate::{aggregate_sweeps, AggregationStrategy};
use autolift::eval::{default_bands, evaluate, stratify};
use autolift::ingest::{
    load_annotations, load_detections, load_scene, write_annotations, write_points, SceneManifest, ScoredAnnotation,
};
use autolift::pipeline::{annotate, with_threads, PipelineConfig};
use autolift::prior::ExpertIndex;
use autolift::refine::refine_sequence;
use autolift::score::{default_alpha_grid, tune_alpha};
use autolift::synth::{generate_scene, random_scene_spec, write_scene, RandomSceneOptions, SceneSpec};

#[derive(Parser)]
#[command(name = "autolift", version, about = "Lift 2D detections into 3D cuboids on LiDAR sweeps")]
struct Cli {
    /// Worker threads (0 = one per core). Overrides AUTOLIFT_THREADS and the config file.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice. Overrides AUTOLIFT_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Lift a scene's 2D detections into scored world-frame cuboids.
    Annotate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Expert prior records (NDJSON).
        #[arg(long)]
        expert: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Add a breakdown by distance from the ego vehicle.
        #[arg(long)]
        stratify: bool,
        /// Scene manifest supplying ego positions for --stratify.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Generate a synthetic scene in the ingest formats.
    Synth {
        /// Scene spec JSON. Without it a random scene is drawn from --seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Options for the random scene (JSON).
        #[arg(long, conflicts_with = "spec")]
        options: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Pick the score fusion weight that maximizes 3D mAP.
    TuneAlpha {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Write one frame's motion-compensated multi-sweep cloud.
    AggregateOnly {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        frame: String,
        /// Use this class's window instead of --past/--future.
        #[arg(long, conflicts_with_all = ["past", "future"])]
        class: Option<String>,
        #[arg(long, default_value_t = 0)]
        past: u32,
        #[arg(long, default_value_t = 0)]
        future: u32,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run track association and score refinement on annotations.
    TrackOnly {
        #[arg(long)]
        input: PathBuf,
        /// Scene manifest giving frame order and timestamps.
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn log(level: &str, msg: &str, fields: serde_json::Value) {
    let mut line = json!({ "level": level, "msg": msg });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

fn load_config(arg: &ConfigArg, cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &arg.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<PipelineConfig>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes through `write` into a temporary sibling of `out`, then renames.
fn atomic_write(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .with_context(|| format!("output path {} has no file name", out.display()))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = out.with_file_name(tmp_name);
    let result = write(&tmp).and_then(|()| {
        std::fs::rename(&tmp, out).with_context(|| format!("renaming into {}", out.display()))
    });
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn ego_positions(manifest: &Path) -> Result<HashMap<String, [f64; 2]>> {
    let m = SceneManifest::load(manifest)?;
    Ok(m.sweeps
        .iter()
        .map(|s| (s.frame_id(), [s.ego_pose.translation[0], s.ego_pose.translation[1]]))
        .collect())
}

/// Fills unset flags from the environment. The variable is only read when
/// the flag is absent, so a flag always wins even over a malformed value.
fn env_fallback<T: std::str::FromStr>(flag: &mut Option<T>, var: &str) -> Result<()>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    if flag.is_none() {
        if let Ok(v) = std::env::var(var) {
            *flag = Some(v.trim().parse().with_context(|| format!("parsing {var}={v:?}"))?);
        }
    }
    Ok(())
}

fn run(cli: &mut Cli) -> Result<()> {
    env_fallback(&mut cli.threads, "AUTOLIFT_THREADS")?;
    env_fallback(&mut cli.seed, "AUTOLIFT_SEED")?;
    let cli = &*cli;
    match &cli.verb {
        Verb::Annotate {
            scene,
            detections,
            expert,
            config,
            out,
        } => {
            let cfg = load_config(config, cli)?;
            let start = Instant::now();
            let scene = load_scene(scene, cfg.sweep_format)?;
            let dets = load_detections(detections, &cfg.taxonomy)?;
            let experts = match expert {
                Some(p) => ExpertIndex::load(p)?,
                None => ExpertIndex::default(),
            };
            log(
                "info",
                "annotating",
                json!({ "sweeps": scene.sweeps.len(), "detections": dets.len(), "experts": experts.len() }),
            );
            let output = with_threads(cfg.threads, || annotate(&scene, &dets, &experts, &cfg))?;
            atomic_write(out, |tmp| Ok(write_annotations(&output.annotations, tmp)?))?;
            let mut summary = serde_json::to_value(&output.summary)?;
            summary["wall_time_s"] = json!(start.elapsed().as_secs_f64());
            summary["out"] = json!(out);
            print_json(&summary)
        }
        Verb::Eval {
            pred,
            gt,
            config,
            stratify: by_band,
            scene,
        } => {
            let cfg = load_config(config, cli)?;
            let preds = load_annotations(pred)?;
            let gts = load_annotations(gt)?;
            let (report, bands) = with_threads(cfg.threads, || -> Result<_> {
                let report = evaluate(&preds, &gts, &cfg.eval);
                let bands = if *by_band {
                    let ego = match scene {
                        Some(m) => ego_positions(m)?,
                        None => HashMap::new(),
                    };
                    Some(stratify(&preds, &gts, &ego, &default_bands(), &cfg.eval))
                } else {
                    None
                };
                Ok((report, bands))
            })?;
            eprint!("{}", report.to_table());
            let mut payload = json!({ "report": report });
            if let Some(b) = bands {
                payload["bands"] = serde_json::to_value(b)?;
            }
            print_json(&payload)
        }
        Verb::Synth {
            spec,
            options,
            out,
            config,
        } => {
            let cfg = load_config(config, cli)?;
            let spec: SceneSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
                    let mut s: SceneSpec =
                        serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?;
                    if let Some(seed) = cli.seed {
                        s.seed = seed;
                    }
                    s
                }
                None => {
                    let opts: RandomSceneOptions = match options {
                        Some(p) => serde_json::from_str(
                            &std::fs::read_to_string(p).with_context(|| format!("reading options {}", p.display()))?,
                        )
                        .with_context(|| format!("parsing options {}", p.display()))?,
                        None => RandomSceneOptions::default(),
                    };
                    random_scene_spec(cfg.seed, &cfg.taxonomy, &opts)?
                }
            };
            let gen = generate_scene(&spec)?;
            if out.exists() && std::fs::read_dir(out)?.next().is_some() {
                bail!("output directory {} is not empty", out.display());
            }
            let staging = out.with_file_name(format!(
                ".{}.{}.tmp",
                out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                std::process::id()
            ));
            let written = write_scene(&gen, &staging, cfg.sweep_format).map_err(anyhow::Error::from);
            let paths = written.and_then(|_| {
                if out.exists() {
                    std::fs::remove_dir(out)?;
                }
                std::fs::rename(&staging, out).with_context(|| format!("renaming into {}", out.display()))?;
                Ok(())
            });
            if let Err(e) = paths {
                let _ = std::fs::remove_dir_all(&staging);
                return Err(e);
            }
            print_json(&json!({
                "objects": spec.objects.len(),
                "sweeps": gen.scene.sweeps.len(),
                "detections": gen.detections.len(),
                "ground_truth": gen.ground_truth.len(),
                "out": out,
            }))
        }
        Verb::TuneAlpha { pred, gt, config } => {
            let cfg = load_config(config, cli)?;
            let preds = load_annotations(pred)?;
            let gts = load_annotations(gt)?;
            let alpha = with_threads(cfg.threads, || tune_alpha(&preds, &gts, &default_alpha_grid(), &cfg.eval))?;
            print_json(&json!({ "alpha": alpha }))
        }
        Verb::AggregateOnly {
            scene,
            frame,
            class,
            past,
            future,
            config,
            out,
        } => {
            let cfg = load_config(config, cli)?;
            let scene = load_scene(scene, cfg.sweep_format)?;
            let idx = scene
                .frame_index(frame)
                .with_context(|| format!("unknown frame `{frame}`"))?;
            let strat = match class {
                Some(c) => cfg.taxonomy.get(c)?.aggregation,
                None => AggregationStrategy {
                    past: *past,
                    future: *future,
                },
            };
            let points: Vec<autolift::Point3f32> = aggregate_sweeps(&scene.sweeps, idx, strat)?;
            let records: Vec<[f32; 4]> = points.iter().map(|p| [p.x, p.y, p.z, 0.0]).collect();
            atomic_write(out, |tmp| Ok(write_points(tmp, &records, cfg.sweep_format)?))?;
            print_json(&json!({
                "frame": frame,
                "past": strat.past,
                "future": strat.future,
                "points": records.len(),
                "out": out,
            }))
        }
        Verb::TrackOnly {
            input,
            scene,
            config,
            out,
        } => {
            let cfg = load_config(config, cli)?;
            let manifest = SceneManifest::load(scene)?;
            let anns = load_annotations(input)?;
            let order: HashMap<String, usize> = manifest
                .sweeps
                .iter()
                .enumerate()
                .map(|(i, s)| (s.frame_id(), i))
                .collect();
            let mut frames: Vec<Vec<ScoredAnnotation>> = vec![Vec::new(); manifest.sweeps.len()];
            for a in anns {
                let i = *order
                    .get(&a.frame_id)
                    .with_context(|| format!("annotation frame `{}` not in the scene", a.frame_id))?;
                frames[i].push(a);
            }
            let timestamps: Vec<i64> = manifest.sweeps.iter().map(|s| s.timestamp).collect();
            let tracks = refine_sequence(&mut frames, &timestamps, &cfg.taxonomy, cfg.velocity);
            let flat: Vec<ScoredAnnotation> = frames.into_iter().flatten().collect();
            atomic_write(out, |tmp| Ok(write_annotations(&flat, tmp)?))?;
            print_json(&json!({ "annotations": flat.len(), "tracks": tracks.len(), "out": out }))
        }
    }
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    match run(&mut cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            log("error", &e.to_string(), json!({ "chain": chain }));
            ExitCode::FAILURE
        }
    }
}

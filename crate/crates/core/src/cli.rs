use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use tcn_gesture::analysis::{count, lookahead, probe};
use tcn_gesture::checkpoint::Checkpoint;
use tcn_gesture::config::RunConfig;
use tcn_gesture::dataio::{build_dataset, read_clip, Manifest, Split, ThermalClip};
use tcn_gesture::encoder::resnet18_descriptor;
use tcn_gesture::evaluation::{delta_sweep, map_score, pr_table, stitch_test_video, top1_accuracy, ClassifyMode, FrameOracle};
use tcn_gesture::graph::LayerGraph;
use tcn_gesture::model::GestureModel;
use tcn_gesture::streaming::{stream_events_multi, StreamConfig, StreamState};
use tcn_gesture::tcn::TcnConfig;
use tcn_gesture::training::{train, LossKind, Resume, TrainConfig};
use tcn_gesture::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tcn-gesture", version, about = "Thermal hand gesture recognition with mixed causal TCNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the full default configuration as JSON.
    PrintConfig,
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Take generator parameters from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from scratch with the configured loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for checkpoints and the metric log.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Continue from trained weights with the CTC loss.
    FinetuneCtc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "runs/ctc")]
        out: PathBuf,
    },
    /// Top-1 clip accuracy on the test split.
    EvalClf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Ctc)]
        mode: Mode,
    },
    /// Detection mAP on the stitched test video for each output offset.
    EvalDetect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// Offsets as `A..B` (inclusive) or a comma list; defaults to the config.
        #[arg(long)]
        delta_sweep: Option<String>,
        /// Write per-class precision/recall tables here, one file per offset.
        #[arg(long)]
        pr_dir: Option<PathBuf>,
        /// Replace the model with a ground-truth replay.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Stream a clip (or the stitched test video) frame by frame and print detections.
    Stream {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Clip container to stream.
        #[arg(long, conflicts_with = "config")]
        input: Option<PathBuf>,
        /// Stream the stitched test video of this config instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 48)]
        window: usize,
        /// Also print every emitted probability row.
        #[arg(long)]
        emissions: bool,
    },
    /// Exact parameter and FLOP counts.
    Count {
        /// Config file or preset (tcn-f64, tcn-f128, resnet18, mix2-4x4, causal-4x5, noncausal-4x5).
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 48)]
        steps: usize,
        /// One JSON object per graph instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Closed-form and gradient-probed receptive field.
    ProbeRf {
        /// Config file or preset, as for `count`.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Ce,
    Ctc,
}

impl From<Mode> for ClassifyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ce => ClassifyMode::Ce,
            Mode::Ctc => ClassifyMode::Ctc,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintConfig => {
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
        Command::GenData {
            out,
            clips,
            seed,
            config,
        } => {
            let params = match config {
                Some(p) => RunConfig::load(&p)?.data.generator,
                None => Default::default(),
            };
            let m = build_dataset(&out, clips, seed, &params)?;
            println!("wrote {} clips to {}", m.records.len(), out.display());
            Ok(())
        }
        Command::Train { config, resume, out } => {
            let cfg = RunConfig::load(&config)?;
            let model = GestureModel::new(cfg.model.clone(), cfg.training.seed)?;
            run_training(&cfg, cfg.training.clone(), model, resume.as_deref(), &out)
        }
        Command::FinetuneCtc {
            config,
            init,
            resume,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut model = Checkpoint::load(&init)?.into_model()?;
            // fresh optimizer for the new objective
            model.params = model.params.cast();
            let tc = TrainConfig {
                loss: LossKind::Ctc,
                ..cfg.training.clone()
            };
            run_training(&cfg, tc, model, resume.as_deref(), &out)
        }
        Command::EvalClf { config, model, mode } => {
            let cfg = RunConfig::load(&config)?;
            let model = Checkpoint::load(&model)?.into_model()?;
            let test = load_split(&cfg, Split::Test)?;
            let acc = top1_accuracy(&model, &test, mode.into())?;
            println!("top1={acc:.4} mode={mode:?} clips={}", test.len());
            Ok(())
        }
        Command::EvalDetect {
            config,
            model,
            delta_sweep: sweep,
            pr_dir,
            oracle,
        } => {
            let cfg = RunConfig::load(&config)?;
            let deltas = match sweep {
                Some(s) => parse_deltas(&s)?,
                None => cfg.evaluation.deltas.clone(),
            };
            let test = load_split(&cfg, Split::Test)?;
            let video = stitch_test_video(&test, cfg.evaluation.stitch_fraction, cfg.evaluation.seed)?;
            let window = cfg.training.window;
            let theta = cfg.evaluation.theta_floor;
            info!("stitched video: {} frames, {} nuclei", video.len(), video.nuclei.len());
            let rows = if oracle {
                let o = FrameOracle::new(&video.nuclei, video.len(), cfg.model.tcn.classes)?;
                delta_sweep(&o, &video, window, &deltas, theta)?
            } else {
                let path = model.expect("clap requires --model without --oracle");
                let m = Checkpoint::load(&path)?.into_model()?;
                if let Some(dir) = &pr_dir {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let events = stream_events_multi(&m, &video.frames, video.height, video.width, window, &deltas, theta)?;
                    for (d, ev) in deltas.iter().zip(&events) {
                        let report = map_score(ev, &video.nuclei, m.classes())?;
                        let p = dir.join(format!("pr_delta_{d:02}.tsv"));
                        fs::write(&p, pr_table(&report)).map_err(|e| Error::io(&p, e))?;
                    }
                }
                delta_sweep(&m, &video, window, &deltas, theta)?
            };
            println!("delta\tmap\tevents");
            for r in rows {
                println!("{}\t{:.4}\t{}", r.delta, r.map, r.events);
            }
            Ok(())
        }
        Command::Stream {
            model,
            delta,
            input,
            config,
            window,
            emissions,
        } => {
            let m = Checkpoint::load(&model)?.into_model()?;
            let (frames, h, w, fps) = match (input, config) {
                (Some(p), _) => {
                    let c = read_clip(&p)?;
                    (c.frames, c.height, c.width, c.fps)
                }
                (None, Some(p)) => {
                    let cfg = RunConfig::load(&p)?;
                    let v = stitch_test_video(&load_split(&cfg, Split::Test)?, cfg.evaluation.stitch_fraction, cfg.evaluation.seed)?;
                    (v.frames, v.height, v.width, v.fps)
                }
                (None, None) => return Err(Error::Config("stream needs --input or --config".into())),
            };
            let mut state = StreamState::new(StreamConfig {
                window,
                delta,
                ..StreamConfig::default()
            })?;
            println!("{}", lag_label(delta, fps));
            let mut out = std::io::stdout().lock();
            let px = h * w;
            for frame in frames.chunks(px) {
                let step = state.push_frame(&m, frame, h, w)?;
                if let (true, Some(p)) = (emissions, &step.prediction) {
                    let row: Vec<String> = p.probs.iter().map(|v| format!("{v:.4}")).collect();
                    writeln!(out, "emit frame={} attributed={} probs={}", p.frame, p.attributed, row.join(","))
                        .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
                }
                if let Some(e) = step.event {
                    print_event(&mut out, &e)?;
                }
            }
            if let Some(e) = state.finish() {
                print_event(&mut out, &e)?;
            }
            Ok(())
        }
        Command::Count { model, steps, json } => {
            for (label, graph) in resolve_graphs(&model)? {
                let report = count(&graph, steps)?;
                if json {
                    println!("{}", serde_json::json!({ "graph": label, "cost": report }));
                } else {
                    println!("{label}: {report}");
                }
            }
            Ok(())
        }
        Command::ProbeRf { model, seed, json } => {
            let tcn = resolve_tcn(&model)?;
            let formula = lookahead(&tcn);
            let probed = probe(&tcn, seed)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({ "model": tcn.label(), "closed_form": formula, "probed": probed })
                );
            } else {
                println!("{}: closed-form {formula}", tcn.label());
                println!("{}: probed      {probed}", tcn.label());
            }
            if formula != probed {
                return Err(Error::Numeric(format!("probe {probed} disagrees with closed form {formula}")));
            }
            Ok(())
        }
    }
}

fn print_event(out: &mut impl Write, e: &tcn_gesture::streaming::DetectionEvent) -> Result<()> {
    writeln!(
        out,
        "event frame={} class={} score={:.4}{}",
        e.frame,
        e.class,
        e.score,
        if e.warm_up { " warm_up" } else { "" }
    )
    .map_err(|err| Error::io(Path::new("<stdout>"), err))
}

/// Human-readable latency of an output offset, e.g. `lag=1 frame (62.5 ms @16FPS)`.
pub fn lag_label(delta: usize, fps: f32) -> String {
    let unit = if delta == 1 { "frame" } else { "frames" };
    format!("lag={delta} {unit} ({:.1} ms @{}FPS)", delta as f64 * 1000.0 / fps as f64, fps)
}

/// Parses `A..B` (inclusive) or `a,b,c`.
pub fn parse_deltas(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse offsets {s:?}; use A..B or a,b,c"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<ThermalClip>> {
    cfg.require_data()?;
    Manifest::read(&cfg.data.dir)?.load(split)
}

fn run_training(cfg: &RunConfig, tc: TrainConfig, mut model: GestureModel, resume: Option<&Path>, out: &Path) -> Result<()> {
    let train_clips = load_split(cfg, Split::Train)?;
    let test_clips = load_split(cfg, Split::Test)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resume = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let state = ck
                .state
                .clone()
                .ok_or_else(|| Error::Data(format!("{} holds no training state", path.display())))?;
            let best_path = path.with_file_name("best.thgm");
            let best = if best_path.exists() {
                Some(Checkpoint::load(&best_path)?.params)
            } else {
                None
            };
            model = ck.into_model()?;
            Some(Resume { state, best })
        }
        None => None,
    };
    let seed = tc.seed;
    let log_path = out.join("metrics.jsonl");
    let outcome = train(&mut model, &train_clips, &test_clips, &tc, resume, &mut |r| {
        let last = Checkpoint::from_model(r.model, Some(tc.clone()), seed, Some(r.state.clone()));
        last.save(&out.join("last.thgm"))?;
        if r.improved {
            Checkpoint::from_model(r.model, Some(tc.clone()), seed, None).save(&out.join("best.thgm"))?;
        }
        let log: String = r
            .state
            .history
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect();
        fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))
    })?;
    let best = Checkpoint {
        model: model.config.clone(),
        train: Some(tc.clone()),
        seed,
        params: outcome.best,
        state: None,
    };
    best.save(&out.join("best.thgm"))?;
    match (outcome.state.best_epoch, outcome.state.best_accuracy) {
        (Some(e), Some(a)) => println!("best epoch {e}: test top-1 {a:.4} ({:?} mode)", tc.loss),
        _ => println!("no epochs run"),
    }
    Ok(())
}

/// Graphs named by a config path or preset, each with a label.
fn resolve_graphs(spec: &str) -> Result<Vec<(String, LayerGraph)>> {
    if spec == "resnet18" {
        return Ok(vec![("resnet18".into(), resnet18_descriptor())]);
    }
    if Path::new(spec).is_file() {
        let cfg = RunConfig::load(Path::new(spec))?;
        return Ok(vec![
            ("encoder".into(), cfg.model.encoder.graph()?),
            (cfg.model.tcn.label(), cfg.model.tcn.graph()?),
            ("total".into(), cfg.model.graph()?),
        ]);
    }
    let tcn = resolve_tcn(spec)?;
    Ok(vec![(tcn.label(), tcn.graph()?)])
}

/// Temporal network named by a config path or preset.
pub fn resolve_tcn(spec: &str) -> Result<TcnConfig> {
    match spec {
        "tcn-f64" => return Ok(TcnConfig::reference_f64()),
        "tcn-f128" => return Ok(TcnConfig::reference_f128()),
        _ => {}
    }
    if Path::new(spec).is_file() {
        return Ok(RunConfig::load(Path::new(spec))?.model.tcn);
    }
    let bad = || {
        Error::Config(format!(
            "{spec:?} is neither a file nor a preset (tcn-f64, tcn-f128, resnet18, causal-SxB, noncausal-SxB, mixM-SxB)"
        ))
    };
    let (kind, shape) = spec.split_once('-').ok_or_else(bad)?;
    let (s, b) = shape.split_once('x').ok_or_else(bad)?;
    let stages: usize = s.parse().map_err(|_| bad())?;
    let blocks: usize = b.parse().map_err(|_| bad())?;
    let non_causal = match kind {
        "causal" => 0,
        "noncausal" => blocks,
        k => k.strip_prefix("mix").and_then(|m| m.parse().ok()).ok_or_else(bad)?,
    };
    let cfg = TcnConfig::mixed(stages, blocks, non_causal, 64, 512, 10);
    cfg.validate()?;
    Ok(cfg)
}

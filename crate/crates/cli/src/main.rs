//! `radar-mot` command-line driver.

mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use radar_mot::associator::{read_records, write_records};
use radar_mot::evaluator::{evaluate, sweep, write_metrics_json, write_sweep_csv, EvalSequence, MetricReport, SweepAxis, SweepRow};
use radar_mot::pipeline::{eval_sequence, read_external_detections, run_train, run_track, sequence_truth, PipelineConfig, TrackRun};
use radar_mot::radar::{load_sequence, save_labels, save_sequence, Sequence};
use radar_mot::supervision::{tiny_architecture, toy_pair, write_epoch_log, write_train_log, EpochSummary, GradCheckConfig, Objective, TOY_SEED};
use radar_mot::Error;
use rayon::prelude::*;

use plot::{line_chart, Series};

const LOG_ENV: &str = "RADAR_MOT_LOG";

#[derive(Parser, Debug)]
#[command(name = "radar-mot", version, about = "Moving-object detection and tracking on 4D radar sequences")]
struct Cli {
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, global = true, env = "RADAR_MOT_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for per-sequence work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track moving objects through one or more sequences.
    Track(TrackArgs),
    /// Two-stage training on labeled sequences.
    Train(TrainArgs),
    /// Score tracks against ground truth.
    Eval(EvalArgs),
    /// Write synthetic sequences with per-point labels.
    Synth(SynthArgs),
    /// Compare analytic and numeric gradients on a toy frame pair.
    GradCheck(GradCheckArgs),
    /// Evaluate across values of one evaluation parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Sequence directories, or directories containing them.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to load (overrides `paths.weights`).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use ground-truth flow and motion instead of the network.
    #[arg(long)]
    cheat: bool,
    /// External detections: a directory of `<sequence>.jsonl` files, or one file for a single sequence.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Also write per-frame predicted flow under `<out>/<sequence>/flow/`.
    #[arg(long)]
    flow_dump: bool,
    /// Also write per-frame wall-clock timings to `timing.csv`.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Skip stage 1 and start stage 2 from this checkpoint.
    #[arg(long)]
    resume_stage1: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output of `track`.
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// IoU thresholds of the sweep written to `sweep.csv`.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    iou_values: Vec<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `min_points_valid` or `iou_threshold`.
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences (overrides `synthetic.n_sequences`).
    #[arg(long)]
    count: Option<usize>,
    /// Seed of the first sequence (overrides `synthetic.scene.rng_seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = TOY_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

enum Failure {
    Core(Error),
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Parse { .. } | Error::Config(_) | Error::Weights(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Usage(m)) | Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Track(a) => {
            if a.cheat {
                cfg.cheat_mode = true;
            }
            if a.weights.is_some() {
                cfg.paths.weights = a.weights.clone();
            }
            if a.detections.is_some() {
                cfg.paths.external_detections = a.detections.clone();
            }
            cmd_track(&cfg, &a)
        }
        Command::Train(a) => cmd_train(&mut cfg, &a),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Synth(a) => cmd_synth(&mut cfg, &a),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Sweep(a) => cmd_sweep(&cfg, &a),
    })
}

fn is_sequence_dir(p: &Path) -> bool {
    p.join("meta.json").is_file() || p.join("frames").is_dir()
}

/// Expands `--data` arguments into named sequence directories, in argument order
/// and then by name within a parent directory.
fn resolve_data(paths: &[PathBuf]) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(Error::Validation(format!("data directory {} does not exist", p.display())).into());
        }
        if is_sequence_dir(p) {
            out.push((dir_name(p), p.clone()));
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir() && is_sequence_dir(c))
            .collect();
        children.sort();
        if children.is_empty() {
            return Err(Error::Validation(format!("{} holds no sequences", p.display())).into());
        }
        out.extend(children.into_iter().map(|c| (dir_name(&c), c)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (n, _) in &out {
        if !seen.insert(n.clone()) {
            return Err(Error::Validation(format!("sequence name {n} appears twice")).into());
        }
    }
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.canonicalize()
        .ok()
        .and_then(|c| c.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| p.display().to_string())
}

fn load_all(dirs: &[(String, PathBuf)]) -> CliResult<Vec<Sequence<f64>>> {
    let seqs: radar_mot::Result<Vec<_>> = dirs.par_iter().map(|(_, d)| load_sequence::<f64>(d)).collect();
    Ok(seqs?)
}

fn mkdir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e).into())
}

fn write_text(p: &Path, s: &str) -> CliResult<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e).into())
}

fn to_json<S: serde::Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn external_for(cfg: &PipelineConfig, name: &str, n_sequences: usize) -> CliResult<Option<BTreeMap<u64, Vec<Vec<usize>>>>> {
    let Some(src) = &cfg.paths.external_detections else {
        if cfg.ablations.detector == radar_mot::pipeline::DetectorSource::External {
            return Err(Error::Config("detector = \"external\" needs --detections or paths.external_detections".into()).into());
        }
        return Ok(None);
    };
    let file = if src.is_dir() {
        src.join(format!("{name}.jsonl"))
    } else if n_sequences == 1 {
        src.clone()
    } else {
        return Err(Error::Validation("a single detections file only fits a single sequence".into()).into());
    };
    Ok(Some(read_external_detections(&file)?))
}

fn flow_csv(flow: &ndarray::Array2<f64>) -> String {
    let mut s = String::from("vx,vy,vz\n");
    for r in flow.rows() {
        let _ = writeln!(s, "{:.6},{:.6},{:.6}", r[0], r[1], r[2]);
    }
    s
}

fn write_track_outputs(dir: &Path, seq: &Sequence<f64>, run: &TrackRun<f64>, a: &TrackArgs) -> CliResult<()> {
    mkdir(dir)?;
    write_records(&dir.join("tracks.jsonl"), &run.records)?;
    write_text(&dir.join("summary.json"), &to_json(&run.summary))?;
    if a.flow_dump {
        let fd = dir.join("flow");
        mkdir(&fd)?;
        for (af, flow) in seq.frames.iter().zip(&run.flows) {
            write_text(&fd.join(format!("{:06}.csv", af.frame.frame_index)), &flow_csv(flow))?;
        }
    }
    if a.timing {
        let mut s = String::from("frame_index,points,moving,clusters,tracks,elapsed_ms\n");
        for t in &run.timings {
            let _ = writeln!(s, "{},{},{},{},{},{:.3}", t.frame_index, t.points, t.moving, t.clusters, t.tracks, t.elapsed_ms);
        }
        write_text(&dir.join("timing.csv"), &s)?;
    }
    Ok(())
}

fn cmd_track(cfg: &PipelineConfig, a: &TrackArgs) -> CliResult<()> {
    cfg.validate()?;
    let dirs = resolve_data(&a.data.data)?;
    let weights = cfg.weights::<f64>()?;
    mkdir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml_string()?)?;
    let n = dirs.len();
    let results: Vec<CliResult<(String, usize)>> = dirs
        .par_iter()
        .map(|(name, dir)| {
            let seq = load_sequence::<f64>(dir)?;
            let truth = if cfg.cheat_mode {
                Some(sequence_truth(&seq, Some(dir), &cfg.labels)?)
            } else {
                None
            };
            let external = external_for(cfg, name, n)?;
            let run = run_track(cfg, &seq, &weights, truth.as_deref(), external.as_ref())?;
            write_track_outputs(&a.out.join(name), &seq, &run, a)?;
            Ok((name.clone(), run.summary.distinct_tracks))
        })
        .collect();
    for r in results {
        let (name, tracks) = r?;
        info!("{name}: {tracks} tracks");
    }
    Ok(())
}

fn epoch_chart(epochs: &[EpochSummary]) -> String {
    let pick = |f: fn(&EpochSummary) -> f64| -> Vec<(f64, f64)> {
        epochs.iter().enumerate().map(|(k, e)| ((k + 1) as f64, f(e))).collect()
    };
    let series = [
        Series { label: "L_total".into(), points: pick(|e| e.l_total) },
        Series { label: "L_flow".into(), points: pick(|e| e.l_flow) },
        Series { label: "L_seg".into(), points: pick(|e| e.l_seg) },
        Series { label: "L_aff".into(), points: pick(|e| e.l_aff) },
    ];
    line_chart("Training loss (epoch mean)", "epoch", "loss", &series)
}

fn cmd_train(cfg: &mut PipelineConfig, a: &TrainArgs) -> CliResult<()> {
    if let Some(ckpt) = &a.resume_stage1 {
        cfg.paths.weights = Some(ckpt.clone());
    }
    cfg.validate()?;
    let dirs = resolve_data(&a.data.data)?;
    let seqs = load_all(&dirs)?;
    let init = cfg.weights::<f64>()?;
    mkdir(&a.out)?;
    write_text(&a.out.join("config.toml"), &cfg.to_toml_string()?)?;
    let out = a.out.clone();
    let outcome = run_train(cfg, &seqs, init, a.resume_stage1.is_some(), |stage, w| {
        let name = if stage == 1 { "weights_stage1.bin" } else { "weights.bin" };
        info!("stage {stage} done, writing {name}");
        w.save(&out.join(name))
    })?;
    write_train_log(&a.out.join("train_log.csv"), &outcome.log)?;
    write_epoch_log(&a.out.join("epochs.csv"), &outcome.epochs)?;
    write_text(&a.out.join("loss.svg"), &epoch_chart(&outcome.epochs))?;
    if let Some(last) = outcome.epochs.last() {
        info!("final epoch: L_total {:.4} L_seg {:.4}", last.l_total, last.l_seg);
    }
    Ok(())
}

fn eval_inputs(cfg: &PipelineConfig, data: &[PathBuf], tracks: &Path) -> CliResult<Vec<EvalSequence>> {
    cfg.eval.validate()?;
    let dirs = resolve_data(data)?;
    let seqs: Vec<CliResult<EvalSequence>> = dirs
        .par_iter()
        .map(|(name, dir)| {
            let seq = load_sequence::<f64>(dir)?;
            let truth = sequence_truth(&seq, Some(dir), &cfg.labels)?;
            let file = tracks.join(name).join("tracks.jsonl");
            if !file.is_file() {
                return Err(Error::Validation(format!("no tracks for sequence {name} at {}", file.display())).into());
            }
            let records = read_records(&file)?;
            Ok(eval_sequence(name, &seq, &truth, &records)?)
        })
        .collect();
    seqs.into_iter().collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn recall_chart(report: &MetricReport) -> String {
    let pts = |f: fn(&radar_mot::evaluator::RecallRow) -> f64| -> Vec<(f64, f64)> {
        report
            .per_recall
            .iter()
            .filter(|r| r.threshold.is_some())
            .map(|r| (r.target_recall, f(r)))
            .collect()
    };
    line_chart(
        "Metrics over recall targets",
        "recall",
        "score",
        &[
            Series { label: "MOTA".into(), points: pts(|r| r.mota) },
            Series { label: "sMOTA".into(), points: pts(|r| r.smota) },
            Series { label: "MOTP".into(), points: pts(|r| r.motp) },
        ],
    )
}

fn sweep_chart(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let pts = |f: fn(&MetricReport) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().map(|r| (r.value, f(&r.report).unwrap_or(f64::NAN))).collect()
    };
    let name = match axis {
        SweepAxis::MinPointsValid => "min_points_valid",
        SweepAxis::IouThreshold => "iou_threshold",
    };
    line_chart(
        &format!("Sweep over {name}"),
        name,
        "score",
        &[
            Series { label: "MOTA".into(), points: pts(|r| r.mota) },
            Series { label: "sAMOTA".into(), points: pts(|r| r.samota) },
            Series { label: "AMOTA".into(), points: pts(|r| r.amota) },
        ],
    )
}

fn write_sweep(out: &Path, seqs: &[EvalSequence], cfg: &PipelineConfig, axis: SweepAxis, values: &[f64], stem: &str) -> CliResult<()> {
    let rows = sweep(seqs, &cfg.eval, axis, values)?;
    write_sweep_csv(out.join(format!("{stem}.csv")), axis, &rows)?;
    write_text(&out.join(format!("{stem}.svg")), &sweep_chart(axis, &rows))
}

fn cmd_eval(cfg: &PipelineConfig, a: &EvalArgs) -> CliResult<()> {
    let seqs = eval_inputs(cfg, &a.data.data, &a.tracks)?;
    let report = evaluate(&seqs, &cfg.eval)?;
    mkdir(&a.out)?;
    write_metrics_json(a.out.join("metrics.json"), &report)?;
    write_text(&a.out.join("recall.svg"), &recall_chart(&report))?;
    write_sweep(&a.out, &seqs, cfg, SweepAxis::IouThreshold, &a.iou_values, "sweep")?;
    if report.counts.gt_count == 0 {
        warn!("no ground-truth objects; metrics are undefined");
    }
    println!(
        "MOTA {} MODA {} sAMOTA {} AMOTA {} AMOTP {} MT {} ML {} IDSW {}",
        fmt_opt(report.mota),
        fmt_opt(report.moda),
        fmt_opt(report.samota),
        fmt_opt(report.amota),
        fmt_opt(report.amotp),
        fmt_opt(report.mt),
        fmt_opt(report.ml),
        report.counts.id_switches
    );
    Ok(())
}

fn cmd_sweep(cfg: &PipelineConfig, a: &SweepArgs) -> CliResult<()> {
    let seqs = eval_inputs(cfg, &a.data.data, &a.tracks)?;
    mkdir(&a.out)?;
    write_sweep(&a.out, &seqs, cfg, a.axis, &a.values, "sweep")?;
    Ok(())
}

fn cmd_synth(cfg: &mut PipelineConfig, a: &SynthArgs) -> CliResult<()> {
    if let Some(n) = a.count {
        cfg.synthetic.n_sequences = n;
    }
    if let Some(s) = a.seed {
        cfg.synthetic.scene.rng_seed = s;
    }
    cfg.synthetic.scene.validate()?;
    mkdir(&a.out)?;
    let set = &cfg.synthetic;
    let written: Vec<CliResult<()>> = (0..set.n_sequences)
        .into_par_iter()
        .map(|k| {
            let mut scene = set.scene.clone();
            scene.rng_seed = set.scene.rng_seed.wrapping_add(k as u64);
            let syn = radar_mot::radar::generate_synthetic_sequence::<f64>(&scene)?;
            let dir = a.out.join(format!("seq_{k:03}"));
            save_sequence(&syn.sequence, &dir)?;
            save_labels(&syn.sequence, &syn.truth, &dir)?;
            Ok(())
        })
        .collect();
    written.into_iter().collect::<CliResult<Vec<()>>>()?;
    info!("wrote {} sequences to {}", set.n_sequences, a.out.display());
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> CliResult<()> {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(Failure::Usage("--step must be positive".into()));
    }
    let pair = toy_pair(&tiny_architecture(), a.seed)?;
    let gc = GradCheckConfig { step: a.step, max_entries: None };
    let mut failed = Vec::new();
    for (name, obj) in [
        ("flow", Objective::Flow),
        ("segmentation", Objective::Segmentation),
        ("affinity", Objective::Affinity),
        ("total", Objective::Total),
    ] {
        let r = pair.check(obj, &gc)?;
        println!(
            "{name:<13} max relative error {:.3e} ({})",
            r.max_rel_error,
            r.worst_tensor.as_deref().unwrap_or("-")
        );
        if r.max_rel_error.is_nan() || r.max_rel_error > a.tolerance {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check above {} for {}", a.tolerance, failed.join(", "))))
    }
}

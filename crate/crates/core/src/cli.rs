//! Command-line subcommands. Each returns the process exit code on success.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, generate_corpus, generate_sequence, GenConfig, VideoSequence};
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckResult, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::metrics::{evaluate, Binding, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{check_divisible, Mode, ModelConfig, Rvos};
use crate::predictions::{read_predictions, write_predictions};
use crate::train::{infer_sequence, thread_count, train};

/// Encoder depth the data generator guards against: frame sides must divide by 2^4.
const GEN_BLOCKS: usize = 4;

#[derive(Debug, Parser)]
#[command(
    name = "rvos",
    version,
    about = "Recurrent multi-object video segmentation on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData(GenDataArgs),
    /// Train a model (teacher-forced phase, then inferred-mask phase).
    Train(TrainArgs),
    /// Run a checkpoint over whole videos and write soft masks.
    Infer(InferArgs),
    /// Score predictions against annotations.
    Eval(EvalArgs),
    /// Time full-sequence inference.
    Bench(BenchArgs),
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub num_seqs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "64x112", value_parser = parse_size)]
    pub size: [usize; 2],
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint manifest or its directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sequence ID; all sequences when omitted.
    #[arg(long)]
    pub seq: Option<String>,
    /// Defaults to the mode the checkpoint was trained in.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mode: Mode,
    /// JSON report path; the CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the mode's slot binding (annotation_order, first_frame, per_frame_optimal).
    #[arg(long, value_parser = parse_binding)]
    pub binding: Option<Binding>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint to time; the untrained default model otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset to draw the timed sequence from; a synthetic one otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seq: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny", value_parser = ["tiny"])]
    pub size: String,
    /// Random draws per op.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Include a case with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([dim(h)?, dim(w)?])
}

fn parse_binding(s: &str) -> Result<Binding, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown binding {s:?}"))
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<i32> {
    check_divisible(a.size, GEN_BLOCKS)?;
    let cfg = GenConfig {
        height: a.size[0],
        width: a.size[1],
        frames: a.frames,
        max_objects: a.max_objects,
        ..GenConfig::default()
    };
    cfg.validate()?;
    let seqs = generate_corpus(&cfg, a.num_seqs, a.seed)?;
    data::write_dataset(&seqs, &a.out)?;
    println!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(0)
}

/// Reads a dataset, rejecting one-shot use of directories without `meta.json`.
fn load_dataset(root: &Path, mode: Mode) -> Result<Vec<VideoSequence>> {
    let dirs = data::sequence_dirs(root)?;
    if mode == Mode::OneShot {
        if let Some(d) = dirs.iter().find(|d| !data::has_meta(d)) {
            return Err(Error::Config(format!(
                "{}: one-shot mode needs meta.json with first-frame annotations",
                d.display()
            )));
        }
    }
    dirs.iter().map(|d| data::read_sequence(d)).collect()
}

pub fn train_cmd(a: &TrainArgs) -> Result<i32> {
    let cfg = RunConfig::load(&a.config)?;
    let seqs = load_dataset(&a.data, cfg.mode)?;
    let (val, train_seqs) = if cfg.val_fraction > 0.0 && seqs.len() >= 2 {
        data::split(&seqs, cfg.val_fraction, cfg.seed)?
    } else {
        (Vec::new(), seqs)
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let log_path = a.out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train(&cfg, &train_seqs, &val, Some(&a.out), &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Checkpoint::new(cfg.clone(), &outcome.model, &outcome.adam).save(&a.out.join("final"))?;
    println!(
        "trained {} steps; final val J {}; checkpoints in {}",
        outcome.adam.step,
        outcome.final_val_j.map_or("n/a".into(), |j| format!("{j:.4}")),
        a.out.display()
    );
    Ok(0)
}

fn select<'a>(seqs: &'a [VideoSequence], id: Option<&str>) -> Result<Vec<&'a VideoSequence>> {
    match id {
        None => Ok(seqs.iter().collect()),
        Some(id) => seqs
            .iter()
            .find(|s| s.id == id)
            .map(|s| vec![s])
            .ok_or_else(|| Error::Config(format!("no sequence {id:?} in the dataset"))),
    }
}

pub fn infer(a: &InferArgs) -> Result<i32> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let mode = a.mode.unwrap_or(ck.config.mode);
    let model = ck.model()?;
    let seqs = load_dataset(&a.data, mode)?;
    let mut files = 0;
    for seq in select(&seqs, a.seq.as_deref())? {
        let preds = infer_sequence(&model, seq, mode)?;
        files += write_predictions(&a.out, seq, &preds, DEFAULT_THRESHOLD, a.overlay)?;
    }
    println!("wrote {files} files to {}", a.out.display());
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> Result<i32> {
    let seqs = data::read_dataset(&a.data)?;
    let preds = seqs
        .iter()
        .map(|s| read_predictions(&a.pred, s))
        .collect::<Result<Vec<_>>>()?;
    let binding = a.binding.unwrap_or(Binding::for_mode(a.mode));
    let report = evaluate(&preds, &seqs, a.mode, binding, DEFAULT_THRESHOLD)?;
    write_report(&report, &a.out)?;
    for id in &report.missing {
        eprintln!("warning: no predictions for {id}; scored 0");
    }
    println!(
        "J {:.4}  F {:.4}  ({} objects)",
        report.corpus.j, report.corpus.f, report.corpus.objects
    );
    Ok(0)
}

/// Writes `out` as JSON and the per-object table next to it with a `.csv` extension.
pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    write_json(out, report)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub sequence: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub slots: usize,
    pub parameters: usize,
    pub mode: Mode,
    pub threads: usize,
    pub warmup: usize,
    pub iters: usize,
    pub median_ms_per_frame: f64,
    pub p95_ms_per_frame: f64,
    pub samples_ms_per_frame: Vec<f64>,
    pub note: String,
}

/// Median and nearest-rank 95th percentile.
pub fn order_stats(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

pub fn bench(a: &BenchArgs) -> Result<i32> {
    let report = bench_report(a)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::json("bench report", e))?
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(0)
}

/// Times `iters` full-sequence inferences after `warmup` untimed ones.
pub fn bench_report(a: &BenchArgs) -> Result<BenchReport> {
    if a.iters == 0 {
        return Err(Error::Config("--iters must be at least 1".into()));
    }
    let (model, mode) = match &a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.model()?, ck.config.mode)
        }
        None => (Rvos::<f32>::new(ModelConfig::default(), 0)?, Mode::ZeroShot),
    };
    let cfg = model.config();
    let seq = match &a.data {
        Some(root) => {
            let seqs = load_dataset(root, mode)?;
            let picked = select(&seqs, a.seq.as_deref())?;
            picked
                .first()
                .copied()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{}: empty dataset", root.display())))?
        }
        None => {
            let gen = GenConfig {
                height: cfg.height(),
                width: cfg.width(),
                ..GenConfig::default()
            };
            generate_sequence(&gen, 0, "bench")?
        }
    };
    for _ in 0..a.warmup {
        infer_sequence(&model, &seq, mode)?;
    }
    let mut samples = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let start = Instant::now();
        infer_sequence(&model, &seq, mode)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3 / seq.len() as f64);
    }
    let (median, p95) = order_stats(&samples);
    Ok(BenchReport {
        sequence: seq.id.clone(),
        frames: seq.len(),
        height: seq.height,
        width: seq.width,
        slots: cfg.slots,
        parameters: model.params().numel(),
        mode,
        threads: thread_count(),
        warmup: a.warmup,
        iters: a.iters,
        median_ms_per_frame: median,
        p95_ms_per_frame: p95,
        samples_ms_per_frame: samples,
        note: "single-process CPU timing; not comparable to GPU figures".into(),
    })
}

/// Runs the finite-difference suite and prints one row per case plus op coverage.
pub fn gradcheck_report(seeds: u64, inject_fault: bool, out: &mut dyn Write) -> Result<(Vec<CheckResult>, bool)> {
    let mut cases = gradcheck::standard_suite(seeds)?;
    if inject_fault {
        cases.push(gradcheck::faulty_case());
    }
    let io = |e| Error::io("stdout", e);
    writeln!(out, "{:<32} {:>8} {:>12}  result", "case", "elements", "max rel err").map_err(io)?;
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let r = case.run(DEFAULT_STEP, DEFAULT_TOLERANCE)?;
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{:<32} {:>8} {:>12.3e}  {verdict}",
            r.name, r.elements, r.max_rel_err
        )
        .map_err(io)?;
        results.push(r);
    }
    let missing = gradcheck::uncovered(&results);
    let ops: Vec<&str> = crate::autograd::DIFFERENTIABLE_OPS.to_vec();
    writeln!(
        out,
        "ops covered: {}",
        ops.iter().filter(|o| !missing.contains(o)).count()
    )
    .map_err(io)?;
    for op in &ops {
        let worst = results
            .iter()
            .filter(|r| r.ops.contains(op))
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max);
        let state = if missing.contains(op) {
            "NOT COVERED".to_string()
        } else {
            format!("{worst:.3e}")
        };
        writeln!(out, "  {op:<20} {state}").map_err(io)?;
    }
    let ok = missing.is_empty() && results.iter().all(|r| r.passed);
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(
        out,
        "{} cases, {failed} failed, {} ops uncovered",
        results.len(),
        missing.len()
    )
    .map_err(io)?;
    Ok((results, ok))
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<i32> {
    let (_, ok) = gradcheck_report(a.seeds, a.inject_fault, &mut std::io::stdout().lock())?;
    Ok(if ok { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64x112"), Ok([64, 112]));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn bindings_parse() {
        assert_eq!(parse_binding("per_frame_optimal"), Ok(Binding::PerFrameOptimal));
        assert!(parse_binding("best").is_err());
    }

    #[test]
    fn order_statistics() {
        assert_eq!(order_stats(&[3.0]), (3.0, 3.0));
        assert_eq!(order_stats(&[4.0, 1.0]), (2.5, 4.0));
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(order_stats(&v), (10.5, 19.0));
    }
}

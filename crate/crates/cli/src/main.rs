mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use geoanchor::eval::{
    evaluate, format_sweep_table, rescale_sweep, CategorySet, EstimatorChoice, IntrinsicsMode, PipelineConfig,
    SweepReport, TaskScore, DEFAULT_IOU_THRESHOLD,
};
use geoanchor::geometry::{iou_3d, Box3D};
use geoanchor::protocol::server::ToolServer;
use geoanchor::provenance::Provenance;
use geoanchor::reasoner::CategoryPrior;
use geoanchor::scene::ingest::{ingest, IngestOptions};
use geoanchor::scene::{load_corpus, save_scene, Scene};
use geoanchor::synthetic::synthetic_corpus;
use geoanchor::tools::{SamplingConfig, SpatialTools};
use geoanchor::trace::verify::verify_trace;
use geoanchor::trace::{build_corpus, read_traces_jsonl, write_traces_jsonl, Task};
use geoanchor::RescaleFactor;

use config::{ConfigFile, Resolved};

#[derive(Parser)]
#[command(name = "geoanchor", version, about = "Equation-anchored 3D localization toolkit")]
struct Cli {
    /// Key-value configuration file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Detect,
    Ground,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Detect => Task::Detection,
            TaskArg::Ground => Task::Grounding,
        }
    }
}

#[derive(Args)]
struct Sampling {
    /// Directory of scene bundles.
    #[arg(long)]
    root: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    n_points: Option<String>,
    #[arg(long)]
    min_depth: Option<String>,
}

#[derive(Args)]
struct Method {
    /// gt_oracle or category_prior.
    #[arg(long)]
    estimator: Option<String>,
    /// category,l,w,h CSV for the category prior; defaults to the corpus medians.
    #[arg(long)]
    priors: Option<String>,
    /// File with one category per line.
    #[arg(long)]
    categories: Option<String>,
    /// tool or frozen.
    #[arg(long)]
    intrinsics: Option<String>,
    #[arg(long)]
    tau: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a frames/instances/expressions CSV layout into scene bundles.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frame: Option<String>,
        /// Physically resample every bundle by this factor.
        #[arg(long)]
        rescale: Option<f64>,
    },
    /// Write a deterministic synthetic corpus of scene bundles.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long)]
        seed: Option<String>,
    },
    /// Generate reasoning traces as JSONL.
    GenTraces {
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive every step of a trace corpus against its scenes.
    VerifyTraces {
        #[arg(long)]
        root: Option<String>,
        #[arg(long)]
        traces: PathBuf,
        /// Allowed difference in units of the last displayed digit.
        #[arg(long)]
        tolerance_ulps: Option<String>,
        /// Per-trace JSONL report; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the spatial tools over stdin/stdout or TCP.
    ServeTools {
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        tcp: Option<String>,
    },
    /// Detection Avg F1 at one camera scale.
    EvalDetect {
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        method: Method,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grounding accuracy at one camera scale.
    EvalGround {
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        method: Method,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate at the eleven camera scales 0.5 to 1.5.
    Sweep {
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        method: Method,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the plain-text table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// IoU of two 9-DoF boxes given as x,y,z,l,w,h,yaw,pitch,roll.
    Iou {
        #[arg(allow_hyphen_values = true)]
        a: String,
        #[arg(allow_hyphen_values = true)]
        b: String,
    },
}

enum Failure {
    Usage(String),
    Data(String),
}

type Outcome = Result<ExitCode, Failure>;

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p).map_err(usage)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Ingest { input, out, frame, rescale } => {
            let rescale = rescale.map(RescaleFactor::new).transpose().map_err(usage)?;
            if !input.is_dir() {
                return Err(usage(format!("input {} is not a directory", input.display())));
            }
            let written = ingest(&input, &out, &IngestOptions { frame, rescale }).map_err(data)?;
            for d in written {
                println!("{}", d.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, count, seed } => {
            let mut r = Resolved::default();
            r.set("seed", seed, &file, Some("0"));
            let seed: u64 = r.required("seed").map_err(usage)?;
            for scene in synthetic_corpus(seed, count) {
                save_scene(&scene, &out.join(scene.id())).map_err(data)?;
            }
            eprintln!("wrote {count} scenes to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenTraces { sampling, task, out } => {
            let (r, cfg, scenes) = sampling_setup(sampling, &file)?;
            let prov = Provenance::new(cfg.seed, &r.canonical("gen-traces"));
            let mut traces = build_corpus(&scenes, task.into(), &cfg).map_err(data)?;
            for t in &mut traces {
                t.header.provenance = Some(prov.clone());
            }
            let mut w = BufWriter::new(File::create(&out).map_err(|e| data(format!("{}: {e}", out.display())))?);
            write_traces_jsonl(&traces, &mut w).and_then(|_| w.flush()).map_err(data)?;
            eprintln!("wrote {} traces to {}", traces.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyTraces { root, traces, tolerance_ulps, out } => {
            let mut r = Resolved::default();
            r.set("root", root, &file, None);
            r.set("tolerance_ulps", tolerance_ulps, &file, Some("0"));
            let root = r.path("root").map_err(usage)?.ok_or_else(|| usage("missing --root"))?;
            let ulps: u32 = r.required("tolerance_ulps").map_err(usage)?;
            let f = File::open(&traces).map_err(|e| usage(format!("{}: {e}", traces.display())))?;
            let corpus = read_traces_jsonl(BufReader::new(f)).map_err(data)?;
            let scenes = load_corpus(&root).map_err(data)?;
            verify_command(&corpus, &scenes, ulps, out.as_deref())
        }
        Command::ServeTools { sampling, tcp } => {
            let (_, cfg, scenes) = sampling_setup(sampling, &file)?;
            let server = ToolServer::from_scenes(scenes, SpatialTools::ground_truth(), cfg);
            match tcp {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).map_err(|e| usage(format!("{addr}: {e}")))?;
                    eprintln!("listening on {}", listener.local_addr().map_err(data)?);
                    Arc::new(server).serve_tcp(listener).map_err(data)?;
                }
                None => server.serve_stdio().map_err(data)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalDetect { sampling, method, scale, out } => {
            eval_command("eval-detect", Task::Detection, sampling, method, scale, out, &file)
        }
        Command::EvalGround { sampling, method, scale, out } => {
            eval_command("eval-ground", Task::Grounding, sampling, method, scale, out, &file)
        }
        Command::Sweep { sampling, method, task, out, table } => {
            let (mut r, cfg, scenes) = sampling_setup(sampling, &file)?;
            let pipe = pipeline_setup(&mut r, method, &file, cfg, &scenes)?;
            let mut report = rescale_sweep(&scenes, task.into(), &pipe);
            report.provenance = Some(Provenance::new(cfg.seed, &r.canonical("sweep")));
            write_json(&out, &report)?;
            let text = format_sweep_table(&[&report]);
            if let Some(t) = table {
                std::fs::write(&t, &text).map_err(|e| data(format!("{}: {e}", t.display())))?;
            }
            print!("{text}");
            Ok(sweep_exit(&report))
        }
        Command::Iou { a, b } => {
            let (a, b) = (parse_box(&a)?, parse_box(&b)?);
            let r = iou_3d(&a, &b);
            println!("{}", serde_json::to_string(&r).map_err(data)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn sampling_setup(s: Sampling, file: &ConfigFile) -> Result<(Resolved, SamplingConfig, Vec<Scene>), Failure> {
    let mut r = Resolved::default();
    r.set("root", s.root, file, None);
    r.set("seed", s.seed, file, Some("0"));
    r.set("n_points", s.n_points, file, Some("5"));
    r.set("min_depth", s.min_depth, file, Some("0.1"));
    let root = r.path("root").map_err(usage)?.ok_or_else(|| usage("missing --root"))?;
    let cfg = SamplingConfig {
        n_points: r.required("n_points").map_err(usage)?,
        min_depth: r.required("min_depth").map_err(usage)?,
        seed: r.required("seed").map_err(usage)?,
    };
    cfg.validate().map_err(usage)?;
    let scenes = load_corpus(&root).map_err(data)?;
    Ok((r, cfg, scenes))
}

fn pipeline_setup(
    r: &mut Resolved,
    m: Method,
    file: &ConfigFile,
    sampling: SamplingConfig,
    scenes: &[Scene],
) -> Result<PipelineConfig, Failure> {
    r.set("estimator", m.estimator, file, Some("gt_oracle"));
    r.set("priors", m.priors, file, None);
    r.set("categories", m.categories, file, None);
    r.set("intrinsics", m.intrinsics, file, Some("tool"));
    r.set("tau", m.tau, file, Some(&DEFAULT_IOU_THRESHOLD.to_string()));
    let estimator = match r.raw("estimator") {
        Some("gt_oracle") => EstimatorChoice::GtOracle,
        Some("category_prior") => {
            let prior = match r.path("priors").map_err(usage)? {
                Some(p) => CategoryPrior::from_csv(&p).map_err(data)?,
                None => CategoryPrior::from_scenes(scenes).map_err(data)?,
            };
            EstimatorChoice::CategoryPrior(prior)
        }
        other => return Err(usage(format!("estimator must be gt_oracle or category_prior, got {other:?}"))),
    };
    let intrinsics = match r.raw("intrinsics") {
        Some("tool") => IntrinsicsMode::Tool,
        Some("frozen") => IntrinsicsMode::Frozen,
        other => return Err(usage(format!("intrinsics must be tool or frozen, got {other:?}"))),
    };
    let tau: f64 = r.required("tau").map_err(usage)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(usage(format!("tau must lie in (0, 1), got {tau}")));
    }
    let category_set = match r.path("categories").map_err(usage)? {
        Some(p) => Some(CategorySet::load(&p).map_err(usage)?),
        None => None,
    };
    Ok(PipelineConfig { sampling, estimator, intrinsics, tau, category_set })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    provenance: Provenance,
    task: Task,
    scale: f64,
    method: String,
    score: &'a TaskScore,
}

fn eval_command(
    name: &str,
    task: Task,
    sampling: Sampling,
    method: Method,
    scale: f64,
    out: Option<PathBuf>,
    file: &ConfigFile,
) -> Outcome {
    let s = RescaleFactor::new(scale).map_err(usage)?;
    let (mut r, cfg, scenes) = sampling_setup(sampling, file)?;
    let pipe = pipeline_setup(&mut r, method, file, cfg, &scenes)?;
    let score = evaluate(&scenes, task, s, &pipe);
    let canonical = format!("{}scale={scale}\n", r.canonical(name));
    let output = EvalOutput {
        provenance: Provenance::new(cfg.seed, &canonical),
        task,
        scale,
        method: format!("{} ({:?} intrinsics)", pipe.estimator.name(), pipe.intrinsics).to_lowercase(),
        score: &score,
    };
    match out {
        Some(p) => write_json(&p, &output)?,
        None => println!("{}", serde_json::to_string_pretty(&output).map_err(data)?),
    }
    if let Some(d) = &score.detection {
        for c in &d.per_category {
            eprintln!(
                "{:<20} tp {:>4} fp {:>4} fn {:>4} f1 {:.4}",
                c.category, c.counts.tp, c.counts.fp, c.counts.fn_, c.f1
            );
        }
    }
    eprintln!("{name}: {:.2} over {} scenes, {} failures", score.metric * 100.0, score.scenes, score.failures.len());
    Ok(if score.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn sweep_exit(report: &SweepReport) -> ExitCode {
    let failed: usize = report.entries.iter().map(|e| e.failures.len()).sum();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} scene evaluations failed across the sweep");
        ExitCode::from(1)
    }
}

fn verify_command(
    corpus: &[geoanchor::trace::ReasoningTrace],
    scenes: &[Scene],
    ulps: u32,
    out: Option<&Path>,
) -> Outcome {
    let by_id: std::collections::BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.id(), s)).collect();
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| data(format!("{}: {e}", p.display())))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut failed = 0;
    for (i, t) in corpus.iter().enumerate() {
        let Some(scene) = by_id.get(t.scene_id.as_str()) else {
            failed += 1;
            eprintln!("trace {}: scene {} not found under root", i + 1, t.scene_id);
            continue;
        };
        let report = verify_trace(t, scene, ulps);
        if let Some(step) = report.first_failure() {
            failed += 1;
            let detail = step
                .first_divergence
                .as_ref()
                .map(|d| format!(": expected {} found {}", d.expected, d.found))
                .unwrap_or_default();
            eprintln!("trace {}: scene {} failed at step {}{detail}", i + 1, t.scene_id, step.kind.name());
        }
        serde_json::to_writer(&mut sink, &report).map_err(data)?;
        sink.write_all(b"\n").map_err(data)?;
    }
    sink.flush().map_err(data)?;
    eprintln!("{} of {} traces verified", corpus.len() - failed, corpus.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(data)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn parse_box(text: &str) -> Result<Box3D, Failure> {
    let values: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|e| usage(format!("{s:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 9] =
        values.try_into().map_err(|v: Vec<f64>| usage(format!("a box needs 9 numbers, got {}", v.len())))?;
    Box3D::from_array(arr).map_err(usage)
}

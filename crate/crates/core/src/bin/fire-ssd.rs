use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fire_ssd::analysis::{compare_reports, count_macs, count_params, CostReport};
use fire_ssd::gradcheck::{run_all, GradcheckConfig};
use fire_ssd::graph::{build_fire_ssd, check_appended_layers, AblationFlags, FireSsdConfig, ModelGraph};
use fire_ssd::io::{load_ppm, load_weights_into, save_weights, xavier_init, INPUT_HW};
use fire_ssd::rng::uniform_tensor;
use fire_ssd::ssd::records::{group_by_image, read_records, write_records, BoxRecord};
use fire_ssd::ssd::{detect, evaluate_map, generate_priors, ApMethod, DetectConfig, MATCH_IOU};
use fire_ssd::{Error, Result, Shape4};

#[derive(Parser)]
#[command(
    name = "fire-ssd",
    version,
    about = "Fire SSD detector: cost reports, shape checks, inference and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetFormat {
    /// One JSON document per image.
    Json,
    /// One box record per line, readable by `eval`.
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Baseline,
    Wfm,
    WfmDrmd,
    Full,
}

impl Ablation {
    fn flags(self) -> AblationFlags {
        match self {
            Self::Baseline => AblationFlags::BASELINE,
            Self::Wfm => AblationFlags::WFM,
            Self::WfmDrmd => AblationFlags::WFM_DRMD,
            Self::Full => AblationFlags::FULL,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC report.
    Summarize {
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Squeeze width of the appended and stem blocks.
        #[arg(long, default_value_t = FireSsdConfig::default().appended_squeeze)]
        squeeze: usize,
        #[arg(long, default_value_t = INPUT_HW)]
        input_hw: usize,
        /// Also print totals relative to this variant.
        #[arg(long, value_enum)]
        compare: Option<Ablation>,
    },
    /// Print the appended-layer shape trace and check it against the reference table.
    Shapes {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run the detector on one PPM image.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        nms: f64,
        #[arg(long, default_value_t = 200)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
        #[arg(long, value_enum, default_value = "json")]
        format: DetFormat,
    },
    /// Compare every analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
        /// Random problems per suite.
        #[arg(long, default_value_t = GradcheckConfig::default().cases)]
        cases: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Local inference throughput. Not comparable across machines.
    Bench {
        #[arg(long, default_value_t = 5)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Write Xavier-initialized weights for a variant.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Ablation,
    },
    /// Mean average precision of JSONL detections against JSONL ground truth.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = MATCH_IOU)]
        iou: f64,
        /// Use the 11-point interpolated AP instead of the all-points area.
        #[arg(long)]
        eleven_point: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn build(ablation: Ablation, cfg: &FireSsdConfig) -> Result<ModelGraph> {
    build_fire_ssd(cfg, ablation.flags())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn pass_fail(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Summarize { ablation, format, squeeze, input_hw, compare } => {
            let cfg = FireSsdConfig { appended_squeeze: squeeze, ..Default::default() };
            let graph = build(ablation, &cfg)?;
            let report = CostReport::build(&graph, input_hw)?;
            assert_eq!(report.total_params, count_params(&graph)?.total_params);
            assert_eq!(report.total_macs, count_macs(&graph, input_hw)?.total_macs);
            let comparison = match compare {
                Some(other) => Some(compare_reports(&CostReport::build(&build(other, &cfg)?, input_hw)?, &report)),
                None => None,
            };
            match format {
                Format::Json => {
                    let mut doc = serde_json::to_value(&report)?;
                    if let Some(c) = &comparison {
                        doc["comparison"] = serde_json::json!({ "params": c.params, "macs": c.macs });
                    }
                    print_json(&doc)?;
                }
                Format::Text => {
                    print!("{}", report.to_text());
                    if let Some(c) = comparison {
                        println!("vs reference: params {:+.2}%, MACs {:+.2}%", c.params.pct, c.macs.pct);
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Shapes { format } => {
            let graph = build(Ablation::Full, &FireSsdConfig::default())?;
            let rows = check_appended_layers(&graph)?;
            let ok = rows.iter().all(|r| r.ok());
            match format {
                Format::Json => print_json(&serde_json::json!({ "rows": rows, "ok": ok }))?,
                Format::Text => {
                    println!("{:<20} {:>9} {:>6} {:>8}  check", "layer", "output", "stride", "channels");
                    for r in &rows {
                        let (side, stride, ch) = r.actual.unwrap_or((0, None, 0));
                        let stride = stride.map_or("-".to_string(), |s| s.to_string());
                        let status =
                            if r.ok() { "ok".to_string() } else { format!("MISMATCH (expected {:?})", r.expected) };
                        println!("{:<20} {:>9} {:>6} {:>8}  {status}", r.label, format!("{side}x{side}"), stride, ch);
                    }
                    println!("{} of {} rows match", rows.iter().filter(|r| r.ok()).count(), rows.len());
                }
            }
            Ok(pass_fail(ok))
        }
        Command::Detect { weights, image, conf, nms, top_k, ablation, format } => {
            let cfg = FireSsdConfig::default();
            let mut graph = build(ablation, &cfg)?;
            load_weights_into(&mut graph, &weights)?;
            let input = load_ppm(&image)?;
            let priors = generate_priors(&cfg.prior_config())?;
            let dc = DetectConfig { conf_thresh: conf, nms_thresh: nms, top_k };
            let dets = detect(&graph.forward(&input)?, &priors, &dc)?.remove(0);
            let id = image_id(&image);
            let records: Vec<BoxRecord> = dets.iter().map(|d| BoxRecord::from_detection(&id, d)).collect();
            match format {
                DetFormat::Jsonl => write_records(io::stdout().lock(), &records)?,
                DetFormat::Json => print_json(&serde_json::json!({ "image_id": id, "detections": records }))?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, eps, tol, cases, format } => {
            if !(eps > 0.0 && tol > 0.0) {
                return Err(Error::Config("eps and tol must be positive".into()));
            }
            let report = run_all(&GradcheckConfig { seed, eps, tol, cases, ..Default::default() })?;
            match format {
                Format::Json => print_json(&report)?,
                Format::Text => print!("{}", report.to_text()),
            }
            Ok(pass_fail(report.passed()))
        }
        Command::Bench { iters, threads, format } => {
            let r = bench(iters, threads)?;
            match format {
                Format::Json => print_json(&r)?,
                Format::Text => println!(
                    "{} forwards on {} thread(s) in {:.3}s: {:.2} FPS ({:.1} ms per image per thread)",
                    r.iters, r.threads, r.seconds, r.fps, r.ms_per_image
                ),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::InitWeights { out, seed, ablation } => {
            let graph = build(ablation, &FireSsdConfig::default())?;
            let store = xavier_init(&graph, seed);
            save_weights(&store, &out)?;
            eprintln!("wrote {} tensors ({} values) to {}", store.len(), store.total_elements(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { dets, gts, iou, eleven_point, format } => {
            let read = |p: &Path| -> Result<Vec<BoxRecord>> { read_records(BufReader::new(File::open(p)?)) };
            let (_, d, g) = group_by_image(&read(&dets)?, &read(&gts)?)?;
            let method = if eleven_point { ApMethod::ElevenPoint } else { ApMethod::AllPoints };
            let report = evaluate_map(&d, &g, iou, method);
            match format {
                Format::Json => print_json(&report)?,
                Format::Text => {
                    println!("{:>6} {:>8} {:>6} {:>6}", "class", "AP", "gts", "dets");
                    for c in &report.per_class {
                        println!("{:>6} {:>8.4} {:>6} {:>6}", c.class_id, c.ap, c.num_gt, c.num_det);
                    }
                    println!("mAP {:.4} over {} images at IoU {}", report.map, g.len(), iou);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn image_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct BenchResult {
    iters: usize,
    threads: usize,
    seconds: f64,
    fps: f64,
    ms_per_image: f64,
}

/// `iters` inference forwards of the full model split over `threads` workers
/// sharing one graph, after one untimed warm-up pass.
fn bench(iters: usize, threads: usize) -> Result<BenchResult> {
    if iters == 0 || threads == 0 {
        return Err(Error::Config("iters and threads must be at least 1".into()));
    }
    let graph = build(Ablation::Full, &FireSsdConfig::default())?;
    let store = xavier_init(&graph, 0);
    let graph = graph.with_params(store)?;
    let input = uniform_tensor(Shape4::new(1, 3, INPUT_HW, INPUT_HW), -128.0, 128.0, 0);
    graph.forward(&input)?;

    let start = Instant::now();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|t| {
                let (graph, input) = (&graph, &input);
                let n = iters / threads + usize::from(t < iters % threads);
                s.spawn(move || (0..n).try_for_each(|_| graph.forward(input).map(drop)))
            })
            .collect();
        workers.into_iter().try_for_each(|w| w.join().expect("bench worker panicked"))
    })?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        iters,
        threads,
        seconds,
        fps: iters as f64 / seconds,
        ms_per_image: 1e3 * seconds * threads.min(iters) as f64 / iters as f64,
    })
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use rangeseg::checkpoint::Checkpoint;
use rangeseg::config::{count_frequencies, write_frequency_table, PipelineConfig};
use rangeseg::evaluation::{miou, remap_labels, render_kv_report, render_text_report, train_to_raw, ConfusionMatrix, Protocol};
use rangeseg::gradcheck::{run_gradcheck, GradcheckConfig, DEFAULT_EPS};
use rangeseg::kitti_io::{decode_labels, decode_point_cloud, relative_transform, write_predictions, LabelArray};
use rangeseg::losses::LossError;
use rangeseg::net_blocks::NetworkParams;
use rangeseg::pipeline::{
    corpus_train_ids, evaluate_dirs, range_image_from_rri, infer_scan, label_image_from_bytes, label_image_to_bytes, prepare_scan,
    scan_losses, PipelineError, Sequence,
};
use rangeseg::postproc::knn_refine;
use rangeseg::range_view::{assemble_residual_image, project_labels, spherical_project, RangeResidualImage, IGNORE_LABEL};
use rangeseg::synthetic::{synthetic_scan, synthetic_sequence, write_sequence, ScanPattern, MINI_CONFIG, MINI_PATTERN};

#[derive(Parser)]
#[command(name = "rangeseg", version, about = "LiDAR range-view segmentation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Pipeline config file (key = value)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// 19-class single-scan protocol
    #[arg(long, global = true, conflicts_with = "multi_scan")]
    single_scan: bool,
    /// 25-class multi-scan protocol
    #[arg(long, global = true)]
    multi_scan: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write one range residual image dump per scan
    Project { sequence: PathBuf, out: PathBuf },
    /// Predict per-point labels with a checkpoint
    Infer {
        sequence: PathBuf,
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-scan 2D argmax label images (.lb2d)
        #[arg(long)]
        dump_2d: bool,
    },
    /// Back-project 2D label images (.lb2d) to points by k-NN
    Postprocess { sequence: PathBuf, labels2d: PathBuf, out: PathBuf },
    /// Per-class IoU and mIoU of predictions against ground truth
    Eval {
        predictions: PathBuf,
        ground_truth: PathBuf,
        /// Machine-readable report destination
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of the Meta-Kernel gradients
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Per-stage latency of the pre- and post-processing stages
    Bench {
        /// Sequence to time; a synthetic scan at the configured size otherwise
        sequence: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// Budget for projection plus residual assembly
        #[arg(long, default_value_t = 50.0)]
        budget_ms: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Class frequency table of a label corpus
    Freqs { corpus: PathBuf, out: PathBuf },
    /// Summarize a scan, label, range image, label image or checkpoint file
    Inspect { file: PathBuf },
    /// Write a seeded random checkpoint for the configured architecture
    Checkpoint { out: PathBuf },
    /// Generate the synthetic mini-sequence
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = rangeseg::synthetic::MINI_SCANS)]
        scans: usize,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.into()),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type Outcome = Result<(), Failure>;

fn load_config(g: &GlobalOpts) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Usage(anyhow!(e).context(format!("config {}", p.display()))))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.single_scan {
        cfg.protocol = Protocol::SingleScan;
    }
    if g.multi_scan {
        cfg.protocol = Protocol::MultiScan;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Data)
}

fn cmd_project(cfg: &PipelineConfig, sequence: &Path, out: &Path) -> Outcome {
    let seq = Sequence::open(sequence)?;
    create_dir(out)?;
    for i in 0..seq.len() {
        let scan = prepare_scan(&seq, i, cfg)?;
        let path = out.join(format!("{}.rri", seq.scans[i]));
        scan.rri.write(&path).map_err(PipelineError::from)?;
    }
    println!("wrote {} range residual images to {}", seq.len(), out.display());
    Ok(())
}

fn cmd_infer(cfg: &PipelineConfig, sequence: &Path, out: &Path, checkpoint: &Path, dump_2d: bool) -> Outcome {
    let seq = Sequence::open(sequence)?;
    let mapping = cfg.class_mapping().map_err(PipelineError::from)?;
    let ck = Checkpoint::read(checkpoint).map_err(PipelineError::from)?;
    let params = ck.to_params(&cfg.network()).map_err(PipelineError::from)?;
    create_dir(out)?;
    for i in 0..seq.len() {
        let scan = prepare_scan(&seq, i, cfg)?;
        let pred = infer_scan(&scan, &params, cfg)?;
        let raw = train_to_raw(&scan.to_raw_order(&pred.point_labels, IGNORE_LABEL), &mapping).map_err(PipelineError::from)?;
        let stem = &seq.scans[i];
        write_predictions(&LabelArray::from_semantic(raw), &out.join(format!("{stem}.label"))).map_err(PipelineError::from)?;
        if dump_2d {
            let bytes = label_image_to_bytes(cfg.height, cfg.width, mapping.n, &pred.labels2d);
            let path = out.join(format!("{stem}.lb2d"));
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        match seq.load_labels(i, &scan.report)? {
            Some(labels) => match scan_losses(&pred.logits, &scan, &labels, &mapping, cfg) {
                Ok(l) => println!(
                    "{stem}: loss {:.4} (wce {:.4}, lovasz {:.4}, boundary {:.4})",
                    l.total, l.weighted_ce, l.lovasz, l.boundary
                ),
                // Every labeled point is ignored or hidden.
                Err(PipelineError::Loss(LossError::UndefinedLoss)) => println!("{stem}: loss undefined, no valid pixels"),
                Err(e) => return Err(e.into()),
            },
            None => println!("{stem}: {} points labeled", pred.point_labels.len()),
        }
    }
    Ok(())
}

fn cmd_postprocess(cfg: &PipelineConfig, sequence: &Path, labels2d: &Path, out: &Path) -> Outcome {
    let seq = Sequence::open(sequence)?;
    let mapping = cfg.class_mapping().map_err(PipelineError::from)?;
    let plain = PipelineConfig {
        residual_count: 0,
        ..cfg.clone()
    };
    create_dir(out)?;
    for i in 0..seq.len() {
        let stem = &seq.scans[i];
        let path = labels2d.join(format!("{stem}.lb2d"));
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let img = label_image_from_bytes(&bytes)?;
        if (img.height, img.width) != (cfg.height, cfg.width) {
            return Err(Failure::Data(anyhow!(
                "{}: {}x{} label image for a {}x{} projection",
                path.display(),
                img.height,
                img.width,
                cfg.height,
                cfg.width
            )));
        }
        let scan = prepare_scan(&seq, i, &plain)?;
        let labels = knn_refine(&scan.cloud, &scan.map, &scan.range_image(), &img.labels, &cfg.knn)
            .map_err(PipelineError::from)?;
        let raw = train_to_raw(&scan.to_raw_order(&labels, IGNORE_LABEL), &mapping).map_err(PipelineError::from)?;
        write_predictions(&LabelArray::from_semantic(raw), &out.join(format!("{stem}.label"))).map_err(PipelineError::from)?;
    }
    println!("wrote {} label files to {}", seq.len(), out.display());
    Ok(())
}

fn cmd_eval(cfg: &PipelineConfig, pred: &Path, gt: &Path, report: Option<&Path>) -> Outcome {
    let mapping = cfg.class_mapping().map_err(PipelineError::from)?;
    let m = evaluate_dirs(pred, gt, &mapping)?;
    let r = miou(&m, cfg.exclude_absent).map_err(PipelineError::from)?;
    print!("{}", render_text_report(&r, &mapping.names));
    if let Some(path) = report {
        fs::write(path, render_kv_report(&r, &mapping.names)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &PipelineConfig, seeds: u64, perturb: f64) -> Outcome {
    let first = cfg.seed;
    let base = GradcheckConfig {
        seeds: (first..first + seeds).collect(),
        perturbation: perturb,
        selection_eps: Some(DEFAULT_EPS),
        ..Default::default()
    };
    let mut sweep = Vec::new();
    for eps in [1e-2, DEFAULT_EPS, 1e-4] {
        let report = run_gradcheck(&GradcheckConfig { eps, ..base.clone() }).map_err(|e| Failure::Data(e.into()))?;
        println!("eps {eps:.0e}: max relative error {:.3e}", report.max_rel_error());
        sweep.push(report);
    }
    let errors: Vec<f64> = sweep.iter().map(|r| r.max_rel_error()).collect();
    let monotone = errors.windows(2).all(|w| w[1] <= w[0]);
    println!(
        "sweep {} as eps shrinks",
        if monotone { "decreases monotonically" } else { "is not monotone" }
    );
    let gate = &sweep[1];
    for s in &gate.seeds {
        println!(
            "seed {}: {} parameters, {} draw(s), max relative error {:.3e}",
            s.seed,
            s.params_checked,
            s.draws,
            s.max_rel_error()
        );
    }
    if gate.passed() {
        println!("PASS at eps {:.0e}: {:.3e} < {:.0e}", gate.eps, gate.max_rel_error(), gate.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:.3e} at eps {:.0e} exceeds {:.0e}",
            gate.max_rel_error(),
            gate.eps,
            gate.tolerance
        )))
    }
}

struct StageTimes {
    name: &'static str,
    samples: Vec<f64>,
}

impl StageTimes {
    fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Nearest-rank 95th percentile.
    fn p95(&self) -> f64 {
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        s[rank - 1]
    }
}

fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

fn cmd_bench(cfg: &PipelineConfig, sequence: Option<&Path>, iterations: usize, budget_ms: f64, report: Option<&Path>) -> Outcome {
    if iterations == 0 {
        return Err(Failure::Usage(anyhow!("--iterations must be positive")));
    }
    let proj = cfg.projection();
    let mapping = cfg.class_mapping().map_err(PipelineError::from)?;
    let (current, labels, prev, source) = match sequence {
        Some(dir) => {
            let seq = Sequence::open(dir)?;
            let i = seq.len() - 1;
            let (cloud, rep) = seq.load_cloud(i)?;
            let labels = seq.load_labels(i, &rep)?;
            let mut prev = Vec::new();
            for k in 1..=cfg.residual_count.min(i) {
                let (p, _) = seq.load_cloud(i - k)?;
                prev.push((p, relative_transform(&seq.poses[i - k], &seq.poses[i])));
            }
            (cloud, labels, prev, format!("{} scan {}", dir.display(), seq.scans[i]))
        }
        None => {
            let pattern = ScanPattern {
                beams: cfg.height,
                azimuths: cfg.width,
                jitter: 0.3,
            };
            let n = cfg.residual_count;
            let scans: Vec<_> = (0..=n).map(|k| synthetic_scan(k, &pattern, &proj, cfg.seed)).collect();
            let poses: Vec<_> = (0..=n).map(rangeseg::synthetic::sensor_pose).collect();
            let prev = (1..=n)
                .map(|k| (scans[n - k].0.clone(), relative_transform(&poses[n - k], &poses[n])))
                .collect();
            let (cloud, labels) = scans[n].clone();
            (cloud, Some(labels), prev, format!("synthetic {}x{} scan", cfg.height, cfg.width))
        }
    };
    let gt = match &labels {
        Some(l) => remap_labels(l, &mapping).map_err(PipelineError::from)?,
        None => vec![0; current.len()],
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Failure::Data(e.into()))?;
    let mut stages = ["projection", "residual_assembly", "knn", "evaluation"].map(|name| StageTimes {
        name,
        samples: Vec::with_capacity(iterations),
    });
    pool.install(|| -> Outcome {
        for _ in 0..iterations {
            let (_, t) = time_ms(|| spherical_project(&current, &proj));
            stages[0].samples.push(t);
            let (res, t) = time_ms(|| assemble_residual_image(&current, &prev, &proj));
            stages[1].samples.push(t);
            let (rri, map) = res.map_err(PipelineError::from)?;
            let img = range_image_from_rri(&rri);
            let labels2d = project_labels(&LabelArray::from_semantic(gt.clone()), &map, &proj).map_err(PipelineError::from)?;
            let (pred, t) = time_ms(|| knn_refine(&current, &map, &img, &labels2d, &cfg.knn));
            stages[2].samples.push(t);
            let pred = pred.map_err(PipelineError::from)?;
            let (r, t) = time_ms(|| {
                let mut m = ConfusionMatrix::new(mapping.n);
                m.accumulate(&pred, &gt).and_then(|_| miou(&m, cfg.exclude_absent))
            });
            stages[3].samples.push(t);
            r.map_err(PipelineError::from)?;
        }
        Ok(())
    })?;

    println!("{source}, {} points, {} predecessor(s), single thread", current.len(), prev.len());
    println!("{:<18} {:>7} {:>10} {:>10}", "stage", "samples", "mean_ms", "p95_ms");
    let mut kv = rangeseg::kv::KvFile::default();
    for s in &stages {
        println!("{:<18} {:>7} {:>10.3} {:>10.3}", s.name, s.samples.len(), s.mean(), s.p95());
        kv.set(&format!("{}.samples", s.name), s.samples.len());
        kv.set(&format!("{}.mean_ms", s.name), format!("{:.3}", s.mean()));
        kv.set(&format!("{}.p95_ms", s.name), format!("{:.3}", s.p95()));
    }
    let budgeted = stages[1].mean();
    let met = budgeted < budget_ms;
    println!(
        "projection + residual assembly: {budgeted:.3} ms mean, budget {budget_ms} ms {}",
        if met { "met" } else { "missed" }
    );
    kv.set("budget.ms", budget_ms);
    kv.set("budget.met", met);
    if let Some(path) = report {
        fs::write(path, kv.render()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_freqs(cfg: &PipelineConfig, corpus: &Path, out: &Path) -> Outcome {
    let mapping = cfg.class_mapping().map_err(PipelineError::from)?;
    let ids = corpus_train_ids(corpus, &mapping)?;
    let freqs = count_frequencies(ids, mapping.n)
        .ok_or_else(|| Failure::Data(anyhow!("{} holds no labeled points", corpus.display())))?;
    fs::write(out, write_frequency_table(&freqs, &mapping.names)).with_context(|| format!("writing {}", out.display()))?;
    for (name, f) in mapping.names.iter().zip(&freqs) {
        if *f > 0.0 {
            println!("{name:<22} {f:.6}");
        }
    }
    Ok(())
}

fn histogram(values: impl IntoIterator<Item = u16>) -> Vec<(u16, usize)> {
    let mut h = std::collections::BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0usize) += 1;
    }
    h.into_iter().collect()
}

fn cmd_inspect(file: &Path) -> Outcome {
    let bytes = fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
    match (bytes.get(..4), ext) {
        (Some(b"RRI1"), _) => {
            let rri = RangeResidualImage::from_bytes(&bytes).map_err(PipelineError::from)?;
            let valid = rri.mask().iter().filter(|&&m| m).count();
            println!("range residual image {}x{}, {valid} valid pixels", rri.height, rri.width);
            let names = ["range", "x", "y", "z", "remission", "d1", "d2", "d3", "mask"];
            for (c, name) in names.iter().enumerate() {
                let ch = rri.channel(c);
                let (lo, hi) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let nonzero = ch.iter().filter(|&&v| v != 0.0).count();
                println!("  {name:<10} min {lo:>10.4} max {hi:>10.4} nonzero {nonzero}");
            }
        }
        (Some(b"MRSK"), _) => {
            let ck = Checkpoint::from_bytes(&bytes).map_err(PipelineError::from)?;
            let total: usize = ck.sections.iter().map(|(_, d)| d.len()).sum();
            println!("checkpoint seed {}, {} sections, {total} parameters", ck.seed, ck.sections.len());
            for (name, d) in &ck.sections {
                println!("  {name:<28} {}", d.len());
            }
        }
        (Some(b"LB2D"), _) => {
            let img = label_image_from_bytes(&bytes)?;
            println!("label image {}x{}, {} classes", img.height, img.width, img.classes);
            for (c, n) in histogram(img.labels) {
                let name = if c == IGNORE_LABEL { "empty".to_string() } else { c.to_string() };
                println!("  {name:>6} {n}");
            }
        }
        (_, "bin") => {
            let (cloud, report) = decode_point_cloud(&bytes).ok_or_else(|| anyhow!("{} is not a point cloud", file.display()))?;
            let ranges: Vec<f64> = cloud.points.iter().map(|p| p.range()).collect();
            let (lo, hi) = ranges.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
            println!("point cloud: {} points ({} dropped), range {lo:.3} to {hi:.3} m", cloud.len(), report.dropped());
        }
        (_, "label") => {
            let labels = decode_labels(&bytes).ok_or_else(|| anyhow!("{} is not a label file", file.display()))?;
            println!("label file: {} points", labels.len());
            for (c, n) in histogram(labels.semantic.iter().copied()) {
                println!("  {c:>6} {n}");
            }
        }
        _ => return Err(Failure::Data(anyhow!("unrecognized file {}", file.display()))),
    }
    Ok(())
}

fn cmd_checkpoint(cfg: &PipelineConfig, out: &Path) -> Outcome {
    let params = NetworkParams::seeded(&cfg.network(), cfg.seed);
    Checkpoint::from_params(&params).write(out).map_err(PipelineError::from)?;
    let total: usize = params.sections().iter().map(|(_, t)| t.len()).sum();
    println!("wrote checkpoint with {total} parameters (seed {})", cfg.seed);
    Ok(())
}

fn cmd_synth(g: &GlobalOpts, out: &Path, scans: usize) -> Outcome {
    let mut cfg = match &g.config {
        Some(_) => load_config(g)?,
        None => PipelineConfig::parse(MINI_CONFIG, Path::new(".")).map_err(|e| Failure::Usage(e.into()))?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let seq = synthetic_sequence(scans, &MINI_PATTERN, &cfg.projection(), cfg.seed);
    write_sequence(&seq, out).map_err(PipelineError::from)?;
    if g.config.is_none() {
        fs::write(out.join("config.txt"), MINI_CONFIG).context("writing config.txt")?;
    }
    println!("wrote {scans} scans to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    if let Command::Synth { out, scans } = &cli.command {
        return cmd_synth(&cli.global, out, *scans);
    }
    let cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::Project { sequence, out } => cmd_project(&cfg, sequence, out),
        Command::Infer {
            sequence,
            out,
            checkpoint,
            dump_2d,
        } => cmd_infer(&cfg, sequence, out, checkpoint, *dump_2d),
        Command::Postprocess { sequence, labels2d, out } => cmd_postprocess(&cfg, sequence, labels2d, out),
        Command::Eval {
            predictions,
            ground_truth,
            report,
        } => cmd_eval(&cfg, predictions, ground_truth, report.as_deref()),
        Command::Gradcheck { seeds, perturb } => cmd_gradcheck(&cfg, *seeds, *perturb),
        Command::Bench {
            sequence,
            iterations,
            budget_ms,
            report,
        } => cmd_bench(&cfg, sequence.as_deref(), *iterations, *budget_ms, report.as_deref()),
        Command::Freqs { corpus, out } => cmd_freqs(&cfg, corpus, out),
        Command::Inspect { file } => cmd_inspect(file),
        Command::Checkpoint { out } => cmd_checkpoint(&cfg, out),
        Command::Synth { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

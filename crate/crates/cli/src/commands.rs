use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use pqd_core::data::{DataSource, LabeledImages, Split};
use pqd_core::distill::KdConfig;
use pqd_core::manifest::RunManifest;
use pqd_core::metrics::{
    check_thread_counts, csv_string, emit_records, evaluate_accuracy, json_string, measure_latency,
    pareto_frontier, parse_csv, Baseline, BenchConfig, ReportFormat, ReportRow,
};
use pqd_core::nn::Arch;
use pqd_core::optim::TrainConfig;
use pqd_core::pipeline::{
    ablate_orderings, ablation_csv, all_orders, baseline_checkpoint, bench_input, default_orders,
    format_order, load_checkpoint, order_label, parse_order, run_pipeline, tradeoff_record,
    BenchSettings, Checkpoint, PipelineRun, Stage, StagePlan, StageTraining,
};
use pqd_core::train::train_baseline;
use pqd_core::{Error, Result};

use crate::{
    AblateArgs, ArchChoice, BenchArgs, BenchFlags, Cli, Command, Format, OrderSet, PipelineArgs,
    ReplayArgs, ReportArgs, StageFlags, TrainBaselineArgs,
};

const CKPT: &str = "ckpt.pqdk";
const MANIFEST: &str = "manifest.txt";
const METRICS: &str = "metrics.csv";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainBaseline(a) => train_baseline_cmd(&a),
        Command::Pipeline(a) => pipeline_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Report(a) => report_cmd(&a),
        Command::Replay(a) => replay_cmd(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// A checkpoint path, or a run directory holding one.
fn ckpt_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CKPT)
    } else {
        p.to_path_buf()
    }
}

/// `--data` if given, else the source recorded beside the checkpoint.
fn resolve_data(explicit: Option<&str>, ckpt: &Path) -> Result<DataSource> {
    if let Some(d) = explicit {
        return d.parse();
    }
    let manifest = ckpt.parent().unwrap_or(Path::new(".")).join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::Config(format!(
            "no --data given and no manifest at {} to take it from",
            manifest.display()
        )));
    }
    RunManifest::load(&manifest)?.data.parse()
}

fn arch_for(choice: ArchChoice, data: &LabeledImages) -> Arch {
    let [c, h, w] = data.image_shape();
    match choice {
        ArchChoice::Mlp => Arch::mlp(c * h * w, data.num_classes()),
        ArchChoice::Smallconv => Arch::small_conv(c, h, w, data.num_classes()),
    }
}

fn bench_settings(b: &BenchFlags) -> BenchSettings {
    BenchSettings {
        config: BenchConfig {
            warmups: b.warmups,
            repeats: b.repeats,
            threads: b.threads,
        },
        batch: b.batch,
    }
}

fn stage_training(s: &StageFlags) -> StageTraining {
    StageTraining {
        base_lr: s.lr,
        momentum: s.momentum,
        batch_size: s.batch_size,
    }
}

fn echo_bench(m: RunManifest, b: &BenchFlags) -> RunManifest {
    m.with("threads", b.threads)
        .with("warmups", b.warmups)
        .with("repeats", b.repeats)
        .with("batch", b.batch)
}

fn echo_stage(m: RunManifest, s: &StageFlags) -> RunManifest {
    m.with("lr", s.lr)
        .with("momentum", s.momentum)
        .with("batch-size", s.batch_size)
}

/// Stage kinds recorded in a checkpoint's history, e.g. `prune-qat`.
fn method_name(ckpt: &Checkpoint) -> String {
    let stages: Vec<Stage> = ckpt
        .history
        .iter()
        .filter(|h| !h.label.starts_with("baseline"))
        .filter_map(|h| parse_order(&h.label).ok())
        .flatten()
        .collect();
    order_label(&stages)
}

fn train_baseline_cmd(a: &TrainBaselineArgs) -> Result<()> {
    let source: DataSource = a.data.parse()?;
    let data = source.load()?;
    let arch = arch_for(a.arch, &data.train);
    let cfg = TrainConfig {
        total_epochs: a.epochs,
        base_lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let bench = bench_settings(&a.bench);
    bench.config.validate()?;
    let (net, stats) = train_baseline(arch, &data.train, &cfg)?;
    let ckpt = baseline_checkpoint(&net, &stats, &data.test)?;
    let bytes = ckpt.encode()?;
    let x = bench_input(&data.test, bench.batch)?;
    let latency = measure_latency(&ckpt.model()?, &x, &bench.config)?;
    let reference = Baseline {
        size_bytes: bytes.len() as u64,
        latency_ms: latency.mean_ms,
    };
    let record = tradeoff_record(
        "baseline".into(),
        &ckpt,
        bytes.len() as u64,
        latency,
        reference,
    )?;
    let manifest = RunManifest::new(
        "train-baseline",
        a.seed,
        a.bench.threads,
        source.to_string(),
        data.train.checksum(),
    )
    .with("data", &source)
    .with("arch", arch_flag(a.arch))
    .with("epochs", a.epochs)
    .with("seed", a.seed)
    .with("lr", a.lr)
    .with("momentum", a.momentum)
    .with("batch-size", a.batch_size)
    .with("out", a.out.display());
    let manifest = echo_bench(manifest, &a.bench);
    create_dir(&a.out)?;
    write_file(&a.out.join(CKPT), &bytes)?;
    emit_records(&[record], ReportFormat::Csv, &a.out.join(METRICS))?;
    manifest.save(&a.out.join(MANIFEST))?;
    println!(
        "baseline {}: {} epochs, test accuracy {:.2}%, {} bytes -> {}",
        arch.name(),
        a.epochs,
        ckpt.metrics.accuracy_pct,
        bytes.len(),
        a.out.display()
    );
    Ok(())
}

fn arch_flag(a: ArchChoice) -> &'static str {
    match a {
        ArchChoice::Mlp => "mlp",
        ArchChoice::Smallconv => "smallconv",
    }
}

struct PipelineInputs {
    baseline_path: PathBuf,
    baseline: Checkpoint,
    source: DataSource,
    data: Split,
}

fn pipeline_inputs(baseline: &Path, data: Option<&str>) -> Result<PipelineInputs> {
    let baseline_path = ckpt_path(baseline);
    let ckpt = load_checkpoint(&baseline_path)?;
    if ckpt.mask.is_some() || ckpt.is_quantized() {
        return Err(Error::Config(format!(
            "{} is not a dense FP32 baseline",
            baseline_path.display()
        )));
    }
    let source = resolve_data(data, &baseline_path)?;
    let data = source.load()?;
    Ok(PipelineInputs {
        baseline_path,
        baseline: ckpt,
        source,
        data,
    })
}

/// Manifest of one pipeline run; also written for every ablation run.
#[allow(clippy::too_many_arguments)]
fn pipeline_manifest(
    inputs: &PipelineInputs,
    order: &[Stage],
    seed: u64,
    budget: Option<f64>,
    stage: &StageFlags,
    bench: &BenchFlags,
    out: &Path,
) -> RunManifest {
    let m = RunManifest::new(
        "pipeline",
        seed,
        bench.threads,
        inputs.source.to_string(),
        inputs.data.train.checksum(),
    )
    .with("baseline", inputs.baseline_path.display())
    .with("order", format_order(order))
    .with("seed", seed)
    .with("data", &inputs.source)
    .with("out", out.display());
    let m = match budget {
        Some(t) => m.with("latency-budget-ms", t),
        None => m,
    };
    echo_bench(echo_stage(m, stage), bench)
}

fn write_pipeline_run(dir: &Path, run: &PipelineRun, manifest: &RunManifest) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join(CKPT), &run.bytes)?;
    emit_records(
        std::slice::from_ref(&run.record),
        ReportFormat::Csv,
        &dir.join(METRICS),
    )?;
    manifest.save(&dir.join(MANIFEST))
}

fn summary_line(seed: u64, run: &PipelineRun) -> String {
    let r = &run.record;
    format!(
        "{} seed {seed}: accuracy {:.2}%, {} nonzeros, {} bytes ({:.2}x), latency {:.3} ms ({:.2}x)",
        r.method, r.accuracy_pct, r.nonzero_params, r.size_bytes, r.compression_x, r.latency.mean_ms, r.speedup_x
    )
}

fn pipeline_cmd(a: &PipelineArgs) -> Result<()> {
    let stages = parse_order(&a.order)?;
    let mut plan = StagePlan::new(stages, a.seed)?;
    plan.latency_budget_ms = a.latency_budget_ms;
    plan.training = stage_training(&a.stage);
    plan.validate()?;
    bench_settings(&a.bench).config.validate()?;
    let inputs = pipeline_inputs(&a.baseline, a.data.as_deref())?;
    let run = run_pipeline(
        &plan,
        &inputs.baseline,
        &inputs.data,
        &bench_settings(&a.bench),
    )?;
    let dir = a.out.join(plan.label()).join(a.seed.to_string());
    let manifest = pipeline_manifest(
        &inputs,
        &plan.stages,
        a.seed,
        a.latency_budget_ms,
        &a.stage,
        &a.bench,
        &a.out,
    );
    write_pipeline_run(&dir, &run, &manifest)?;
    println!("{}", summary_line(a.seed, &run));
    if run.budget_exceeded == Some(true) {
        println!(
            "latency budget of {} ms exceeded",
            a.latency_budget_ms
                .expect("flag set when a budget was given")
        );
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let budgets = [a.budgets[0], a.budgets[1], a.budgets[2]];
    let orders = match a.orders {
        OrderSet::Default4 => default_orders(a.rho, budgets, KdConfig::default()),
        OrderSet::All6 => all_orders(a.rho, budgets, KdConfig::default()),
    };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    bench_settings(&a.bench).config.validate()?;
    let inputs = pipeline_inputs(&a.baseline, a.data.as_deref())?;
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let mut on_run = |order: &[Stage], seed: u64, run: &PipelineRun| -> Result<()> {
        let dir = a.out.join(order_label(order)).join(seed.to_string());
        let manifest = pipeline_manifest(&inputs, order, seed, None, &a.stage, &a.bench, &a.out);
        write_pipeline_run(&dir, run, &manifest)?;
        println!("{}", summary_line(seed, run));
        Ok(())
    };
    let table = ablate_orderings(
        &orders,
        &seeds,
        &inputs.baseline,
        &inputs.data,
        stage_training(&a.stage),
        &bench_settings(&a.bench),
        &mut on_run,
    )?;
    let csv = ablation_csv(&table)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("ablation.csv"), &csv)?;
    let order_set = match a.orders {
        OrderSet::Default4 => "default4",
        OrderSet::All6 => "all6",
    };
    let manifest = RunManifest::new(
        "ablate",
        0,
        a.bench.threads,
        inputs.source.to_string(),
        inputs.data.train.checksum(),
    )
    .with("baseline", inputs.baseline_path.display())
    .with("orders", order_set)
    .with("seeds", a.seeds)
    .with("rho", a.rho)
    .with(
        "budgets",
        format!("{},{},{}", budgets[0], budgets[1], budgets[2]),
    )
    .with("data", &inputs.source)
    .with("out", a.out.display());
    echo_bench(echo_stage(manifest, &a.stage), &a.bench).save(&a.out.join(MANIFEST))?;
    print!("{csv}");
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let path = ckpt_path(&a.ckpt);
    let ckpt = load_checkpoint(&path)?;
    let size = fs::metadata(&path).map_err(io_err(&path))?.len();
    let source = resolve_data(a.data.as_deref(), &path)?;
    let data = source.load()?;
    let bench = bench_settings(&a.bench);
    let x = bench_input(&data.test, bench.batch)?;
    let latency = measure_latency(&ckpt.model()?, &x, &bench.config)?;
    let reference = match &a.reference {
        Some(r) => {
            let rpath = ckpt_path(r);
            let rckpt = load_checkpoint(&rpath)?;
            if rckpt.arch != ckpt.arch {
                return Err(Error::Config(
                    "the reference checkpoint has a different architecture".into(),
                ));
            }
            Baseline {
                size_bytes: fs::metadata(&rpath).map_err(io_err(&rpath))?.len(),
                latency_ms: measure_latency(&rckpt.model()?, &x, &bench.config)?.mean_ms,
            }
        }
        None => Baseline {
            size_bytes: size,
            latency_ms: latency.mean_ms,
        },
    };
    let mut record = tradeoff_record(method_name(&ckpt), &ckpt, size, latency, reference)?;
    record.accuracy_pct = evaluate_accuracy(&ckpt.model()?, &data.test)?;
    let mut manifest = RunManifest::new(
        "bench",
        0,
        a.bench.threads,
        source.to_string(),
        data.train.checksum(),
    )
    .with("ckpt", path.display())
    .with("data", &source)
    .with("out", a.out.display());
    if let Some(r) = &a.reference {
        manifest = manifest.with("reference", ckpt_path(r).display());
    }
    let manifest = echo_bench(manifest, &a.bench);
    create_dir(&a.out)?;
    emit_records(
        std::slice::from_ref(&record),
        ReportFormat::Csv,
        &a.out.join(METRICS),
    )?;
    let json = serde_json::to_string_pretty(&record.latency)
        .map_err(|e| Error::Config(format!("json: {e}")))?;
    write_file(&a.out.join("latency.json"), json)?;
    manifest.save(&a.out.join(MANIFEST))?;
    println!(
        "{}: {:.3} ms mean, {:.3} ms std (cv {:.3}) over {} repeats on {} threads; speedup {:.2}x",
        path.display(),
        record.latency.mean_ms,
        record.latency.std_ms,
        record.latency.cv,
        record.latency.repeats,
        record.latency.threads,
        record.speedup_x
    );
    Ok(())
}

/// Rows of every `metrics.csv` below `root`, in path order, each tagged
/// with the thread count of the manifest beside it.
fn collect_rows(root: &Path) -> Result<Vec<ReportRow>> {
    if !root.is_dir() {
        return Err(Error::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut rows = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: e.path().unwrap_or(root).to_path_buf(),
            source: e.into(),
        })?;
        if entry.file_name() != METRICS || !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let manifest_path = path.with_file_name(MANIFEST);
        let threads = RunManifest::load(&manifest_path)?.threads;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        rows.extend(parse_csv(&text, threads)?);
    }
    Ok(rows)
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut rows = collect_rows(&a.runs)?;
    check_thread_counts(&rows)?;
    if a.pareto {
        rows = pareto_frontier(&rows);
    }
    let text = match a.format {
        Format::Csv => csv_string(&rows)?,
        Format::Json => json_string(&rows)?,
    };
    match &a.out {
        None => print!("{text}"),
        Some(out) => {
            write_file(out, &text)?;
            let threads = rows.first().map_or(1, |r| r.threads);
            let mut manifest = RunManifest::new("report", 0, threads, "none".into(), 0)
                .with("runs", a.runs.display())
                .with(
                    "format",
                    match a.format {
                        Format::Csv => "csv",
                        Format::Json => "json",
                    },
                )
                .with("out", out.display());
            if a.pareto {
                manifest = manifest.with("pareto", true);
            }
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.txt");
            manifest.save(&out.with_file_name(name))?;
        }
    }
    Ok(())
}

/// Flags that take no value.
const SWITCHES: [&str; 1] = ["pareto"];

fn replay_cmd(a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if manifest.data != "none" {
        let data = manifest.data.parse::<DataSource>()?.load()?;
        if data.train.checksum() != manifest.dataset_checksum {
            return Err(Error::Invariant(format!(
                "dataset {} has checksum {:08x}, the manifest recorded {:08x}",
                manifest.data,
                data.train.checksum(),
                manifest.dataset_checksum
            )));
        }
    }
    let mut config = manifest.config.clone();
    if let Some(out) = &a.out {
        config.insert("out".into(), out.display().to_string());
    }
    let mut argv = vec!["pqd".to_string(), manifest.command.clone()];
    for (k, v) in config {
        argv.push(format!("--{k}"));
        if !SWITCHES.contains(&k.as_str()) {
            argv.push(v);
        }
    }
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Error::Config(format!("manifest does not replay: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Config(
            "a manifest cannot replay another replay".into(),
        ));
    }
    run(cli.command)
}

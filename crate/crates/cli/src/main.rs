//! `triview` — dataset tooling, detection evaluation, and multi-view
//! inspection runs from the command line.
//!
//! Log verbosity comes from the `TRIVIEW_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`).

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use triview_core::dataset::{
    build_manifest_with, default_class_names, stratified_split, validate, CameraId,
};
use triview_core::detector::{presets, synth_detect, write_detection_file, DetectorProfile};
use triview_core::evaluation::{evaluate, EvalConfig};
use triview_core::fusion::{ComponentRegistry, FusionPolicy};
use triview_core::pipeline::{
    read_verdict_log, run, serve_stream, LatencySummary, RunConfig, RunMode, StageSummary,
    VerdictLogRecord,
};

#[derive(Parser)]
#[command(
    name = "triview",
    version,
    about = "Multi-view assembly inspection: dataset tooling, detection evaluation, \
             fusion policies, and a streaming pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset root and report counts, histograms, and issues
    Validate {
        /// Dataset root containing images/ and labels/
        #[arg(long)]
        root: PathBuf,
        /// Write the report as JSON to this path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified per-camera split into train/val/test manifests
    Split {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory for train.json, val.json, test.json
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated train,val,test ratios
        #[arg(long, default_value = "0.70,0.15,0.15")]
        ratios: String,
    },
    /// Evaluate detection files against dataset labels
    Eval {
        #[arg(long)]
        root: PathBuf,
        /// Directory containing detections/<camera>/<stem>.txt files
        #[arg(long)]
        detections: PathBuf,
        /// Write the full report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-class AP rows as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Render the summary table
        #[arg(long)]
        table: bool,
    },
    /// Generate synthetic detections from ground truth with per-camera profiles
    Simulate {
        #[arg(long)]
        root: PathBuf,
        /// Output directory; detection files land under detections/<camera>/
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory with top.json/middle.json/bottom.json profiles
        /// (bundled presets when omitted)
        #[arg(long)]
        profiles: Option<PathBuf>,
        /// Evaluate the synthetic detections against the labels afterwards
        #[arg(long)]
        eval: bool,
    },
    /// Batch or stream inspection over detection files or a socket feed
    Run {
        /// JSON run config; explicit flags override its fields
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// batch or stream
        #[arg(long)]
        mode: Option<String>,
        /// defect_priority, majority_vote, or confidence_weighted
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        assoc_iou: Option<f64>,
        /// Stream bundle timeout in ms; 0 waits forever
        #[arg(long)]
        timeout_ms: Option<u64>,
        /// Dataset root with labels; batch mode also writes report.json
        #[arg(long)]
        dataset_root: Option<PathBuf>,
        #[arg(long)]
        budget_ms: Option<f64>,
        /// Serve a line-delimited JSON event feed on this address instead
        /// of replaying files
        #[arg(long)]
        listen: Option<String>,
    },
    /// Render a verdict log (and optional latency summary) as text
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        latency: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRIVIEW_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { root, out } => cmd_validate(&root, out.as_deref()),
        Command::Split {
            root,
            seed,
            out,
            ratios,
        } => cmd_split(&root, seed, &out, &ratios),
        Command::Eval {
            root,
            detections,
            out,
            csv,
            table,
        } => cmd_eval(&root, &detections, out.as_deref(), csv.as_deref(), table),
        Command::Simulate {
            root,
            out,
            seed,
            profiles,
            eval,
        } => cmd_simulate(&root, &out, seed, profiles.as_deref(), eval),
        Command::Run {
            config,
            detections,
            registry,
            out,
            mode,
            policy,
            assoc_iou,
            timeout_ms,
            dataset_root,
            budget_ms,
            listen,
        } => cmd_run(RunFlags {
            config,
            detections,
            registry,
            out,
            mode,
            policy,
            assoc_iou,
            timeout_ms,
            dataset_root,
            budget_ms,
            listen,
        }),
        Command::Report { log, latency } => cmd_report(&log, latency.as_deref()),
    }
}

fn cmd_validate(root: &Path, out: Option<&Path>) -> Result<()> {
    let build = build_manifest_with(root, default_class_names())
        .with_context(|| format!("scanning {}", root.display()))?;
    for warning in &build.warnings {
        log::warn!("{warning}");
    }
    let report = validate(&build.manifest, Some(root));
    println!("records: {}", report.record_count);
    for (camera, count) in &report.per_camera_counts {
        let histogram = &report.class_histograms[camera];
        println!("  {camera}: {count} images, class counts {histogram:?}");
    }
    println!("empty-label records: {}", report.empty_label_records);
    if report.is_clean() {
        println!("issues: none");
    } else {
        println!("issues: {}", report.issues.len());
        for issue in &report.issues {
            println!("  {issue:?}");
        }
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing ratios '{text}'"))?;
    if parts.len() != 3 {
        bail!("ratios must be three comma-separated numbers, got '{text}'");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_split(root: &Path, seed: u64, out: &Path, ratios: &str) -> Result<()> {
    let ratios = parse_ratios(ratios)?;
    let build = build_manifest_with(root, default_class_names())
        .with_context(|| format!("scanning {}", root.display()))?;
    for warning in &build.warnings {
        log::warn!("{warning}");
    }
    let splits = stratified_split(&build.manifest, ratios, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, manifest) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let path = out.join(format!("{name}.json"));
        manifest.save(&path)?;
        let counts: Vec<String> = manifest
            .camera_counts()
            .iter()
            .map(|(camera, count)| format!("{camera}={count}"))
            .collect();
        println!("{name}: {} records ({})", manifest.len(), counts.join(", "));
    }
    Ok(())
}

fn cmd_eval(
    root: &Path,
    detections_dir: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
    table: bool,
) -> Result<()> {
    use triview_core::detector::{DetectorBackend, DetectorError, ReplayBackend};

    let class_names = default_class_names();
    let build = build_manifest_with(root, class_names.clone())
        .with_context(|| format!("scanning {}", root.display()))?;
    let backend = ReplayBackend::from_dir(detections_dir, class_names.len())?;
    let mut detections = Vec::new();
    for record in build.manifest.records() {
        match backend.detect(&record.image_id, record.camera) {
            Ok(mut found) => detections.append(&mut found),
            Err(DetectorError::UnknownImage { .. }) => {
                log::warn!(
                    "no detection file for {}; treated as empty",
                    record.image_id
                );
            }
            Err(err) => return Err(err.into()),
        }
    }
    let report = evaluate(
        build.manifest.records(),
        &detections,
        &EvalConfig::coco(class_names),
    );
    println!(
        "precision {}  recall {}  mAP@50 {}  mAP@50-95 {}",
        fmt_opt(report.precision),
        fmt_opt(report.recall),
        fmt_opt(report.map50),
        fmt_opt(report.map50_95),
    );
    if table {
        print!("{}", report.render_table());
    }
    if let Some(path) = out {
        report.save(path)?;
        println!("report written to {}", path.display());
    }
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn load_profiles(dir: Option<&Path>) -> Result<BTreeMap<CameraId, DetectorProfile>> {
    match dir {
        None => Ok(presets::all()),
        Some(dir) => {
            let mut profiles = BTreeMap::new();
            for camera in CameraId::ALL {
                let path = dir.join(format!("{}.json", camera.dir_name()));
                let profile = DetectorProfile::load(&path)
                    .with_context(|| format!("loading {}", path.display()))?;
                profiles.insert(camera, profile);
            }
            Ok(profiles)
        }
    }
}

fn cmd_simulate(
    root: &Path,
    out: &Path,
    seed: u64,
    profiles_dir: Option<&Path>,
    run_eval: bool,
) -> Result<()> {
    let class_names = default_class_names();
    let build = build_manifest_with(root, class_names.clone())
        .with_context(|| format!("scanning {}", root.display()))?;
    if build.manifest.is_empty() {
        bail!("no images found under {}", root.display());
    }
    let profiles = load_profiles(profiles_dir)?;

    let detections_root = out.join("detections");
    let mut written = 0usize;
    let mut all_detections = Vec::new();
    for record in build.manifest.records() {
        let profile = &profiles[&record.camera];
        let detections = synth_detect(record, profile, seed, class_names.len())?;
        let stem = record
            .image_id
            .rsplit('/')
            .next()
            .unwrap_or(&record.image_id);
        let dir = detections_root.join(record.camera.dir_name());
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(
            dir.join(format!("{stem}.txt")),
            write_detection_file(&detections),
        )
        .with_context(|| format!("writing detections for {}", record.image_id))?;
        written += 1;
        if run_eval {
            all_detections.extend(detections);
        }
    }
    println!(
        "wrote {written} detection files under {}",
        detections_root.display()
    );
    if run_eval {
        let report = evaluate(
            build.manifest.records(),
            &all_detections,
            &EvalConfig::coco(class_names),
        );
        print!("{}", report.render_table());
    }
    Ok(())
}

struct RunFlags {
    config: Option<PathBuf>,
    detections: Option<PathBuf>,
    registry: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: Option<String>,
    policy: Option<String>,
    assoc_iou: Option<f64>,
    timeout_ms: Option<u64>,
    dataset_root: Option<PathBuf>,
    budget_ms: Option<f64>,
    listen: Option<String>,
}

fn cmd_run(flags: RunFlags) -> Result<()> {
    // precedence: flags > config file > defaults
    let mut config = match &flags.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let (Some(registry), Some(out)) = (flags.registry.clone(), flags.out.clone()) else {
                bail!("--registry and --out are required without --config");
            };
            // listen mode reads events from the socket, not from files
            let detections = match (&flags.listen, flags.detections.clone()) {
                (_, Some(dir)) => dir,
                (Some(_), None) => PathBuf::new(),
                (None, None) => bail!("--detections is required without --listen or --config"),
            };
            RunConfig::new(detections, registry, out)
        }
    };
    if let Some(v) = flags.detections {
        config.detections_dir = v;
    }
    if let Some(v) = flags.registry {
        config.registry_path = v;
    }
    if let Some(v) = flags.out {
        config.out_dir = v;
    }
    if let Some(v) = flags.mode {
        config.mode = match v.as_str() {
            "batch" => RunMode::Batch,
            "stream" => RunMode::Stream,
            other => bail!("unknown mode '{other}' (expected batch or stream)"),
        };
    }
    if let Some(v) = flags.policy {
        config.policy = v.parse::<FusionPolicy>()?;
    }
    if let Some(v) = flags.assoc_iou {
        config.assoc_iou = v;
    }
    if let Some(v) = flags.timeout_ms {
        config.timeout_ms = if v == 0 { None } else { Some(v) };
    }
    if let Some(v) = flags.dataset_root {
        config.dataset_root = Some(v);
    }
    if let Some(v) = flags.budget_ms {
        config.latency_budget_ms = v;
    }

    let artifacts = match &flags.listen {
        Some(addr) => {
            let registry = ComponentRegistry::load(&config.registry_path)?;
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            println!("listening on {}", listener.local_addr()?);
            serve_stream(
                &listener,
                &registry,
                config.policy,
                config.assoc_iou,
                config.timeout_ms,
                &config.out_dir,
                config.latency_budget_ms,
            )?
        }
        None => run(&config)?,
    };

    println!(
        "{} verdicts written to {}",
        artifacts.verdict_count,
        artifacts.verdict_log.display()
    );
    if artifacts.poisoned_count > 0 {
        println!("poisoned bundles: {}", artifacts.poisoned_count);
    }
    if let Some(path) = &artifacts.report_path {
        println!("evaluation report: {}", path.display());
    }
    if let (Some(latency), Some(path)) = (&artifacts.latency, &artifacts.latency_path) {
        println!(
            "latency: p50 {:.3} ms, p95 {:.3} ms, max {:.3} ms ({} over budget) -> {}",
            latency.end_to_end.p50_ms,
            latency.end_to_end.p95_ms,
            latency.end_to_end.max_ms,
            latency.budget_violations,
            path.display()
        );
    }
    if !artifacts.protocol_errors.is_empty() {
        for err in &artifacts.protocol_errors {
            log::error!("protocol error: {err}");
        }
        bail!(
            "{} protocol error(s) during the run",
            artifacts.protocol_errors.len()
        );
    }
    Ok(())
}

fn cmd_report(log_path: &Path, latency_path: Option<&Path>) -> Result<()> {
    let log = read_verdict_log(log_path)?;
    let mut pass = 0usize;
    let mut fail = 0usize;
    let mut degraded = 0usize;
    let mut poisoned = 0usize;
    let mut failing_components: BTreeMap<String, usize> = BTreeMap::new();
    for record in &log.records {
        match record {
            VerdictLogRecord::Verdict(verdict) => {
                if verdict.overall.is_fail() {
                    fail += 1;
                } else {
                    pass += 1;
                }
                if verdict.overall.is_degraded() {
                    degraded += 1;
                }
                for component in &verdict.components {
                    if component.state == triview_core::fusion::FastenerState::Loose
                        || component.state == triview_core::fusion::FastenerState::Undetected
                    {
                        *failing_components
                            .entry(component.component_id.clone())
                            .or_insert(0) += 1;
                    }
                }
            }
            VerdictLogRecord::Poisoned { .. } => poisoned += 1,
            VerdictLogRecord::Header(_) => {}
        }
    }
    println!(
        "policy {}  assoc_iou {}",
        log.header.policy, log.header.assoc_iou
    );
    println!(
        "assemblies: {} pass, {} fail ({} degraded)",
        pass, fail, degraded
    );
    if poisoned > 0 {
        println!("poisoned bundles: {poisoned}");
    }
    if !failing_components.is_empty() {
        let mut ranked: Vec<(&String, &usize)> = failing_components.iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        println!("components flagged most often:");
        for (component, count) in ranked.iter().take(5) {
            println!("  {component}: {count}");
        }
    }
    if let Some(path) = latency_path {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let summary: LatencySummary = serde_json::from_str(&text)?;
        println!(
            "latency over {} samples (budget {} ms):",
            summary.samples, summary.budget_ms
        );
        let row = |name: &str, s: &StageSummary| {
            println!(
                "  {name:<10} p50 {:>8.3} ms  p95 {:>8.3} ms  max {:>8.3} ms",
                s.p50_ms, s.p95_ms, s.max_ms
            );
        };
        row("detect", &summary.detect);
        row("associate", &summary.associate);
        row("fuse", &summary.fuse);
        row("log", &summary.log);
        row("end-to-end", &summary.end_to_end);
        println!("  budget violations: {}", summary.budget_violations);
    }
    Ok(())
}

//! Subcommands of the `kqkit` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kqkit::kd::experiment::{run_experiment, DistillConfig, ExperimentResult};
use kqkit::kd::{TraceLayer, TraceSpec};
use kqkit::metrics::analyze_layers;
use kqkit::plot::{bar_chart, line_chart, Bar, Series};
use kqkit::repr::{validate_manifest, write_dump, LayerManifest, ManifestEntry};
use kqkit::select::{manual_selection, stage_end_selection, variant_select, Criterion};
use kqkit::{Error, LayerMetrics};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "kqkit",
    version,
    about = "Layer knowledge-quality metrics and feature distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectMethod {
    Kq,
    #[value(name = "stage_end")]
    StageEnd,
    Manual,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute per-layer metrics for every layer in a manifest.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-class sample cap for the pairwise terms; 0 disables it.
        #[arg(long, default_value_t = 2000)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Select teacher layers from metrics or stage annotations.
    Select {
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "kq")]
        method: SelectMethod,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Ranking key for `kq`: S, I, E, IE or Q.
        #[arg(long, default_value = "Q")]
        criterion: Criterion,
        /// Manifest with stage annotations, required by `stage_end`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated layers for `manual`.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<u32>,
        /// Output file; defaults to selection.json beside the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a distillation experiment grid from a JSON or TOML config.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with status 3 when any run fails to converge.
        #[arg(long)]
        strict: bool,
    },
    /// Summarize results.json as a markdown table and an SVG bar chart.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic layer trace (RDMP files plus manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 400)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        /// Label-mixing probability of each layer, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.4,0.3,0,0,0.2")]
        mixing: Vec<f64>,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Optional stage id of each layer, comma-separated.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Sizes the global worker pool from `KQKIT_THREADS`.
pub fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("KQKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("KQKIT_THREADS must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err("KQKIT_THREADS must be >= 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    version: &'static str,
    command: &'a str,
    config_hash: String,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    wall_time_s: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn hash_value(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn write_text(path: &Path, text: &str) -> CliResult<String> {
    fs::write(path, text).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    Ok(path.display().to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<String> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| fail(format!("{}: {e}", dir.display())))
}

fn emit_report(
    dir: &Path,
    command: &str,
    config_hash: String,
    seeds: Vec<u64>,
    mut outputs: Vec<String>,
    started: Instant,
) -> CliResult<()> {
    let path = dir.join(format!("{command}.report.json"));
    outputs.push(path.display().to_string());
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash,
        seeds,
        outputs,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&path, &report)?;
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<u8> {
    let started = Instant::now();
    match cli.command {
        Command::Analyze {
            manifest,
            out,
            cap,
            seed,
        } => analyze(&manifest, &out, cap, seed, started),
        Command::Select {
            metrics,
            method,
            k,
            criterion,
            manifest,
            layers,
            out,
        } => select(
            metrics, method, k, criterion, manifest, layers, out, started,
        ),
        Command::Distill {
            config,
            out,
            strict,
        } => distill(&config, out, strict, started),
        Command::Report { results, out } => report(&results, &out, started),
        Command::Synth {
            out,
            classes,
            samples,
            width,
            mixing,
            noise,
            stages,
            seed,
        } => synth(
            &out, classes, samples, width, &mixing, noise, &stages, seed, started,
        ),
    }
}

fn metrics_csv(metrics: &[LayerMetrics]) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| fail(e.to_string());
    w.write_record([
        "layer",
        "S",
        "I",
        "E",
        "Q",
        "avgDPW",
        "avgDPB",
        "minDPW",
        "minDistB",
        "avgNorm",
        "avgSVDE",
        "globalEmbedDim",
        "diagnostics",
    ])
    .map_err(io)?;
    for m in metrics {
        let p = &m.pair;
        w.write_record([
            m.layer.to_string(),
            m.s.to_string(),
            m.i.to_string(),
            m.e.to_string(),
            m.q.to_string(),
            p.avg_dpw.to_string(),
            p.avg_dpb.to_string(),
            p.min_dpw.to_string(),
            p.min_dist_b.to_string(),
            p.avg_norm.to_string(),
            m.avg_svde.to_string(),
            m.global_embed_dim.to_string(),
            m.diagnostics.join("; "),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| fail(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| fail(e.to_string()))
}

fn analyze(
    manifest_path: &Path,
    out: &Path,
    cap: usize,
    seed: u64,
    started: Instant,
) -> CliResult<u8> {
    let manifest = LayerManifest::load(manifest_path)?;
    let diagnostics = validate_manifest(&manifest);
    if !diagnostics.is_empty() {
        let lines: Vec<String> = diagnostics.iter().map(ToString::to_string).collect();
        return Err(fail(format!("invalid manifest:\n  {}", lines.join("\n  "))));
    }
    let sets = manifest.load_layers()?;
    let cap = (cap > 0).then_some(cap);
    let metrics = analyze_layers(&sets, cap, seed)?;

    create_dir(out)?;
    let mut outputs = vec![
        write_json(&out.join("metrics.json"), &metrics)?,
        write_text(&out.join("metrics.csv"), &metrics_csv(&metrics)?)?,
    ];
    let series: Vec<Series> = [
        ("S", Criterion::S),
        ("I", Criterion::I),
        ("E", Criterion::E),
        ("Q", Criterion::Q),
    ]
    .into_iter()
    .map(|(name, c)| Series {
        name: name.into(),
        points: metrics.iter().map(|m| (m.layer as f64, c.key(m))).collect(),
    })
    .collect();
    let svg = line_chart("Per-layer knowledge quality", "layer", "value", &series);
    outputs.push(write_text(&out.join("metrics.svg"), &svg)?);

    let mut inputs = Vec::new();
    for e in &manifest.entries {
        inputs.push(serde_json::json!({
            "layer": e.layer,
            "stage": e.stage,
            "sha256": file_digest(&manifest.resolve(e))?,
        }));
    }
    let hash = hash_value(&serde_json::json!({
        "command": "analyze",
        "cap": cap,
        "seed": seed,
        "layers": inputs,
    }));
    emit_report(out, "analyze", hash, vec![seed], outputs, started)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn select(
    metrics_path: Option<PathBuf>,
    method: SelectMethod,
    k: usize,
    criterion: Criterion,
    manifest_path: Option<PathBuf>,
    layers: Vec<u32>,
    out: Option<PathBuf>,
    started: Instant,
) -> CliResult<u8> {
    let usage = |m: &str| CliError {
        code: EXIT_USAGE,
        message: m.into(),
    };
    let (result, input) = match method {
        SelectMethod::Kq => {
            let path = metrics_path.ok_or_else(|| usage("--method kq needs --metrics"))?;
            let text =
                fs::read_to_string(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
            let metrics: Vec<LayerMetrics> = serde_json::from_str(&text).map_err(Error::from)?;
            (variant_select(&metrics, criterion, k)?, path)
        }
        SelectMethod::StageEnd => {
            let path = manifest_path.ok_or_else(|| usage("--method stage_end needs --manifest"))?;
            let manifest = LayerManifest::load(&path)?;
            (stage_end_selection(&manifest, k)?, path)
        }
        SelectMethod::Manual => {
            let result = manual_selection(&layers)?;
            let anchor = metrics_path
                .or(manifest_path)
                .unwrap_or_else(|| PathBuf::from("."));
            (result, anchor)
        }
    };
    let out = out.unwrap_or_else(|| {
        let dir = if input.is_dir() {
            input.clone()
        } else {
            input.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        dir.join("selection.json")
    });
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    let outputs = vec![write_json(&out, &result)?];
    let input_hash = if input.is_file() {
        file_digest(&input)?
    } else {
        String::new()
    };
    let hash = hash_value(&serde_json::json!({
        "command": "select",
        "method": format!("{method:?}"),
        "k": k,
        "criterion": criterion.to_string(),
        "layers": layers,
        "input": input_hash,
    }));
    emit_report(&dir, "select", hash, Vec::new(), outputs, started)?;
    println!("selected: {:?}", result.selected);
    Ok(0)
}

fn distill(
    config_path: &Path,
    out: Option<PathBuf>,
    strict: bool,
    started: Instant,
) -> CliResult<u8> {
    let cfg = DistillConfig::load(config_path).map_err(|e| CliError {
        code: EXIT_USAGE,
        message: format!("{}: {e}", config_path.display()),
    })?;
    let base_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = out.unwrap_or_else(|| base_dir.clone());
    let results = run_experiment(&cfg, &base_dir)?;
    create_dir(&out)?;
    let outputs = vec![write_json(&out.join("results.json"), &results)?];
    emit_report(
        &out,
        "distill",
        cfg.hash(),
        cfg.seeds.clone(),
        outputs,
        started,
    )?;
    for c in &results.cells {
        match (c.mean, c.sd) {
            (Some(m), Some(s)) => println!("{:<24} {:.4} ± {:.4}", c.name, m, s),
            _ => println!("{:<24} failed to converge", c.name),
        }
    }
    if strict && results.any_failed() {
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn fmt_acc(mean: Option<f64>, sd: Option<f64>) -> String {
    match (mean, sd) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        _ => "—".to_string(),
    }
}

/// Markdown summary of an experiment.
pub fn markdown_report(results: &ExperimentResult) -> String {
    let mut md = String::new();
    md.push_str("# Distillation results\n\n");
    md.push_str(&format!(
        "Config hash `{}`, seeds {:?}.\n\n",
        results.config_hash, results.seeds
    ));
    md.push_str("| cell | recipe | selection | top-1 (%) mean ± sd | runs |\n");
    md.push_str("|---|---|---|---|---|\n");
    for c in &results.cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            c.name,
            c.recipe,
            c.selection,
            fmt_acc(c.mean, c.sd),
            c.runs.len()
        ));
    }
    if !results.ari.is_empty() {
        md.push_str("\n| cell | reference | baseline | ARI |\n|---|---|---|---|\n");
        for a in &results.ari {
            let value = match (a.value, &a.flag) {
                (Some(v), _) => format!("{v:.4}"),
                (None, Some(flag)) => format!("— ({flag})"),
                (None, None) => "—".into(),
            };
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                a.cell, a.reference, a.baseline, value
            ));
        }
    }
    let teachers: Vec<String> = results
        .teachers
        .iter()
        .filter_map(|t| {
            t.test_acc
                .map(|a| format!("seed {}: {:.2}", t.seed, 100.0 * a))
        })
        .collect();
    if !teachers.is_empty() {
        md.push_str(&format!("\nTeacher top-1 (%): {}.\n", teachers.join(", ")));
    }
    md
}

fn report(results_path: &Path, out: &Path, started: Instant) -> CliResult<u8> {
    let text = fs::read_to_string(results_path)
        .map_err(|e| fail(format!("{}: {e}", results_path.display())))?;
    let results: ExperimentResult = serde_json::from_str(&text)
        .map_err(|e| fail(format!("{}: {e}", results_path.display())))?;
    create_dir(out)?;
    let bars: Vec<Bar> = results
        .cells
        .iter()
        .map(|c| Bar {
            label: c.name.clone(),
            value: c.mean.map(|m| 100.0 * m),
            error: c.sd.map_or(0.0, |s| 100.0 * s),
        })
        .collect();
    let outputs = vec![
        write_text(&out.join("report.md"), &markdown_report(&results))?,
        write_text(
            &out.join("accuracy.svg"),
            &bar_chart(
                "Final test top-1 (mean ± sd over seeds)",
                "top-1 (%)",
                &bars,
            ),
        )?,
    ];
    emit_report(
        out,
        "report",
        file_digest(results_path)?,
        results.seeds.clone(),
        outputs,
        started,
    )?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    classes: usize,
    samples: usize,
    width: usize,
    mixing: &[f64],
    noise: f64,
    stages: &[u32],
    seed: u64,
    started: Instant,
) -> CliResult<u8> {
    if !stages.is_empty() && stages.len() != mixing.len() {
        return Err(CliError {
            code: EXIT_USAGE,
            message: "--stages needs one entry per layer".into(),
        });
    }
    let labels: Vec<usize> = (0..samples).map(|i| i % classes.max(1)).collect();
    let spec = TraceSpec {
        width,
        layers: mixing
            .iter()
            .map(|&m| TraceLayer { mixing: m, noise })
            .collect(),
        seed,
    };
    let sets = spec.generate(&labels, classes)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut entries = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let file = format!("layer_{:02}.rdmp", set.layer_index());
        write_dump(set, out.join(&file))?;
        outputs.push(out.join(&file).display().to_string());
        entries.push(ManifestEntry {
            layer: set.layer_index(),
            file,
            stage: stages.get(i).copied(),
            desc: Some(format!("mixing {}", mixing[i])),
        });
    }
    let manifest_path = out.join("manifest.json");
    LayerManifest::new(entries, out).save(&manifest_path)?;
    outputs.push(manifest_path.display().to_string());
    let hash = hash_value(&serde_json::to_value(&spec).map_err(Error::from)?);
    emit_report(out, "synth", hash, vec![seed], outputs, started)?;
    Ok(0)
}

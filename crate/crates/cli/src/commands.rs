use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use zsq_core::calibration::{CalibrationFile, RangeMethod, RangeSelector, WeightGranularity};
use zsq_core::distill::{distill_many, load_batch, save_batch, LossMode};
use zsq_core::model_io::{load_model, save_model};
use zsq_core::pipeline::{self, write_report, CalibrationSource, PipelineConfig};
use zsq_core::quant::{load_quantized, QuantizedModel};
use zsq_core::{Error, ModelF32, Tensor};

use crate::{Cli, Command, Global};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::reference(),
    };
    std::fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
    match &cli.command {
        Command::BuildToy(a) => build_toy(g, cfg, a),
        Command::Distill(a) => distill(g, cfg, a),
        Command::Calibrate(a) => calibrate(g, cfg, a),
        Command::Quantize(a) => quantize(g, a),
        Command::Eval(a) => eval(g, cfg, a),
        Command::Ablation(a) => ablation(g, cfg, a),
        Command::ExportImage(a) => export_image(g, a),
        Command::Compare(a) => compare(g, cfg, a),
        Command::Run => run(g, cfg),
    }
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".zsq").trim_end_matches(".q").to_string()
}

fn model(path: &Path) -> Result<ModelF32> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn print_model_summary(m: &ModelF32) {
    println!("input {:?}", m.input_shape());
    for (i, layer) in m.layers().iter().enumerate() {
        println!("  {i:>3} {:<12} -> {:?}", layer.kind(), m.layer_output_shape(i));
    }
    println!("parameters {}", m.parameter_count());
}

#[derive(Debug, Args)]
pub struct BuildToyArgs {
    /// Model file name (without extension); defaults to the config name.
    #[arg(long)]
    pub name: Option<String>,
}

fn build_toy(g: &Global, mut cfg: PipelineConfig, a: &BuildToyArgs) -> Result<()> {
    if let Some(s) = g.seed {
        cfg.model.seed = s;
    }
    let m = pipeline::build_model(&cfg)?;
    let path = g.out.join(format!("{}.zsq", a.name.as_deref().unwrap_or(&cfg.name)));
    save_model(&m, &path)?;
    print_model_summary(&m);
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// `mean` or `mean-std`.
    #[arg(long)]
    pub loss: Option<LossMode>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

fn distill(g: &Global, cfg: PipelineConfig, a: &DistillArgs) -> Result<()> {
    let m = model(&a.model)?;
    let mut dcfg = cfg.distill.config.clone();
    if let Some(mode) = a.loss {
        dcfg.loss_mode = mode;
    }
    if let Some(n) = a.iters {
        dcfg.iterations = n;
    }
    if let Some(n) = a.batch {
        dcfg.batch_size = n;
    }
    if let Some(s) = g.seed {
        dcfg.seed = s;
    }
    let runs = distill_many(&m, &dcfg, a.count)?;
    for (i, (b, t)) in runs.iter().enumerate() {
        let bp = g.out.join(format!("batch_{i:03}.zsqd"));
        let tp = g.out.join(format!("trace_{i:03}.csv"));
        save_batch(b, &bp)?;
        zsq_core::write_atomic(&tp, t.to_csv().as_bytes())?;
        println!(
            "batch {i}: seed {} loss {:.6e} -> {:.6e}",
            b.config.seed,
            t.initial_loss().unwrap_or(f64::NAN),
            b.final_loss
        );
    }
    println!("wrote {} batches to {}", runs.len(), g.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `distilled`, `synthetic-train` or `gaussian`.
    #[arg(long, default_value = "distilled")]
    pub source: CalibrationSource,
    /// Distilled batch files or directories holding them (distilled source).
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// `minmax`, `percentile` or `entropy`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// Per-output-channel weight ranges.
    #[arg(long)]
    pub per_channel: bool,
    /// Batches drawn for the synthetic-train and gaussian sources.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
}

fn batch_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "zsqd"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Empty("no distilled batch files given (use --data)".into()).into());
    }
    Ok(files)
}

fn calibrate(g: &Global, mut cfg: PipelineConfig, a: &CalibrateArgs) -> Result<()> {
    let m = model(&a.model)?;
    if let Some(name) = &a.method {
        cfg.calibration.method = RangeMethod::parse(name, a.p)?;
    } else if let (Some(p), RangeMethod::Percentile { .. }) = (a.p, cfg.calibration.method) {
        cfg.calibration.method = RangeMethod::Percentile { p };
    }
    if let Some(b) = a.bits {
        cfg.calibration.bits = b;
    }
    if a.per_channel {
        cfg.calibration.weights = WeightGranularity::PerChannel;
    }
    if let Some(s) = g.seed {
        cfg.distill.config.seed = s;
    }
    cfg.calibration.source = a.source;
    cfg.validate()?;
    let batches: Vec<Tensor<f32>> = match a.source {
        CalibrationSource::Distilled => batch_files(&a.data)?
            .iter()
            .map(|f| {
                load_batch(f)
                    .map(|b| b.data)
                    .with_context(|| format!("loading {}", f.display()))
            })
            .collect::<Result<_>>()?,
        source => pipeline::calibration_batches(&cfg, &m, source, a.count, &cfg.distill.config)?,
    };
    let cal = pipeline::calibrate(&cfg, &m, &batches)?;
    let mut file = cal.to_file();
    file.source = Some(a.source.name().into());
    for (site, r) in &file.activations {
        println!("{site:<10} [{:>12.6}, {:>12.6}]", r.a.unwrap_or(f32::NAN), r.c.unwrap_or(f32::NAN));
    }
    let path = g.out.join("calibration.json");
    file.save(&path)?;
    println!("wrote {} ({}, {} batches)", path.display(), cal.selector.method, batches.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    /// Defaults to the bit-width recorded in the calibration file.
    #[arg(long)]
    pub bits: Option<u32>,
}

fn quantize(g: &Global, a: &QuantizeArgs) -> Result<()> {
    let m = model(&a.model)?;
    let file = CalibrationFile::load(&a.calibration)?;
    let mut cal = file.to_calibration(&m)?;
    if let Some(b) = a.bits {
        cal.selector = RangeSelector::new(cal.selector.method, b)?;
    }
    let qm = pipeline::quantize(&m, &cal)?;
    let path = g.out.join(format!("{}.q.zsq", stem(&a.model)));
    zsq_core::quant::save_quantized(&qm, &path)?;
    let fp = std::fs::metadata(&a.model).map_err(|e| Error::io(&a.model, e))?.len();
    let q = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    println!("wrote {} ({} bits)", path.display(), cal.selector.bits);
    println!("size {fp} -> {q} bytes, ratio {:.4}", q as f64 / fp as f64);
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Full-precision model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub quantized: PathBuf,
    /// Disable fake quantization (pass-through check).
    #[arg(long)]
    pub passthrough: bool,
    /// Held-out batches; defaults to the config.
    #[arg(long)]
    pub batches: Option<usize>,
}

fn eval(g: &Global, mut cfg: PipelineConfig, a: &EvalArgs) -> Result<()> {
    let fp = model(&a.model)?;
    let loaded = load_quantized(&a.quantized).with_context(|| format!("loading {}", a.quantized.display()))?;
    if !fp.same_structure(loaded.graph()) {
        return Err(Error::StructureMismatch(format!(
            "{} does not share the structure of {}",
            a.quantized.display(),
            a.model.display()
        ))
        .into());
    }
    let qm = if a.passthrough {
        QuantizedModel::passthrough(&fp)
    } else {
        loaded
    };
    if let Some(n) = a.batches {
        cfg.eval.batches = n;
    }
    cfg.validate()?;
    let mut prov = pipeline::provenance(&cfg);
    prov.insert("model".into(), a.model.display().to_string());
    prov.insert("quantized".into(), a.quantized.display().to_string());
    prov.insert("passthrough".into(), a.passthrough.to_string());
    let data = pipeline::eval_batches(&cfg, &fp)?;
    let report = pipeline::evaluate(&fp, &qm, &data, prov)?;
    write_report(&report, &report.to_csv(), g.out.join("eval"))?;
    println!(
        "mse mean {:.6e} (std {:.3e}); sqnr mean {} dB over {} batches",
        report.mse.mean,
        report.mse.std,
        report.sqnr_db.map_or("inf".into(), |s| format!("{:.3}", s.mean)),
        report.batches.len()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("bad list entry `{t}`: {e}")).into())
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated iteration counts.
    #[arg(long)]
    pub iters: Option<String>,
    /// Comma-separated loss modes.
    #[arg(long)]
    pub modes: Option<String>,
}

fn ablation(g: &Global, mut cfg: PipelineConfig, a: &AblationArgs) -> Result<()> {
    let m = model(&a.model)?;
    if let Some(s) = g.seed {
        cfg.distill.config.seed = s;
    }
    let iters = match &a.iters {
        Some(s) => parse_list(s)?,
        None => cfg.ablation.iterations.clone(),
    };
    let modes = match &a.modes {
        Some(s) => parse_list(s)?,
        None => cfg.ablation.modes.clone(),
    };
    let report = pipeline::ablation(&cfg, &m, &iters, &modes)?;
    write_report(&report, &report.to_csv(), g.out.join("ablation"))?;
    print!("{}", report.to_csv());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExportImageArgs {
    /// Distilled batch file.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, default_value = "img")]
    pub prefix: String,
}

fn export_image(g: &Global, a: &ExportImageArgs) -> Result<()> {
    let b = load_batch(&a.batch).with_context(|| format!("loading {}", a.batch.display()))?;
    let files = pipeline::export_images(&b.data, &g.out, &a.prefix)?;
    println!("wrote {} images to {}", files.len(), g.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

fn compare(g: &Global, mut cfg: PipelineConfig, a: &CompareArgs) -> Result<()> {
    let m = model(&a.model)?;
    if let Some(n) = a.batches {
        cfg.compare.batches = n;
    }
    if let Some(n) = a.iters {
        cfg.compare.iterations = n;
    }
    if let Some(s) = g.seed {
        cfg.distill.config.seed = s;
    }
    cfg.validate()?;
    let r = pipeline::compare(&cfg, &m)?;
    write_report(&r, &r.to_csv(), g.out.join("compare"))?;
    println!(
        "ptq {} mean {:.3} std {:.3}",
        r.metric, r.ptq_summary.mean, r.ptq_summary.std
    );
    println!(
        "zsq {} mean {:.3} std {:.3}",
        r.metric, r.zsq_summary.mean, r.zsq_summary.std
    );
    println!("relative mean difference {:.4}", r.relative_mean_difference);
    Ok(())
}

fn run(g: &Global, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(s) = g.seed {
        cfg.distill.config.seed = s;
    }
    let art = pipeline::run_reference(&cfg, &g.out)?;
    let mut sizes = BTreeMap::new();
    for f in art.all_files() {
        let len = std::fs::metadata(f).map(|m| m.len()).unwrap_or(0);
        sizes.insert(f.display().to_string(), len);
    }
    for (f, len) in &sizes {
        println!("{len:>10}  {f}");
    }
    println!(
        "eval mse {:.6e}, size ratio {:.4}",
        art.report.mse.mean, art.report.size_ratio
    );
    Ok(())
}

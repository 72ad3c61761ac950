//! End-to-end experiment steps shared by the command line and the tests.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

pub use config::{CalibrationSource, PipelineConfig, REFERENCE_TOML};
pub use report::{write_report, AblationReport, AblationRow, BatchMetrics, CompareReport, EvalReport, Summary};

use crate::calibration::{calibrate_model, Calibration};
use crate::container;
use crate::distill::{distill_many, gaussian_baseline, save_batch, DistillConfig, LossMode};
use crate::error::{Error, Result};
use crate::forward::forward;
use crate::graph::ModelGraph;
use crate::model_io::dataset::{export_pgm_channels, to_gray_u8, write_pgm};
use crate::model_io::format::encode_model;
use crate::model_io::{absorb_bn_stats, build_toy_model, save_model};
use crate::quant::format::encode_quantized;
use crate::quant::{forward_quantized, quantize_model, save_quantized, QuantizedModel};
use crate::tensor::Tensor;

/// Name of the per-batch agreement metric used by [`compare`].
pub const AGREEMENT_METRIC: &str = "mean_sqnr_db";

/// Builds the configured toy model and absorbs BN statistics from the
/// synthetic training set.
pub fn build_model(cfg: &PipelineConfig) -> Result<ModelGraph<f32>> {
    let raw = build_toy_model(&cfg.model.architecture, cfg.model.seed)?;
    absorb_bn_stats(&raw, &cfg.dataset, cfg.model.momentum, cfg.model.absorb_batch_size)
}

/// Held-out evaluation batches (indices from `eval.start` on).
pub fn eval_batches(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Result<Vec<Tensor<f32>>> {
    let (n, bs) = (cfg.eval.batches, cfg.eval.batch_size);
    (0..n)
        .map(|i| cfg.dataset.model_batch(cfg.eval.start + i * bs, bs, model.input_shape()[0]))
        .collect()
}

/// `count` consecutive slices of the synthetic training set.
pub fn train_batches(cfg: &PipelineConfig, model: &ModelGraph<f32>, count: usize) -> Result<Vec<Tensor<f32>>> {
    let bs = cfg.distill.config.batch_size;
    if count * bs > cfg.dataset.count {
        return Err(Error::InvalidConfig(format!(
            "{count} batches of {bs} exceed the {} training images",
            cfg.dataset.count
        )));
    }
    (0..count)
        .map(|i| cfg.dataset.model_batch(i * bs, bs, model.input_shape()[0]))
        .collect()
}

/// Calibration batches from `source`. Distilled and Gaussian batches use the
/// seeds `distill.seed + i`.
pub fn calibration_batches(
    cfg: &PipelineConfig,
    model: &ModelGraph<f32>,
    source: CalibrationSource,
    count: usize,
    dcfg: &DistillConfig,
) -> Result<Vec<Tensor<f32>>> {
    match source {
        CalibrationSource::Distilled => Ok(distill_many(model, dcfg, count)?
            .into_iter()
            .map(|(b, _)| b.data)
            .collect()),
        CalibrationSource::SyntheticTrain => train_batches(cfg, model, count),
        CalibrationSource::Gaussian => (0..count)
            .map(|i| {
                let c = DistillConfig {
                    seed: dcfg.seed.wrapping_add(i as u64),
                    ..dcfg.clone()
                };
                gaussian_baseline(model, &c).map(|b| b.data)
            })
            .collect(),
    }
}

pub fn calibrate(cfg: &PipelineConfig, model: &ModelGraph<f32>, batches: &[Tensor<f32>]) -> Result<Calibration<f32>> {
    calibrate_model(model, batches, &cfg.calibration.selector()?, cfg.calibration.weights)
}

pub fn quantize(model: &ModelGraph<f32>, cal: &Calibration<f32>) -> Result<QuantizedModel<f32>> {
    quantize_model(model, &cal.weights, &cal.activations, cal.selector.bits)
}

/// Output MSE and SQNR (dB) of `q` against the reference `fp`.
pub fn agreement(fp: &Tensor<f32>, q: &Tensor<f32>) -> (f64, Option<f64>) {
    let (mut err, mut sig) = (0.0f64, 0.0f64);
    for (&a, &b) in fp.data().iter().zip(q.data()) {
        let (a, b) = (a as f64, b as f64);
        err += (a - b) * (a - b);
        sig += a * a;
    }
    let mse = err / fp.len() as f64;
    let sqnr = (err > 0.0).then(|| 10.0 * (sig / err).log10());
    (mse, sqnr)
}

/// Compares full-precision and quantized outputs batch by batch.
pub fn evaluate(
    fp: &ModelGraph<f32>,
    qm: &QuantizedModel<f32>,
    batches: &[Tensor<f32>],
    provenance: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if !fp.same_structure(qm.graph()) {
        return Err(Error::StructureMismatch(
            "quantized model does not share the full-precision structure".into(),
        ));
    }
    if batches.is_empty() {
        return Err(Error::Empty("evaluation needs at least one batch".into()));
    }
    let mut rows = Vec::with_capacity(batches.len());
    for (i, x) in batches.iter().enumerate() {
        let (y, _) = forward(fp, x, false)?;
        let yq = forward_quantized(qm, x)?;
        let (mse, sqnr_db) = agreement(&y, &yq);
        rows.push(BatchMetrics { batch: i, mse, sqnr_db });
    }
    let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
    let sqnrs: Vec<f64> = rows.iter().filter_map(|r| r.sqnr_db).collect();
    let fp_size = encode_model(fp)?.len();
    let q_size = if qm.is_simulated() {
        encode_quantized(qm)?.len()
    } else {
        fp_size
    };
    Ok(EvalReport {
        mse: Summary::of(&mses).expect("non-empty"),
        sqnr_db: Summary::of(&sqnrs),
        batches: rows,
        fp_size_bytes: fp_size,
        quantized_size_bytes: q_size,
        size_ratio: q_size as f64 / fp_size as f64,
        provenance,
    })
}

/// Common provenance entries for reports.
pub fn provenance(cfg: &PipelineConfig) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    p.insert("config".into(), cfg.name.clone());
    p.insert("model_seed".into(), cfg.model.seed.to_string());
    p.insert("dataset_seed".into(), cfg.dataset.seed.to_string());
    p.insert("distill_seed".into(), cfg.distill.config.seed.to_string());
    p.insert("calibration_method".into(), cfg.calibration.method.to_string());
    p.insert("bits".into(), cfg.calibration.bits.to_string());
    p
}

/// Calibrates on one batch at a time and records the mean eval SQNR of each
/// resulting quantized model, for PTQ (consecutive training slices) and ZSQ
/// (distilled batches).
pub fn compare(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Result<CompareReport> {
    let eval = eval_batches(cfg, model)?;
    let n = cfg.compare.batches;
    let dcfg = cfg.distill_config(cfg.compare.iterations, cfg.distill.config.loss_mode);
    let score = |batch: Tensor<f32>| -> Result<f64> {
        let cal = calibrate(cfg, model, &[batch])?;
        let qm = quantize(model, &cal)?;
        let r = evaluate(model, &qm, &eval, BTreeMap::new())?;
        Ok(r.mean_sqnr_db().unwrap_or(f64::INFINITY))
    };
    info!("compare: {n} PTQ calibration batches");
    let ptq = train_batches(cfg, model, n)?
        .into_iter()
        .map(score)
        .collect::<Result<Vec<_>>>()?;
    info!("compare: distilling {n} ZSQ calibration batches");
    let zsq = calibration_batches(cfg, model, CalibrationSource::Distilled, n, &dcfg)?
        .into_iter()
        .map(score)
        .collect::<Result<Vec<_>>>()?;
    let mut prov = provenance(cfg);
    prov.insert("compare_batches".into(), n.to_string());
    prov.insert("distill_iterations".into(), cfg.compare.iterations.to_string());
    prov.insert("loss_mode".into(), dcfg.loss_mode.name().into());
    CompareReport::new(AGREEMENT_METRIC, ptq, zsq, prov)
}

/// Distills one batch per `(mode, iterations)` pair, calibrates on it and
/// evaluates; a final row uses the unoptimized Gaussian batch.
pub fn ablation(
    cfg: &PipelineConfig,
    model: &ModelGraph<f32>,
    iterations: &[usize],
    modes: &[LossMode],
) -> Result<AblationReport> {
    let eval = eval_batches(cfg, model)?;
    let run = |batch: &Tensor<f32>| -> Result<(f64, Option<f64>)> {
        let cal = calibrate(cfg, model, std::slice::from_ref(batch))?;
        let qm = quantize(model, &cal)?;
        let r = evaluate(model, &qm, &eval, BTreeMap::new())?;
        Ok((r.mse.mean, r.mean_sqnr_db()))
    };
    let mut rows = Vec::new();
    for &mode in modes {
        for &iters in iterations {
            info!("ablation: {} x {iters}", mode.name());
            let dcfg = cfg.distill_config(iters, mode);
            let (batch, trace) = crate::distill::distill(model, &dcfg)?;
            let (eval_mse, eval_sqnr_db) = run(&batch.data)?;
            rows.push(AblationRow {
                label: mode.name().into(),
                iterations: iters,
                initial_loss: trace.initial_loss().unwrap_or(batch.final_loss),
                final_loss: batch.final_loss,
                eval_mse,
                eval_sqnr_db,
            });
        }
    }
    // The baseline loss is the full mean-and-std objective.
    let base = gaussian_baseline(model, &cfg.distill_config(1, LossMode::MeanAndStd))?;
    let (eval_mse, eval_sqnr_db) = run(&base.data)?;
    rows.push(AblationRow {
        label: "gaussian".into(),
        iterations: 0,
        initial_loss: base.final_loss,
        final_loss: base.final_loss,
        eval_mse,
        eval_sqnr_db,
    });
    let mut prov = provenance(cfg);
    prov.insert(
        "iterations".into(),
        iterations.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
    );
    Ok(AblationReport { rows, provenance: prov })
}

/// Channel-averaged and per-channel PGMs for every image of a batch.
pub fn export_images(batch: &Tensor<f32>, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, c, h, w) = batch.dims4()?;
    let mut written = Vec::new();
    for i in 0..n {
        let img = batch.item(i);
        let avg: Vec<f32> = (0..h * w)
            .map(|j| (0..c).map(|ch| img[ch * h * w + j]).sum::<f32>() / c as f32)
            .collect();
        let path = dir.join(format!("{prefix}_{i:04}.pgm"));
        write_pgm(&path, w, h, &to_gray_u8(&avg))?;
        written.push(path);
    }
    written.extend(export_pgm_channels(batch, dir, prefix)?);
    Ok(written)
}

/// Files produced by [`run_reference`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub model: PathBuf,
    pub batches: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub calibration: PathBuf,
    pub quantized: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub report: EvalReport,
}

impl RunArtifacts {
    pub fn all_files(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.model];
        v.extend(self.batches.iter().map(PathBuf::as_path));
        v.extend(self.traces.iter().map(PathBuf::as_path));
        v.extend([
            self.calibration.as_path(),
            self.quantized.as_path(),
            self.report_json.as_path(),
            self.report_csv.as_path(),
        ]);
        v
    }
}

/// build → distill → calibrate → quantize → eval, writing every artifact to
/// `out`.
pub fn run_reference(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<RunArtifacts> {
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = build_model(cfg)?;
    let model_path = out.join(format!("{}.zsq", cfg.name));
    save_model(&model, &model_path)?;
    info!("model written to {}", model_path.display());

    let dcfg = cfg.distill.config.clone();
    let (mut batches, mut traces) = (Vec::new(), Vec::new());
    let cal_data = match cfg.calibration.source {
        CalibrationSource::Distilled => {
            let runs = distill_many(&model, &dcfg, cfg.distill.count)?;
            let mut data = Vec::new();
            for (i, (b, t)) in runs.into_iter().enumerate() {
                let bp = out.join(format!("batch_{i:03}.zsqd"));
                let tp = out.join(format!("trace_{i:03}.csv"));
                save_batch(&b, &bp)?;
                container::write_atomic(&tp, t.to_csv().as_bytes())?;
                batches.push(bp);
                traces.push(tp);
                data.push(b.data);
            }
            data
        }
        source => calibration_batches(cfg, &model, source, cfg.distill.count, &dcfg)?,
    };

    let cal = calibrate(cfg, &model, &cal_data)?;
    let cal_path = out.join("calibration.json");
    let mut file = cal.to_file();
    file.source = Some(cfg.calibration.source.name().into());
    file.save(&cal_path)?;

    let qm = quantize(&model, &cal)?;
    let q_path = out.join(format!("{}.q.zsq", cfg.name));
    save_quantized(&qm, &q_path)?;

    let mut prov = provenance(cfg);
    prov.insert("calibration_source".into(), cfg.calibration.source.name().into());
    prov.insert("distill_iterations".into(), dcfg.iterations.to_string());
    prov.insert("loss_mode".into(), dcfg.loss_mode.name().into());
    let report = evaluate(&model, &qm, &eval_batches(cfg, &model)?, prov)?;
    let stem = out.join("eval");
    write_report(&report, &report.to_csv(), &stem)?;
    Ok(RunArtifacts {
        model: model_path,
        batches,
        traces,
        calibration: cal_path,
        quantized: q_path,
        report_json: stem.with_extension("json"),
        report_csv: stem.with_extension("csv"),
        report,
    })
}

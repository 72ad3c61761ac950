use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use zsq_core::distill::LossMode;
use zsq_core::model_io::{build_toy_model, ToyArchitecture};
use zsq_core::pipeline::{
    ablation, build_model, calibrate, calibration_batches, evaluate, export_images, quantize, run_reference,
    CalibrationSource, PipelineConfig,
};
use zsq_core::quant::QuantizedModel;
use zsq_core::{Error, Tensor};

fn single_channel() -> PipelineConfig {
    PipelineConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/single_channel.toml")).unwrap()
}

/// Parses a P5 header, returning `(width, height, pixels)`.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    (w, h, bytes[pos + 1..].to_vec())
}

#[test]
fn default_ablation_grid_has_thirteen_rows_and_baseline_is_worst() {
    let cfg = PipelineConfig::reference();
    let model = build_model(&cfg).unwrap();
    let report = ablation(&cfg, &model, &cfg.ablation.iterations, &cfg.ablation.modes).unwrap();
    assert_eq!(cfg.ablation.iterations, vec![10, 50, 100, 250, 500, 1000]);
    assert_eq!(report.rows.len(), 13);
    let base = report.rows.last().unwrap();
    assert_eq!((base.label.as_str(), base.iterations), ("gaussian", 0));
    for row in &report.rows[..12] {
        assert!(row.eval_mse.is_finite());
        if row.iterations >= 50 {
            // Compare on the objective the baseline reports.
            let dcfg = cfg.distill_config(row.iterations, row.label.parse::<LossMode>().unwrap());
            let (batch, _) = zsq_core::distill::distill(&model, &dcfg).unwrap();
            let full = zsq_core::distill::evaluate_batch(&model, &batch.data, LossMode::MeanAndStd)
                .unwrap()
                .0
                .total;
            assert!(base.final_loss >= full, "{} x {}: {full} > {}", row.label, row.iterations, base.final_loss);
            assert!(base.final_loss >= row.final_loss);
        }
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 14);
}

#[test]
fn single_channel_config_runs_end_to_end() {
    let cfg = single_channel();
    assert_eq!(cfg.dataset.channels, 1);
    assert_eq!(cfg.model.architecture.input_shape[0], 3);
    let dir = tempfile::tempdir().unwrap();
    let run = run_reference(&cfg, dir.path()).unwrap();
    assert_eq!(run.batches.len(), cfg.distill.count);
    assert!(run.report.mse.mean.is_finite());
    assert!(run.report.batches.iter().all(|b| b.sqnr_db.map_or(true, f64::is_finite)));
    for f in run.all_files() {
        assert!(f.exists(), "{}", f.display());
    }
}

#[test]
fn two_bit_pipeline_completes() {
    let mut cfg = single_channel();
    cfg.calibration.bits = 2;
    let dir = tempfile::tempdir().unwrap();
    let run = run_reference(&cfg, dir.path()).unwrap();
    // Agreement at two bits is reported, not judged.
    assert!(run.report.mse.mean.is_finite());
    assert_eq!(run.report.provenance["bits"], "2");
    assert_eq!(zsq_core::quant::load_quantized(&run.quantized).unwrap().bits(), 2);
}

#[test]
fn every_calibration_source_produces_complete_ranges() {
    let cfg = single_channel();
    let model = build_model(&cfg).unwrap();
    let dcfg = cfg.distill_config(5, LossMode::MeanAndStd);
    for source in [CalibrationSource::Distilled, CalibrationSource::SyntheticTrain, CalibrationSource::Gaussian] {
        let batches = calibration_batches(&cfg, &model, source, 2, &dcfg).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(&b.shape()[1..], model.input_shape());
        }
        let cal = calibrate(&cfg, &model, &batches).unwrap();
        assert!(quantize(&model, &cal).is_ok(), "{source:?}");
    }
}

#[test]
fn evaluation_rejects_structure_mismatch() {
    let cfg = single_channel();
    let model = build_model(&cfg).unwrap();
    let mut arch = ToyArchitecture::reference();
    arch.input_shape = vec![3, 16, 16];
    let other = build_toy_model::<f32>(&arch, 1).unwrap();
    let x = vec![Tensor::filled(vec![1, 3, 16, 16], 0.5f32)];
    let err = evaluate(&model, &QuantizedModel::passthrough(&other), &x, BTreeMap::new()).unwrap_err();
    assert!(matches!(err, Error::StructureMismatch(_)));
    let same = evaluate(&model, &QuantizedModel::passthrough(&model), &x, BTreeMap::new()).unwrap();
    assert_eq!(same.mse.mean, 0.0);
}

#[test]
fn exported_images_have_tensor_dimensions() {
    let batch = Tensor::from_fn(vec![8, 3, 5, 7], |i| (i % 13) as f32 - 6.0);
    let dir = tempfile::tempdir().unwrap();
    let files: Vec<PathBuf> = export_images(&batch, dir.path(), "img").unwrap();
    assert_eq!(files.len(), 8 + 24);
    for f in &files {
        let (w, h, px) = read_pgm(f);
        assert_eq!((w, h, px.len()), (7, 5, 35));
    }
}

#[test]
fn constant_image_exports_uniform_gray() {
    let batch = Tensor::filled(vec![1, 3, 4, 4], 0.7f32);
    let dir = tempfile::tempdir().unwrap();
    for f in export_images(&batch, dir.path(), "flat").unwrap() {
        let (_, _, px) = read_pgm(&f);
        assert!(px.iter().all(|&p| p == 128));
    }
}

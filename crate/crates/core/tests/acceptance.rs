//! Acceptance suite: each criterion prints one PASS/FAIL line with the
//! measured values and wall time. The process exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsq_core::calibration::{select_range, HistogramCollector, RangeMethod, RangeSelector, DEFAULT_BINS};
use zsq_core::distill::{distill, BnStatisticsLoss, DistillConfig, LossMode};
use zsq_core::forward::OutputDot;
use zsq_core::graph::{BatchNorm2d, Layer};
use zsq_core::model_io::format::encode_model;
use zsq_core::pipeline::{self, CalibrationSource, PipelineConfig};
use zsq_core::quant::format::encode_quantized;
use zsq_core::quant::{compute_params, dequantize, fake_quantize, quantize, quantize_per_channel, CalibRange};
use zsq_core::{ModelGraph, Real, Tensor};

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn oracle_check<T: Real + num_traits::Float>(rng: &mut ChaCha8Rng, k: u32) -> std::result::Result<usize, String> {
    let a0: f64 = rng.gen_range(-20.0..5.0);
    let width = 10f64.powf(rng.gen_range(-3.0..2.0));
    let (a, c) = (T::of(a0), T::of(a0 + width));
    let p = compute_params(&CalibRange::new(a, c).unwrap(), k).map_err(|e| e.to_string())?;
    let (s, z) = oracle_params(a, c, k);
    if p.scale != s || p.zero_point != z {
        return Err(format!("params for [{a}, {c}] k={k}: got s={} z={}, oracle s={s} z={z}", p.scale, p.zero_point));
    }
    let n = rng.gen_range(1..=10_000);
    let (lo, hi) = (a.as_f64().min(0.0), c.as_f64().max(0.0));
    let span = hi - lo;
    let zf = z as f64;
    let xs: Vec<T> = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            // Exact rounding ties on the code grid, including out-of-range ones.
            0 | 1 => {
                let j = rng.gen_range(-(1i32 << (k - 1)) - 3..(1i32 << (k - 1)) + 3) as f64 - zf;
                T::of(j + 0.5) * s
            }
            2 => [T::zero(), a, c, T::of(1e30), T::of(-1e30)][rng.gen_range(0..5)],
            _ => T::of(rng.gen_range(lo - 0.5 * span..hi + 0.5 * span)),
        })
        .collect();
    let x = Tensor::new(vec![n], xs).unwrap();
    let qt = quantize(&x, &p);
    let dq = dequantize(&qt);
    let fq = fake_quantize(&x, &p);
    for (i, &v) in x.data().iter().enumerate() {
        let q = oracle_quantize(v, s, z, k);
        let d = oracle_dequantize(q, s, z);
        if qt.payload[i] as i32 != q || dq.data()[i] != d || fq.data()[i] != d {
            return Err(format!(
                "x={v} (k={k}, s={s}, z={z}): code {} vs {q}, value {} / {} vs {d}",
                qt.payload[i],
                dq.data()[i],
                fq.data()[i]
            ));
        }
    }

    // Per-channel: one parameter set per leading slice.
    let channels = rng.gen_range(1..=8);
    let per = rng.gen_range(1..=64);
    let params: Vec<_> = (0..channels)
        .map(|_| {
            let a: f64 = rng.gen_range(-3.0..1.0);
            compute_params(&CalibRange::new(T::of(a), T::of(a + rng.gen_range(0.01..4.0))).unwrap(), k).unwrap()
        })
        .collect();
    let w = Tensor::from_fn(vec![channels, per], |_| T::of(rng.gen_range(-5.0..5.0)));
    let qw = quantize_per_channel(&w, &params).map_err(|e| e.to_string())?;
    let dw = dequantize(&qw);
    for (i, &v) in w.data().iter().enumerate() {
        let pc = &params[i / per];
        let q = oracle_quantize(v, pc.scale, pc.zero_point, k);
        if qw.payload[i] as i32 != q || dw.data()[i] != oracle_dequantize(q, pc.scale, pc.zero_point) {
            return Err(format!("per-channel element {i} differs from the oracle"));
        }
    }
    Ok(n + channels * per)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51);
    let mut elements = 0;
    let configs = 120;
    for i in 0..configs {
        let k = [2, 4, 8][i % 3];
        elements += oracle_check::<f64>(&mut rng, k)?;
        elements += oracle_check::<f32>(&mut rng, k)?;
    }
    Ok(format!(
        "{configs} configurations x {{f32, f64}}, {elements} elements, all codes and values identical"
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x52);
    let (configs, per) = (200, 500);
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..configs {
        let k = [2, 4, 8][i % 3];
        let a: f64 = rng.gen_range(-50.0..20.0);
        let c = a + 10f64.powf(rng.gen_range(-3.0..2.0));
        let p = compute_params(&CalibRange::new(a, c).unwrap(), k).unwrap();
        let mut xs: Vec<f64> = (0..per - 2).map(|_| rng.gen_range(a..=c)).collect();
        xs.extend([a, c]);
        let x = Tensor::new(vec![per], xs).unwrap();
        let fq = fake_quantize(&x, &p);
        for (&v, &q) in x.data().iter().zip(fq.data()) {
            let excess = (q - v).abs() - (p.scale / 2.0 + 1e-6);
            worst_excess = worst_excess.max(excess);
            if excess > 0.0 {
                return Err(format!("|fq(x) - x| = {} > s/2 + 1e-6 at x={v}, s={}", (q - v).abs(), p.scale));
            }
        }
    }
    Ok(format!(
        "{} samples over {configs} ranges; max(|fq(x)-x| - s/2 - 1e-6) = {worst_excess:.3e}",
        configs * per
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    const TOL: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(0x53);
    let models = 6;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for m in 0..models {
        let model = random_model(&mut rng);
        let n = rng.gen_range(2..=3);
        let mut shape = vec![n];
        shape.extend_from_slice(model.input_shape());
        let x = gaussian_tensor(&mut rng, shape);
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(model.output_shape());
        let ones = OutputDot {
            weights: Tensor::filled(out_shape.clone(), 1.0),
        };
        let weighted = OutputDot {
            weights: gaussian_tensor(&mut rng, out_shape),
        };
        let checks: [(&str, f64); 4] = [
            ("output-sum", gradient_error(&model, &x, &ones, &mut rng, 4, 8)),
            ("output-weighted", gradient_error(&model, &x, &weighted, &mut rng, 4, 8)),
            (
                "bn-mean-std",
                gradient_error(&model, &x, &BnStatisticsLoss::new(&model, LossMode::MeanAndStd).unwrap(), &mut rng, 4, 8),
            ),
            (
                "bn-mean",
                gradient_error(&model, &x, &BnStatisticsLoss::new(&model, LossMode::MeanOnly).unwrap(), &mut rng, 4, 8),
            ),
        ];
        for (name, err) in checks {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
            if err > TOL {
                return Err(format!("model {m} ({} layers), {name}: relative error {err:.3e}", model.layers().len()));
            }
        }
    }
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    Ok(format!("{models} random architectures; worst relative error: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- 4

fn criterion_4(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Outcome {
    let dcfg = cfg.distill_config(500, LossMode::MeanAndStd);
    if dcfg.lr0 != 0.1 || dcfg.drops() != vec![20, 75] || dcfg.lr_drop_factor != 5.0 {
        return Err(format!("unexpected schedule {dcfg:?}"));
    }
    let (batch, trace) = distill(model, &dcfg).map_err(|e| e.to_string())?;
    let lrs = [19, 20, 74, 75].map(|i| trace.records[i].lr);
    if lrs != [0.1, 0.1 / 5.0, 0.1 / 5.0, 0.1 / 25.0] {
        return Err(format!("learning rates around the drops: {lrs:?}"));
    }
    let initial = trace.initial_loss().unwrap();
    let ratio = batch.final_loss / initial;
    ensure(
        trace.records.len() == 500 && ratio <= 0.1,
        format!(
            "initial loss {initial:.4}, final {:.4}, ratio {ratio:.4} (<= 0.1)",
            batch.final_loss
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let (c, mu, sigma) = (3, 0.5f64, 2.0f64);
    let mut bn = BatchNorm2d::identity(c, 1e-5f32);
    bn.running_mean = vec![mu as f32; c];
    bn.running_std = vec![sigma as f32; c];
    let model: ModelGraph<f32> = ModelGraph::new(vec![c, 8, 8], vec![Layer::BatchNorm2d(bn)]).unwrap();
    let cfg = DistillConfig::new(LossMode::MeanAndStd, 500, 5);
    let (batch, _) = distill(&model, &cfg).map_err(|e| e.to_string())?;
    let (n, _, h, w) = batch.data.dims4().unwrap();
    let mut worst = 0.0f64;
    let mut stats = Vec::new();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| batch.data.item(i)[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        worst = worst.max((m - mu).abs()).max((sd - sigma).abs());
        stats.push(format!("({m:.4}, {sd:.4})"));
    }
    ensure(
        worst <= 1e-2,
        format!("per-channel (mean, std) {}; max gap {worst:.2e}", stats.join(" ")),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Outcome {
    let batches = pipeline::train_batches(cfg, model, 1).map_err(|e| e.to_string())?;
    let cal = pipeline::calibrate(cfg, model, &batches).map_err(|e| e.to_string())?;
    if cal.selector.bits != 8 {
        return Err(format!("reference config uses {} bits", cal.selector.bits));
    }
    let qm = pipeline::quantize(model, &cal).map_err(|e| e.to_string())?;
    let fp = encode_model(model).map_err(|e| e.to_string())?.len();
    let q = encode_quantized(&qm).map_err(|e| e.to_string())?.len();
    let ratio = q as f64 / fp as f64;
    ensure(
        (0.24..=0.30).contains(&ratio),
        format!("{fp} B -> {q} B, ratio {ratio:.4} (in [0.24, 0.30])"),
    )
}

// ---------------------------------------------------------------- 7

fn eval_mse(cfg: &PipelineConfig, model: &ModelGraph<f32>, source: CalibrationSource) -> Result<f64, String> {
    let e = |e: zsq_core::Error| e.to_string();
    let batches =
        pipeline::calibration_batches(cfg, model, source, cfg.distill.count, &cfg.distill.config).map_err(e)?;
    let cal = pipeline::calibrate(cfg, model, &batches).map_err(e)?;
    let qm = pipeline::quantize(model, &cal).map_err(e)?;
    let eval = pipeline::eval_batches(cfg, model).map_err(e)?;
    let report = pipeline::evaluate(model, &qm, &eval, BTreeMap::new()).map_err(e)?;
    Ok(report.mse.mean)
}

fn criterion_7(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Outcome {
    if cfg.eval.batches != 16 || cfg.calibration.method != (RangeMethod::Percentile { p: 99.99 }) {
        return Err("reference config is not percentile-99.99 with 16 eval batches".into());
    }
    let zsq = eval_mse(cfg, model, CalibrationSource::Distilled)?;
    let noise = eval_mse(cfg, model, CalibrationSource::Gaussian)?;
    ensure(
        zsq <= 0.5 * noise,
        format!(
            "eval MSE distilled {zsq:.4e} vs Gaussian {noise:.4e} ({} calibration batches each), ratio {:.3} (<= 0.5)",
            cfg.distill.count,
            zsq / noise
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(cfg: &PipelineConfig, model: &ModelGraph<f32>) -> Outcome {
    if cfg.compare.batches < 32 || cfg.distill.config.batch_size != 8 {
        return Err("reference config must compare >= 32 batches of 8".into());
    }
    let r = pipeline::compare(cfg, model).map_err(|e| e.to_string())?;
    let (p, z) = (r.ptq_summary, r.zsq_summary);
    ensure(
        r.ptq.len() >= 32 && r.zsq.len() >= 32 && r.relative_mean_difference <= 0.2 && z.std <= p.std,
        format!(
            "{} ({} batches per arm): PTQ mean {:.3} std {:.3}; ZSQ mean {:.3} std {:.3}; relative mean difference {:.3} (<= 0.2)",
            r.metric,
            r.ptq.len(),
            p.mean,
            p.std,
            z.mean,
            z.std,
            r.relative_mean_difference
        ),
    )
}

// ---------------------------------------------------------------- 9

fn exact_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x59);
    let minmax = RangeSelector::new(RangeMethod::MinMax, 8).unwrap();

    // Merge-order invariance over chunks with different supports.
    let chunks: Vec<Tensor<f64>> = (0..6)
        .map(|i| {
            let centre = rng.gen_range(-10.0..10.0);
            let spread = (i + 1) as f64;
            Tensor::from_fn(vec![rng.gen_range(100..2000)], |_| {
                centre + spread * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        })
        .collect();
    let collectors: Vec<HistogramCollector> = chunks
        .iter()
        .map(|t| {
            let mut h = HistogramCollector::new("site", DEFAULT_BINS);
            h.observe(t).unwrap();
            h
        })
        .collect();
    let mut reference: Option<(CalibRange<f64>, u64)> = None;
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..chunks.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let merged = order
            .iter()
            .fold(HistogramCollector::new("site", DEFAULT_BINS), |acc, &i| acc.merge(&collectors[i]).unwrap());
        let mut streamed = HistogramCollector::new("site", DEFAULT_BINS);
        for &i in &order {
            streamed.observe(&chunks[i]).unwrap();
        }
        for h in [&merged, &streamed] {
            let r: CalibRange<f64> = select_range(h, &minmax).unwrap();
            match &reference {
                None => reference = Some((r, h.total_count())),
                Some((r0, n0)) if *r0 != r || *n0 != h.total_count() => {
                    return Err(format!("order {order:?}: range {r:?} / {} vs {r0:?} / {n0}", h.total_count()));
                }
                _ => {}
            }
        }
    }

    // Percentile coverage against sort-based exact quantiles.
    const N: usize = 100_000;
    let mut worst_gap_bins = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let dists: [(&str, fn(&mut ChaCha8Rng) -> f64); 4] = [
        ("normal", |r| r.sample(rand_distr::StandardNormal)),
        ("laplace", |r| {
            let u: f64 = r.gen_range(-0.5..0.5);
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }),
        ("lognormal", |r| r.sample::<f64, _>(rand_distr::StandardNormal).exp()),
        ("uniform", |r| r.gen_range(-3.0..7.0)),
    ];
    for (name, draw) in dists {
        let data: Vec<f64> = (0..N).map(|_| draw(&mut rng)).collect();
        let mut sorted = data.clone();
        sorted.sort_by(f64::total_cmp);
        let mut h = HistogramCollector::new(name, DEFAULT_BINS);
        h.observe(&Tensor::new(vec![N], data.clone()).unwrap()).unwrap();
        let w = h.bin_width();
        for p in [99.0, 99.9, 99.99] {
            let sel = RangeSelector::new(RangeMethod::Percentile { p }, 8).unwrap();
            let r: CalibRange<f64> = select_range(&h, &sel).unwrap();
            let (qa, qc) = (exact_quantile(&sorted, (100.0 - p) / 100.0), exact_quantile(&sorted, p / 100.0));
            let gap = (r.a - qa).abs().max((r.c - qc).abs()) / w;
            worst_gap_bins = worst_gap_bins.max(gap);
            if gap > 1.0 {
                return Err(format!("{name} p={p}: [{}, {}] vs exact [{qa}, {qc}] ({gap:.2} bins)", r.a, r.c));
            }
            let outside = data.iter().filter(|&&v| v < r.a || v > r.c).count() as f64 / N as f64;
            let slack = data
                .iter()
                .filter(|&&v| (v < r.a && v >= r.a - w) || (v > r.c && v <= r.c + w))
                .count() as f64
                / N as f64;
            let bound = 2.0 * (100.0 - p) / 100.0 + slack;
            worst_excess = worst_excess.max(outside - bound);
            if outside > bound {
                return Err(format!("{name} p={p}: {outside:.5} of the mass outside, bound {bound:.5}"));
            }
        }
    }
    Ok(format!(
        "min/max identical over 20 merge and observe orders; percentile ranges within {worst_gap_bins:.2} bins of exact quantiles, max(outside - bound) = {worst_excess:.2e}"
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10(cfg: &PipelineConfig) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| pipeline::run_reference(cfg, d.path()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let rel = |p: &Path, root: &Path| p.strip_prefix(root).unwrap().to_path_buf();
    let (a, b) = (&runs[0], &runs[1]);
    let (fa, fb) = (a.all_files(), b.all_files());
    if fa.len() != fb.len() {
        return Err(format!("{} vs {} artifacts", fa.len(), fb.len()));
    }
    let mut bytes = 0;
    for (pa, pb) in fa.iter().zip(&fb) {
        if rel(pa, dirs[0].path()) != rel(pb, dirs[1].path()) {
            return Err(format!("artifact names differ: {} vs {}", pa.display(), pb.display()));
        }
        let (x, y) = (std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        if x != y {
            return Err(format!("{} differs between runs", rel(pa, dirs[0].path()).display()));
        }
        bytes += x.len();
    }
    Ok(format!("{} artifacts ({bytes} bytes) byte-identical across two runs", fa.len()))
}

fn main() {
    let cfg = PipelineConfig::reference();
    let model = pipeline::build_model(&cfg).expect("reference model builds");

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(u32, &str, u64, Check)> = vec![
        (1, "quantizer oracle equivalence", 10, Box::new(criterion_1)),
        (2, "round-trip bound", 10, Box::new(criterion_2)),
        (3, "gradient correctness", 60, Box::new(criterion_3)),
        (4, "distillation convergence", 60, Box::new(|| criterion_4(&cfg, &model))),
        (5, "exact minimizer", 10, Box::new(criterion_5)),
        (6, "size reduction", 5, Box::new(|| criterion_6(&cfg, &model))),
        (7, "distilled beats noise calibration", 180, Box::new(|| criterion_7(&cfg, &model))),
        (8, "PTQ/ZSQ parity and stability", 300, Box::new(|| criterion_8(&cfg, &model))),
        (9, "calibration properties", 10, Box::new(criterion_9)),
        (10, "end-to-end determinism", 600, Box::new(|| criterion_10(&cfg))),
    ];

    let mut failed = 0;
    for (id, name, budget, check) in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(*budget);
        let (status, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; exceeded the {budget} s budget")),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} criterion {id:>2} ({name}): {detail} [{:.2} s]",
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

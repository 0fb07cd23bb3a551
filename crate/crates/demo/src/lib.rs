//! Browser demo. Generates a small multi-class benchmark, scores it with the
//! memory-bank scorer and shows how class-wise mean-max alignment changes
//! the pooled image-score distribution and ROC curve. Results cross the
//! wasm boundary as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cada_core::align::{StatVariant, DEFAULT_EPS};
use cada_core::align::ScoreMap;
use cada_core::experiment::{Bench, Summary};
use cada_core::metrics::{image_score, roc_curve, ScoredSample, TopFraction};
use cada_core::netcore::{smooth_l1, smooth_l1_grad};
use cada_core::synthbench::{generate_in_memory, SynthConfig};

/// Benchmark settings the page exposes.
#[derive(Debug, Clone, Copy)]
pub struct DemoParams {
    pub k_classes: usize,
    pub spread_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub class_id: i64,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Panel {
    pub lo: f64,
    pub hi: f64,
    pub classes: Vec<Histogram>,
    pub mixed_i_auroc: f64,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub macro_i_auroc: f64,
    pub raw: Panel,
    pub aligned: Panel,
}

const BINS: usize = 24;

fn bench(p: DemoParams) -> cada_core::Result<Bench> {
    let cfg = SynthConfig {
        k_classes: p.k_classes,
        grid: [12, 12],
        spread_range: [0.25, 0.25 * p.spread_ratio],
        train_normal: 24,
        test_normal: 12,
        test_anomalous: 12,
        seed: p.seed,
        ..SynthConfig::default()
    };
    Bench::from_synth(&generate_in_memory(&cfg)?, 8, p.seed)
}

fn panel(bench: &Bench, maps: &[ScoreMap]) -> cada_core::Result<Panel> {
    let top = TopFraction::default();
    let mut scored = Vec::with_capacity(maps.len());
    for (img, map) in bench.test.iter().zip(maps) {
        let s = image_score(map.pixels(), top)?;
        scored.push((img.entry.class_id.unwrap_or(0), img.entry.label.is_anomalous(), s));
    }
    let lo = scored.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let mut classes: Vec<Histogram> = Vec::new();
    for &(c, anomalous, s) in &scored {
        let i = match classes.iter().position(|h| h.class_id == c) {
            Some(i) => i,
            None => {
                classes.push(Histogram {
                    class_id: c,
                    normal: vec![0; BINS],
                    anomalous: vec![0; BINS],
                });
                classes.len() - 1
            }
        };
        let bin = (((s - lo) / width) as usize).min(BINS - 1);
        if anomalous {
            classes[i].anomalous[bin] += 1;
        } else {
            classes[i].normal[bin] += 1;
        }
    }
    let samples: Vec<ScoredSample> = scored.iter().map(|s| ScoredSample::new(s.2, s.1)).collect();
    Ok(Panel {
        lo,
        hi,
        classes,
        mixed_i_auroc: Summary::of(&bench.evaluate(maps, top)?).mixed_i_auroc,
        roc: roc_curve(&samples)?,
    })
}

/// Raw against class-aligned image scores for one benchmark.
pub fn compare(p: DemoParams) -> cada_core::Result<Comparison> {
    let bench = bench(p)?;
    let raw_maps = bench.raw_maps();
    let reports = bench.evaluate(&raw_maps, TopFraction::default())?;
    let stats = bench.class_stats()?;
    let aligned_maps = bench.oracle_maps(&stats, StatVariant::MeanMax, DEFAULT_EPS)?;
    Ok(Comparison {
        macro_i_auroc: Summary::of(&reports).macro_i_auroc.unwrap_or(f64::NAN),
        raw: panel(&bench, &raw_maps)?,
        aligned: panel(&bench, &aligned_maps)?,
    })
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub loss: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Smooth-L1 loss and its gradient for residuals in `[-range, range]`.
pub fn smooth_l1_curve(alpha: f64, range: f64, points: usize) -> cada_core::Result<Curve> {
    let n = points.max(2);
    let mut c = Curve {
        x: Vec::with_capacity(n),
        loss: Vec::with_capacity(n),
        grad: Vec::with_capacity(n),
    };
    for i in 0..n {
        let x = -range + 2.0 * range * i as f64 / (n - 1) as f64;
        c.x.push(x);
        c.loss.push(smooth_l1(x, 0.0, alpha)?);
        c.grad.push(smooth_l1_grad(x, 0.0, alpha)?);
    }
    Ok(c)
}

fn to_js<T: Serialize>(r: cada_core::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON of [`compare`].
#[wasm_bindgen(js_name = compareAlignment)]
pub fn compare_alignment(k_classes: usize, spread_ratio: f64, seed: u32) -> Result<String, JsError> {
    to_js(compare(DemoParams {
        k_classes,
        spread_ratio,
        seed: seed as u64,
    }))
}

/// JSON of [`smooth_l1_curve`].
#[wasm_bindgen(js_name = smoothL1Curve)]
pub fn smooth_l1_curve_js(alpha: f64, range: f64, points: usize) -> Result<String, JsError> {
    to_js(smooth_l1_curve(alpha, range, points))
}

use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use serde_json::json;

use cada_core::metrics::{evaluate_manifest, image_score, write_reports_csv, Scope, REPORT_HEADER};
use cada_core::tensorio::Split;

use crate::args::{EvalArgs, ReportArgs};
use crate::files::{create_out, csv_file, load_manifest, load_map, write_resolved};
use crate::UsageError;

pub const METRICS_CSV: &str = "metrics.csv";
pub const HISTOGRAMS_CSV: &str = "histograms.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn eval(a: &EvalArgs) -> Result<()> {
    let top = a.top.validate()?;
    let manifest = load_manifest(&a.data)?;
    let mut maps = BTreeMap::new();
    for e in manifest.split(Split::Test) {
        maps.insert(e.image_id.clone(), load_map(&a.data, e)?);
    }
    let reports = evaluate_manifest(&manifest, &a.data, &maps, top)?;
    create_out(&a.out)?;
    write_reports_csv(csv_file(&a.out.join(METRICS_CSV))?, &reports)?;
    write_resolved(&a.out, "eval", a, json!({ "top": top.to_string() }))?;
    for r in &reports {
        if matches!(r.scope, Scope::Mixed | Scope::MacroAverage) {
            println!("{:<6} I-AUROC {:.4}  I-AP {:.4}", r.scope, r.i_auroc, r.i_ap);
        }
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    if a.data.is_none() && a.metrics.is_empty() {
        return Err(UsageError("report needs --data, --metrics NAME=PATH, or both".into()).into());
    }
    if a.bins == 0 {
        return Err(UsageError("--bins must be positive".into()).into());
    }
    let top = a.top.validate()?;
    let tables = a
        .metrics
        .iter()
        .map(|m| {
            m.split_once('=')
                .filter(|(name, path)| !name.is_empty() && !path.is_empty())
                .ok_or_else(|| UsageError(format!("--metrics expects NAME=PATH, got {m:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    create_out(&a.out)?;
    if let Some(data) = &a.data {
        histograms(a, data, top)?;
    }
    if !tables.is_empty() {
        let mut w = csv::Writer::from_writer(csv_file(&a.out.join(SUMMARY_CSV))?);
        w.write_record(std::iter::once("name").chain(REPORT_HEADER))?;
        for (name, path) in &tables {
            let file = fs::File::open(path).with_context(|| format!("opening {path}"))?;
            let mut r = csv::Reader::from_reader(file);
            let header = r.headers()?.clone();
            if header.iter().ne(REPORT_HEADER) {
                anyhow::bail!("{path} is not a metrics table written by eval");
            }
            for rec in r.records() {
                let rec = rec.with_context(|| format!("reading {path}"))?;
                w.write_record(std::iter::once(*name).chain(rec.iter()))?;
            }
        }
        w.flush()?;
    }
    write_resolved(&a.out, "report", a, json!({ "top": top.to_string(), "tables": tables.len() }))?;
    Ok(())
}

/// Histogram of image scores per (class, split, label) over one shared range.
fn histograms(a: &ReportArgs, data: &std::path::Path, top: cada_core::metrics::TopFraction) -> Result<()> {
    let manifest = load_manifest(data)?;
    let mut scored = Vec::new();
    for e in &manifest.images {
        if e.score_path.is_none() {
            continue;
        }
        let s = image_score(load_map(data, e)?.pixels(), top)?;
        let split = match e.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let label = if e.label.is_anomalous() { "anomalous" } else { "normal" };
        let class = e.class_id.map(|c| c.to_string()).unwrap_or_default();
        scored.push(((class, split, label), s));
    }
    if scored.is_empty() {
        return Err(UsageError(format!("no image in {} has a score map", data.display())).into());
    }
    let lo = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / a.bins as f64 } else { 1.0 };
    let mut counts: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (key, s) in &scored {
        let bin = (((s - lo) / width) as usize).min(a.bins - 1);
        counts.entry(key.clone()).or_insert_with(|| vec![0; a.bins])[bin] += 1;
    }
    let mut w = csv::Writer::from_writer(csv_file(&a.out.join(HISTOGRAMS_CSV))?);
    w.write_record(["class_id", "split", "label", "bin_lo", "bin_hi", "count"])?;
    for ((class, split, label), bins) in &counts {
        for (i, n) in bins.iter().enumerate() {
            let b_lo = lo + i as f64 * width;
            w.write_record([
                class.clone(),
                split.to_string(),
                label.to_string(),
                b_lo.to_string(),
                (b_lo + width).to_string(),
                n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

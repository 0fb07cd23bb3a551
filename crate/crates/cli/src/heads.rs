use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::json;

use cada_core::align::{read_class_stats_csv, ClassStats, ScoreMap};
use cada_core::cada::{train_classifier, train_regressor, HeadMode, HeadModel};
use cada_core::tensorio::{write_tensor, DatasetManifest, Split, Tensor};

use crate::args::{AlignArgs, AlignMode, SplitSel, TrainHeadArgs};
use crate::files::{create_out, csv_file, load_features, load_manifest, load_map, rebase, write_manifest_to, write_resolved};
use crate::UsageError;

pub const ALIGNMENT_CSV: &str = "alignment.csv";

pub fn train_head(a: &TrainHeadArgs) -> Result<()> {
    let head = a.head.resolve(a.mode)?;
    let train = a.train.resolve()?;
    let manifest = load_manifest(&a.data)?;
    let entries: Vec<_> = manifest.split(Split::Train).collect();
    let features = entries.iter().map(|e| load_features(&a.data, e)).collect::<Result<Vec<_>>>()?;
    let model = match a.mode {
        HeadMode::Regressor => {
            let maps = entries.iter().map(|e| load_map(&a.data, e)).collect::<Result<Vec<_>>>()?;
            let samples: Vec<(&Tensor, &ScoreMap)> = features.iter().zip(&maps).collect();
            train_regressor(&samples, &head, &train)?
        }
        HeadMode::Classifier => {
            let mut samples = Vec::with_capacity(entries.len());
            for (e, f) in entries.iter().zip(&features) {
                let c = e.class_id.ok_or_else(|| {
                    UsageError(format!("the classifier needs class_id on every training image; {} has none", e.image_id))
                })?;
                samples.push((f, c));
            }
            train_classifier(&samples, &head, &train)?
        }
    };
    create_out(&a.out)?;
    model.save(&a.out)?;
    write_resolved(&a.out, "train-head", a, json!({ "head": head, "train": train }))?;
    let last = model.loss_trace.last().copied().unwrap_or(f64::NAN);
    match model.holdout_accuracy {
        Some(acc) => println!("trained {} head, final loss {last:.5}, holdout accuracy {acc:.4}", a.mode),
        None => println!("trained {} head, final loss {last:.5}", a.mode),
    }
    Ok(())
}

enum Aligner {
    Identity,
    Oracle(Vec<ClassStats>),
    Classifier(HeadModel, Vec<ClassStats>),
    Regressor(HeadModel),
}

fn read_stats(a: &AlignArgs) -> Result<Vec<ClassStats>> {
    let path = a
        .stats
        .as_ref()
        .ok_or_else(|| UsageError(format!("--mode {} needs --stats", mode_name(a.mode))))?;
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_class_stats_csv(file)?)
}

fn read_model(a: &AlignArgs, expect: HeadMode) -> Result<HeadModel> {
    let dir = a
        .model
        .as_ref()
        .ok_or_else(|| UsageError(format!("--mode {} needs --model", mode_name(a.mode))))?;
    let model = HeadModel::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if model.config.mode != expect {
        return Err(UsageError(format!(
            "{} holds a {} head, --mode {} needs a {expect} head",
            dir.display(),
            model.config.mode,
            mode_name(a.mode)
        ))
        .into());
    }
    Ok(model)
}

fn mode_name(m: AlignMode) -> &'static str {
    match m {
        AlignMode::None => "none",
        AlignMode::Oracle => "oracle",
        AlignMode::Classifier => "classifier",
        AlignMode::Regressor => "regressor",
    }
}

pub fn align(a: &AlignArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let aligner = match a.mode {
        AlignMode::None => Aligner::Identity,
        AlignMode::Oracle => {
            if !manifest.has_class_ids() {
                return Err(UsageError("oracle alignment needs class_id on every image of the manifest".into()).into());
            }
            Aligner::Oracle(read_stats(a)?)
        }
        AlignMode::Classifier => {
            let stats = read_stats(a)?;
            Aligner::Classifier(read_model(a, HeadMode::Classifier)?, stats)
        }
        AlignMode::Regressor => {
            let model = read_model(a, HeadMode::Regressor)?;
            if model.config.target != a.variant {
                return Err(UsageError(format!(
                    "the regressor predicts {} statistics, --variant asks for {}",
                    model.config.target, a.variant
                ))
                .into());
            }
            Aligner::Regressor(model)
        }
    };

    let maps_dir = a.out.join("maps");
    fs::create_dir_all(&maps_dir).with_context(|| format!("creating {}", maps_dir.display()))?;
    let mut log = csv::Writer::from_writer(csv_file(&a.out.join(ALIGNMENT_CSV))?);
    log.write_record(["image_id", "split", "u", "gamma", "clamped", "predicted_class"])?;
    let mut images = Vec::with_capacity(manifest.len());
    let mut n = 0;
    for e in &manifest.images {
        let mut entry = rebase(e, &a.data, &a.out)?;
        let wanted = match a.split {
            SplitSel::All => true,
            SplitSel::Train => e.split == Split::Train,
            SplitSel::Test => e.split == Split::Test,
        };
        if !wanted {
            entry.score_path = None;
            images.push(entry);
            continue;
        }
        let map = load_map(&a.data, e)?;
        let (out, u, gamma, clamped, predicted) = match &aligner {
            Aligner::Identity => (map, None, None, false, None),
            Aligner::Oracle(stats) => {
                let class = e.class_id.expect("checked above");
                let s = find(stats, class)?;
                let c = s.normalize(&map, a.variant, a.eps);
                (c.map, Some(s.u_c), Some(s.gamma(a.variant)), c.clamped, None)
            }
            Aligner::Classifier(model, stats) => {
                let class = model.predict_class(&load_features(&a.data, e)?)?;
                let s = find(stats, class)?;
                let c = s.normalize(&map, a.variant, a.eps);
                (c.map, Some(s.u_c), Some(s.gamma(a.variant)), c.clamped, Some(class))
            }
            Aligner::Regressor(model) => {
                let p = model.predict_stats(&load_features(&a.data, e)?)?;
                let c = p.calibrate(&map, a.eps);
                (c.map, Some(p.u()), Some(p.gamma()), c.clamped, None)
            }
        };
        let rel = PathBuf::from("maps").join(format!("{}.adt", e.image_id));
        write_tensor(a.out.join(&rel), out.tensor())?;
        entry.score_path = Some(rel);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        log.write_record([
            e.image_id.clone(),
            format!("{:?}", e.split).to_lowercase(),
            opt(u),
            opt(gamma),
            clamped.to_string(),
            predicted.map(|c| c.to_string()).unwrap_or_default(),
        ])?;
        images.push(entry);
        n += 1;
    }
    log.flush()?;
    write_manifest_to(&a.out, &DatasetManifest::new(images))?;
    write_resolved(&a.out, "align", a, json!({ "aligned": n }))?;
    println!("aligned {n} maps ({})", mode_name(a.mode));
    Ok(())
}

fn find(stats: &[ClassStats], class: i64) -> Result<&ClassStats> {
    stats
        .iter()
        .find(|s| s.class_id == class)
        .ok_or_else(|| cada_core::Error::UnknownClass(class).into())
}

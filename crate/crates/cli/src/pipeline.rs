use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cada_core::align::{fit_class_stats, write_class_stats_csv, ScoreMap};
use cada_core::synthbench::{fit_coreset, generate, score_knn, Coreset};
use cada_core::tensorio::{read_tensor, write_tensor, DatasetManifest, Split};

use crate::args::{FitBaseArgs, GenArgs, ScoreArgs, SplitSel, StatsArgs};
use crate::files::{
    create_out, csv_file, load_features, load_manifest, load_map, rebase, write_manifest_to, write_resolved,
};
use crate::UsageError;

pub const CORESET_POINTS: &str = "coreset.adt";
pub const CORESET_INFO: &str = "coreset.json";
pub const CLASS_STATS: &str = "class_stats.csv";

/// Which training image every coreset point came from.
#[derive(Debug, Serialize, Deserialize)]
struct CoresetInfo {
    m_per_image: usize,
    seed: u64,
    train_ids: Vec<String>,
    sources: Vec<usize>,
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let cfg = a.synth.resolve()?;
    create_out(&a.out)?;
    let manifest = generate(&cfg, &a.out)?;
    write_resolved(&a.out, "gen", a, json!({ "synth": cfg }))?;
    println!("generated {} images in {}", manifest.len(), a.out.display());
    Ok(())
}

pub fn fit_base(a: &FitBaseArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let train: Vec<_> = manifest.split(Split::Train).collect();
    let feats = train.iter().map(|e| load_features(&a.data, e)).collect::<Result<Vec<_>>>()?;
    let coreset = fit_coreset(&feats.iter().collect::<Vec<_>>(), a.m_per_image, a.seed)?;
    create_out(&a.out)?;
    write_tensor(a.out.join(CORESET_POINTS), &coreset.to_tensor()?)?;
    let info = CoresetInfo {
        m_per_image: a.m_per_image,
        seed: a.seed,
        train_ids: train.iter().map(|e| e.image_id.clone()).collect(),
        sources: coreset.sources().to_vec(),
    };
    let path = a.out.join(CORESET_INFO);
    fs::write(&path, serde_json::to_string_pretty(&info)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    write_resolved(&a.out, "fit-base", a, json!({ "points": coreset.len(), "dim": coreset.dim() }))?;
    println!("coreset of {} points from {} training images", coreset.len(), train.len());
    Ok(())
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let text = fs::read_to_string(a.base.join(CORESET_INFO))
        .with_context(|| format!("reading {}", a.base.join(CORESET_INFO).display()))?;
    let info: CoresetInfo = serde_json::from_str(&text)?;
    let coreset = Coreset::from_parts(&read_tensor(a.base.join(CORESET_POINTS))?, info.sources)?;
    let train_ids: Vec<&str> = manifest.split(Split::Train).map(|e| e.image_id.as_str()).collect();
    if train_ids != info.train_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        bail!("the memory bank in {} was fitted on a different training split", a.base.display());
    }
    let ordinal: BTreeMap<&str, usize> = train_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let maps_dir = a.out.join("scores");
    fs::create_dir_all(&maps_dir).with_context(|| format!("creating {}", maps_dir.display()))?;
    let mut images = Vec::with_capacity(manifest.len());
    let mut n = 0;
    for e in &manifest.images {
        let mut entry = rebase(e, &a.data, &a.out)?;
        let wanted = match a.split {
            SplitSel::All => true,
            SplitSel::Train => e.split == Split::Train,
            SplitSel::Test => e.split == Split::Test,
        };
        if wanted {
            let exclude = ordinal.get(e.image_id.as_str()).copied();
            let map = score_knn(&e.image_id, &load_features(&a.data, e)?, &coreset, exclude)?;
            let rel = std::path::PathBuf::from("scores").join(format!("{}.adt", e.image_id));
            write_tensor(a.out.join(&rel), map.tensor())?;
            entry.score_path = Some(rel);
            n += 1;
        }
        images.push(entry);
    }
    write_manifest_to(&a.out, &DatasetManifest::new(images))?;
    write_resolved(&a.out, "score", a, json!({ "scored": n }))?;
    println!("scored {n} images");
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let mut maps: Vec<(i64, ScoreMap)> = Vec::new();
    for e in manifest.split(Split::Train) {
        let class = e.class_id.ok_or_else(|| {
            UsageError(format!("class statistics need class_id on every training image; {} has none", e.image_id))
        })?;
        maps.push((class, load_map(&a.data, e)?));
    }
    let mut groups: BTreeMap<i64, Vec<&ScoreMap>> = BTreeMap::new();
    for (c, m) in &maps {
        groups.entry(*c).or_default().push(m);
    }
    let stats = fit_class_stats(&groups)?;
    create_out(&a.out)?;
    write_class_stats_csv(csv_file(&a.out.join(CLASS_STATS))?, &stats)?;
    write_resolved(&a.out, "stats", a, json!({ "classes": stats.len() }))?;
    println!("statistics for {} classes", stats.len());
    Ok(())
}

use std::collections::BTreeMap;

use cada_core::experiment::Bench;
use cada_core::synthbench::{generate, generate_in_memory, SynthConfig};
use cada_core::tensorio::Split;

fn two_classes() -> SynthConfig {
    SynthConfig {
        k_classes: 2,
        train_normal: 40,
        test_normal: 10,
        test_anomalous: 10,
        seed: 11,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_byte_identical() {
    let cfg = SynthConfig {
        train_normal: 3,
        test_normal: 2,
        test_anomalous: 2,
        ..two_classes()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&cfg, a.path()).unwrap();
    generate(&cfg, b.path()).unwrap();
    let mut n = 0;
    for sub in ["features", "masks", "."] {
        for entry in std::fs::read_dir(a.path().join(sub)).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_file() {
                let other = b.path().join(sub).join(entry.file_name());
                assert_eq!(std::fs::read(entry.path()).unwrap(), std::fs::read(other).unwrap());
                n += 1;
            }
        }
    }
    assert_eq!(n, 2 * 7 + 2 * 2 + 2);
}

#[test]
fn empirical_spread_matches_sampled_spread() {
    let data = generate_in_memory(&two_classes()).unwrap();
    for class in &data.classes {
        let mut ss = 0.0;
        let mut count = 0usize;
        for img in data.images.iter().filter(|i| i.entry.split == Split::Train && i.entry.class_id == Some(class.class_id)) {
            let f = &img.features;
            let plane = f.shape()[1] * f.shape()[2];
            for (ch, mu) in class.center.iter().enumerate() {
                for v in &f.data()[ch * plane..(ch + 1) * plane] {
                    ss += (v - mu) * (v - mu);
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000);
        let sd = (ss / count as f64).sqrt();
        assert!((sd / class.spread - 1.0).abs() <= 0.10, "class {}: {sd} vs {}", class.class_id, class.spread);
    }
}

#[test]
fn normal_scores_scale_with_spread() {
    let cfg = two_classes();
    let data = generate_in_memory(&cfg).unwrap();
    assert_eq!(data.classes[1].spread / data.classes[0].spread, 16.0);
    let bench = Bench::from_synth(&data, 64, 0).unwrap();
    let mut means: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for img in bench.test.iter().filter(|i| i.mask.is_none()) {
        let e = means.entry(img.entry.class_id.unwrap()).or_default();
        e.0 += img.map.pixels().iter().sum::<f64>();
        e.1 += img.map.pixels().len();
    }
    let ratio = (means[&1].0 / means[&1].1 as f64) / (means[&0].0 / means[&0].1 as f64);
    assert!((8.0..=32.0).contains(&ratio), "{ratio}");
}

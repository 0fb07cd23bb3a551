use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use cada_core::cada::{HeadConfig, HeadMode, Structure};
use cada_core::experiment::{run_ablation, write_ablation_csv, AblationGrid, Bench};
use cada_core::netcore::{grad_check, Act, Chw, GradLoss, Network};
use cada_core::rng::derive_seed;

use crate::args::{AblateArgs, GradCheckArgs};
use crate::files::{create_out, csv_file, load_manifest, write_resolved};
use crate::{NumericalFailure, UsageError};

pub const GRAD_CHECK_CSV: &str = "grad_check.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

pub fn grad_check_cmd(a: &GradCheckArgs) -> Result<()> {
    if a.mode == HeadMode::Classifier && a.classes < 2 {
        return Err(UsageError("--classes must be at least 2".into()).into());
    }
    let structures = if a.structures.is_empty() {
        Structure::GRID.to_vec()
    } else {
        a.structures.clone()
    };
    let (h, w) = (a.size[0], a.size[1]);
    let out_dim = match a.mode {
        HeadMode::Regressor => 2,
        HeadMode::Classifier => a.classes,
    };
    let loss = match a.mode {
        HeadMode::Regressor => GradLoss::SmoothL1 {
            target: vec![0.3, -0.7],
            alpha: HeadConfig::default().alpha,
        },
        HeadMode::Classifier => GradLoss::CrossEntropy(0),
    };
    create_out(&a.out)?;
    let mut out = csv::Writer::from_writer(csv_file(&a.out.join(GRAD_CHECK_CSV))?);
    out.write_record(["structure", "mode", "n_checked", "max_rel_error", "input_rel_error", "passed"])?;
    let mut failed = Vec::new();
    for (i, s) in structures.iter().enumerate() {
        let cfg = HeadConfig {
            mode: a.mode,
            structure: *s,
            hidden_dim: a.hidden_dim,
            dropout_rate: a.dropout,
            ..HeadConfig::default()
        };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, i as u64));
        let mut net = Network::new(cfg.layers(a.channels, out_dim), a.channels, &mut rng)?;
        let x: Vec<f64> = (0..a.channels * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = Act::Spatial(Chw { c: a.channels, h, w }, x);
        let dropout_seed = (a.dropout > 0.0).then(|| derive_seed(a.seed, 1000 + i as u64));
        let r = grad_check(&mut net, &input, &loss, dropout_seed)?;
        let worst = r.max_rel_error.max(r.input_rel_error);
        let passed = worst <= a.tolerance;
        out.write_record([
            s.to_string(),
            a.mode.to_string(),
            r.n_checked.to_string(),
            r.max_rel_error.to_string(),
            r.input_rel_error.to_string(),
            passed.to_string(),
        ])?;
        println!("{:<11} {} derivatives, max relative error {worst:.3e}", s.to_string(), r.n_checked);
        if !passed {
            failed.push(s.to_string());
        }
    }
    out.flush()?;
    write_resolved(&a.out, "grad-check", a, json!({ "structures": structures }))?;
    if !failed.is_empty() {
        return Err(NumericalFailure(format!(
            "gradient check above tolerance {} for {}",
            a.tolerance,
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let head = a.head.resolve(HeadMode::Regressor)?;
    let train = a.train.resolve()?;
    let mut grid = AblationGrid::default();
    if !a.structures.is_empty() {
        grid.structures = a.structures.clone();
    }
    if !a.dropout_rates.is_empty() {
        grid.dropout_rates = a.dropout_rates.clone();
    }
    if !a.tops.is_empty() {
        grid.top_fractions = a.tops.iter().map(|t| t.validate()).collect::<Result<_, _>>()?;
    }
    let manifest = load_manifest(&a.data)?;
    let bench = Bench::load(&manifest, &a.data)?;
    let rows = run_ablation(&bench, &grid, &head, &train, a.eps, |s, d| {
        eprintln!("trained {s} at dropout {d}");
    })?;
    create_out(&a.out)?;
    write_ablation_csv(csv_file(&a.out.join(ABLATION_CSV))?, &rows)?;
    write_resolved(&a.out, "ablate", a, json!({ "grid": grid, "head": head, "train": train }))?;
    let beat = rows.iter().filter(|r| r.cada_mixed_i_auroc > r.raw_mixed_i_auroc).count();
    println!("{beat} of {} cells beat the raw scores", rows.len());
    Ok(())
}

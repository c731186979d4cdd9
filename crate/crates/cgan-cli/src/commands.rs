use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use cgan_core::baselines::{clip_percentile, fit_logistic_propensity, ipw_weights};
use cgan_core::error::Error as CoreError;
use cgan_core::estimators::{asdm, effect_report};
use cgan_core::io;
use cgan_core::oracle;
use cgan_core::simgen::SimSpec;
use cgan_core::trainer::{train as train_model, TrainConfig};
use cgan_core::weights::{extract, WeightVector};
use cgan_core::StudyArm;

use crate::{EvaluateArgs, OracleArgs, SimulateArgs, TrainArgs, WeighArgs};

/// Maps error kinds onto the documented exit codes: 2 usage, 3 data
/// validation, 4 numerical failure, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(core) = err.downcast_ref::<CoreError>() {
        return match core {
            CoreError::InvalidArgument(_) => 2,
            CoreError::DataValidation(_)
            | CoreError::Checkpoint(_)
            | CoreError::Csv(_)
            | CoreError::ShapeMismatch { .. } => 3,
            CoreError::NonFinite { .. }
            | CoreError::NonFiniteObjective { .. }
            | CoreError::DegenerateWeights
            | CoreError::DivergenceInfinite => 4,
            CoreError::Io(_) => 1,
        };
    }
    if err.to_string().contains("usage") {
        return 2;
    }
    1
}

fn write_config(out_dir: &Path, lines: &[(&str, String)]) -> anyhow::Result<()> {
    let mut text = String::new();
    for (key, value) in lines {
        writeln!(text, "{key} {value}").unwrap();
    }
    fs::write(out_dir.join("config.txt"), text)?;
    Ok(())
}

pub fn simulate_cmd_spec(args: &SimulateArgs) -> SimSpec {
    let mut spec = SimSpec::with_defaults(args.d, args.seed);
    spec.n_per_subpop = args.n_per_subpop;
    spec.kappa0 = args.kappa0;
    if let Some(nu0) = args.nu0 {
        spec.nu0 = nu0;
    }
    spec
}

pub fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)?;
    let spec = simulate_cmd_spec(&args);
    let (arm1, arm2, subpops) = cgan_core::simgen::simulate(&spec)?;

    io::write_cohort_csv(&args.out.join("arm1.csv"), &arm1)?;
    io::write_cohort_csv(&args.out.join("arm2.csv"), &arm2)?;

    let mut meta = String::new();
    writeln!(meta, "target_ate_mixture 50").unwrap();
    writeln!(meta, "target_ate_overlap 70").unwrap();
    for (name, sp) in [("A", &subpops.a), ("B", &subpops.b), ("C", &subpops.c)] {
        writeln!(meta, "subpop {} mean {}", name, join(&sp.mean)).unwrap();
        writeln!(meta, "subpop {} cov {}", name, join(&sp.cov)).unwrap();
    }
    fs::write(args.out.join("meta.txt"), meta)?;

    write_config(
        &args.out,
        &[
            ("command", "simulate".into()),
            ("d", args.d.to_string()),
            ("n_per_subpop", args.n_per_subpop.to_string()),
            ("kappa0", spec.kappa0.to_string()),
            ("nu0", spec.nu0.to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    println!(
        "wrote {} and {} ({} units each, {} features)",
        args.out.join("arm1.csv").display(),
        args.out.join("arm2.csv").display(),
        arm1.n_units(),
        args.d
    );
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn read_cohorts(paths: &[PathBuf]) -> anyhow::Result<Vec<StudyArm>> {
    // schema check first: feature columns must agree across cohorts
    let first_cols = io::cohort_feature_columns(&paths[0])?;
    for path in &paths[1..] {
        let cols = io::cohort_feature_columns(path)?;
        if cols != first_cols {
            let missing: Vec<_> = first_cols.iter().filter(|c| !cols.contains(c)).collect();
            let extra: Vec<_> = cols.iter().filter(|c| !first_cols.contains(c)).collect();
            return Err(CoreError::DataValidation(format!(
                "feature columns differ between {} and {}: missing {:?}, extra {:?}",
                paths[0].display(),
                path.display(),
                missing,
                extra
            ))
            .into());
        }
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, path)| {
            io::read_cohort_csv(path, &format!("arm{}", i + 1))
                .with_context(|| format!("reading {}", path.display()))
        })
        .collect()
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)?;
    let arms = read_cohorts(&args.cohorts)?;
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        max_iters: args.max_iters,
        disc_steps: args.disc_steps,
        lr_gen: args.lr_gen,
        lr_disc: args.lr_disc,
        lr_decay: args.lr_decay,
        recenter_period: args.recenter_period,
        convergence_window: args.convergence_window,
        convergence_tol: args.convergence_tol,
        noise_dim: args.noise_dim,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let model = train_model(&arms, &cfg)?;

    io::save_checkpoint(&args.out.join("model.cgan"), &model)?;
    io::write_trace_csv(&args.out.join("trace.csv"), &model.trace)?;
    write_config(
        &args.out,
        &[
            ("command", "train".into()),
            (
                "cohorts",
                args.cohorts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" "),
            ),
            ("batch_size", cfg.batch_size.to_string()),
            ("max_iters", cfg.max_iters.to_string()),
            ("disc_steps", cfg.disc_steps.to_string()),
            ("lr_gen", cfg.lr_gen.to_string()),
            ("lr_disc", cfg.lr_disc.to_string()),
            ("lr_decay", cfg.lr_decay.to_string()),
            ("recenter_period", cfg.recenter_period.to_string()),
            ("convergence_window", cfg.convergence_window.to_string()),
            ("convergence_tol", cfg.convergence_tol.to_string()),
            ("noise_dim", cfg.noise_dim.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    )?;
    let last = model.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations, final F {:.6}; checkpoint at {}",
        model.trace.len(),
        last,
        args.out.join("model.cgan").display()
    );
    Ok(())
}

pub fn weigh(args: WeighArgs) -> anyhow::Result<()> {
    let model = io::load_checkpoint(&args.checkpoint)?;
    let arm = io::read_cohort_csv(&args.cohort, "cohort")?;
    let w = extract(&model, &arm, args.arm_index)?;
    io::write_weights_csv(&args.out, &arm.id, &w, Some("cgan"))?;
    println!("wrote {} weights to {}", w.len(), args.out.display());
    Ok(())
}

fn uniform_pair(arms: &[StudyArm]) -> anyhow::Result<(WeightVector, WeightVector)> {
    Ok((
        WeightVector::uniform(0, arms[0].n_units())?,
        WeightVector::uniform(1, arms[1].n_units())?,
    ))
}

fn ipw_pair(arms: &[StudyArm], clipped: bool) -> anyhow::Result<(WeightVector, WeightVector)> {
    let mut treated = vec![true; arms[0].n_units()];
    treated.extend(vec![false; arms[1].n_units()]);
    let model = fit_logistic_propensity(&[&arms[0], &arms[1]], &treated)?;
    if model.separation_warning {
        eprintln!("warning: propensity fit shows signs of perfect separation");
    }
    let mut scores = model.scores(&arms[0]);
    scores.extend(model.scores(&arms[1]));
    let scores = if clipped { clip_percentile(&scores, 10.0, 90.0)? } else { scores };
    Ok(ipw_weights(&scores, &treated)?)
}

pub fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)?;
    let arms = read_cohorts(&args.cohorts)?;
    if arms.len() != 2 {
        bail!("usage: evaluate needs exactly two cohorts");
    }

    let method = args.method.as_deref();
    let (label, w1, w2) = match (method, &args.weights) {
        (None, Some(paths)) => {
            let w1 = io::read_weights_csv(&paths[0])?;
            let w2 = io::read_weights_csv(&paths[1])?;
            ("weights-csv".to_string(), w1, w2)
        }
        (Some("unweighted"), None) => {
            let (w1, w2) = uniform_pair(&arms)?;
            ("unweighted".into(), w1, w2)
        }
        (Some("ipw"), None) => {
            let (w1, w2) = ipw_pair(&arms, false)?;
            ("ipw".into(), w1, w2)
        }
        (Some("clipped-ipw"), None) => {
            let (w1, w2) = ipw_pair(&arms, true)?;
            ("clipped-ipw".into(), w1, w2)
        }
        (Some("cgan"), None) => {
            let ckpt = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("usage: --method cgan requires --checkpoint"))?;
            let model = io::load_checkpoint(ckpt)?;
            let w1 = extract(&model, &arms[0], 0)?;
            let w2 = extract(&model, &arms[1], 1)?;
            ("cgan".into(), w1, w2)
        }
        _ => bail!("usage: pass either --weights (two files) or --method, not both/neither"),
    };

    for (arm, w) in arms.iter().zip([&w1, &w2]) {
        if w.len() != arm.n_units() {
            return Err(CoreError::DataValidation(format!(
                "arm {} has {} units but {} weights",
                arm.id,
                arm.n_units(),
                w.len()
            ))
            .into());
        }
    }

    let mut report_text = String::new();
    writeln!(report_text, "method: {label}").unwrap();

    // Effect report needs outcomes.
    let mut effect_line = String::from("ATE: outcomes not present in both cohorts");
    if let (Some(y1), Some(y2)) = (&arms[0].outcomes, &arms[1].outcomes) {
        let report = effect_report(y1, &w1, y2, &w2)?;
        let mut csv = String::from("method,ate,mean_arm1,mean_arm2,ess_arm1,ess_arm2\n");
        writeln!(
            csv,
            "{label},{},{},{},{},{}",
            report.ate,
            report.weighted_means[0],
            report.weighted_means[1],
            report.ess[0],
            report.ess[1]
        )
        .unwrap();
        fs::write(args.out.join("effect_report.csv"), csv)?;
        effect_line = format!(
            "ATE {:.4}   ESS arm1 {:.1}   ESS arm2 {:.1}",
            report.ate, report.ess[0], report.ess[1]
        );
    }
    writeln!(report_text, "{effect_line}").unwrap();

    let balance = asdm(&arms[0], &w1, &arms[1], &w2)?;
    let mut csv = String::from("feature,asdm\n");
    for (j, v) in balance.per_feature.iter().enumerate() {
        writeln!(csv, "f_{j},{v}").unwrap();
    }
    writeln!(csv, "mean,{}", balance.mean_asdm).unwrap();
    fs::write(args.out.join("balance_report.csv"), csv)?;
    writeln!(report_text, "mean ASDM {:.4}", balance.mean_asdm).unwrap();
    if !balance.skipped.is_empty() {
        writeln!(report_text, "skipped zero-variance features: {:?}", balance.skipped).unwrap();
    }

    fs::write(args.out.join("report.txt"), &report_text)?;
    write_config(
        &args.out,
        &[
            ("command", "evaluate".into()),
            (
                "cohorts",
                args.cohorts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(" "),
            ),
            ("method", label.clone()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    print!("{report_text}");
    Ok(())
}

pub fn oracle(args: OracleArgs) -> anyhow::Result<()> {
    match args.suite.as_str() {
        "gaussian-chi2" => {
            let r = oracle::gaussian_chi2_oracle(args.seed)?;
            println!("analytic chi2(N(1,1) || N(0,1)) = {:.6}", r.analytic);
            println!("quadrature cross-check         = {:.6}", r.quadrature);
            println!("variational estimate           = {:.6} (MC se {:.6})", r.variational, r.mc_standard_error);
            println!(
                "tolerance window [{:.6}, {:.6}] -> {}",
                0.9 * r.analytic,
                r.analytic + 3.0 * r.mc_standard_error,
                if r.within_tolerance() { "PASS" } else { "FAIL" }
            );
        }
        "identity" => {
            let r = oracle::identity_oracle(args.seed, 2000, None)?;
            for (a, (chi2, ess)) in r.per_arm_chi2.iter().zip(&r.ess_fraction).enumerate() {
                println!(
                    "arm {}: chi2 estimate {:.4} (expected 0, tol 0.05) ESS/N {:.3} (floor 0.8)",
                    a + 1,
                    chi2,
                    ess
                );
            }
            println!(
                "ratio IQR [{:.3}, {:.3}]; weighted ATE {:.4} vs unweighted {:.4} (se {:.4})",
                r.ratio_iqr.0, r.ratio_iqr.1, r.weighted_ate, r.unweighted_ate, r.ate_standard_error
            );
            let pass = r.per_arm_chi2.iter().all(|&c| c < 0.05)
                && r.ess_fraction.iter().all(|&e| e >= 0.8)
                && (r.weighted_ate - r.unweighted_ate).abs() < 3.0 * r.ate_standard_error;
            println!("{}", if pass { "PASS" } else { "FAIL" });
        }
        "variance-relation" => {
            let r = oracle::variance_relation_oracle(args.seed, 20_000, 200)?;
            println!(
                "bootstrap variance {:.6e} vs chi2/n {:.6e} (relative gap {:.3}, tol 0.2) -> {}",
                r.bootstrap_variance,
                r.chi2_over_n,
                r.relative_gap(),
                if r.relative_gap() < 0.2 { "PASS" } else { "FAIL" }
            );
        }
        other => bail!("usage: unknown oracle suite '{other}' (expected gaussian-chi2, identity, variance-relation)"),
    }
    Ok(())
}

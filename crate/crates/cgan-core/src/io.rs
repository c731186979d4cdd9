//! File formats: cohort CSV, weights CSV, training trace CSV, and the
//! versioned model checkpoint.
//!
//! Cohort CSV schema: header row with `unit_id`, feature columns
//! `f_0..f_{d-1}`, then optional `subpop_label` and optional `outcome`.
//! UTF-8, '.' decimal separator.
//!
//! Checkpoint: line-oriented text, first line the magic `CGAN1`. Floats are
//! written with Rust's shortest-roundtrip formatting, so save/load is
//! value-exact and byte-deterministic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::nets::{Discriminator, Generator, Mlp, MlpConfig, StandardizationStats};
use crate::tensor::Tensor;
use crate::trainer::{TraceRow, TrainedModel};
use crate::weights::WeightVector;

pub const CHECKPOINT_MAGIC: &str = "CGAN1";

// ---------------------------------------------------------------------------
// Cohort CSV

pub fn write_cohort_csv(path: &Path, arm: &StudyArm) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = arm.feature_dim();
    let mut header = vec!["unit_id".to_string()];
    header.extend((0..d).map(|j| format!("f_{j}")));
    if arm.labels.is_some() {
        header.push("subpop_label".into());
    }
    if arm.outcomes.is_some() {
        header.push("outcome".into());
    }
    w.write_record(&header)?;
    for r in 0..arm.n_units() {
        let mut record = vec![r.to_string()];
        record.extend(arm.row(r).iter().map(|v| v.to_string()));
        if let Some(labels) = &arm.labels {
            record.push(labels[r].clone());
        }
        if let Some(outcomes) = &arm.outcomes {
            record.push(outcomes[r].to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort_csv(path: &Path, arm_id: &str) -> Result<StudyArm> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"unit_id") {
        return Err(Error::DataValidation(format!(
            "{}: first column must be unit_id, got {:?}",
            path.display(),
            cols.first()
        )));
    }
    let feature_cols: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("f_"))
        .map(|(i, _)| i)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::DataValidation(format!(
            "{}: no feature columns (f_0..)",
            path.display()
        )));
    }
    let label_col = cols.iter().position(|c| *c == "subpop_label");
    let outcome_col = cols.iter().position(|c| *c == "outcome");

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut outcomes = Vec::new();
    let mut n = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        for &ci in &feature_cols {
            let cell = record.get(ci).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::DataValidation(format!(
                    "{}: non-numeric feature at row {}, column {}",
                    path.display(),
                    row_idx + 2,
                    cols[ci]
                ))
            })?;
            data.push(v);
        }
        if let Some(ci) = label_col {
            labels.push(record.get(ci).unwrap_or("").to_string());
        }
        if let Some(ci) = outcome_col {
            let cell = record.get(ci).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| {
                Error::DataValidation(format!(
                    "{}: non-numeric outcome at row {}",
                    path.display(),
                    row_idx + 2
                ))
            })?;
            outcomes.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::DataValidation(format!("{}: empty cohort file", path.display())));
    }
    let d = feature_cols.len();
    let mut arm = StudyArm::new(arm_id, Tensor::matrix(n, d, data)?)?;
    if label_col.is_some() {
        arm = arm.with_labels(labels)?;
    }
    if outcome_col.is_some() {
        arm = arm.with_outcomes(outcomes)?;
    }
    Ok(arm)
}

/// Column names of the feature block, for schema comparison across cohorts.
pub fn cohort_feature_columns(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader
        .headers()?
        .iter()
        .filter(|c| c.starts_with("f_"))
        .map(|c| c.to_string())
        .collect())
}

// ---------------------------------------------------------------------------
// Weights CSV

/// Writes weights in input-row order. `method` is included when given
/// (baseline weighting methods are tagged; cGAN weights may be too).
pub fn write_weights_csv(path: &Path, arm_id: &str, w: &WeightVector, method: Option<&str>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    if let Some(m) = method {
        writer.write_record(["unit_id", "arm", "method", "raw_ratio", "weight"])?;
        for (i, (r, wt)) in w.raw_ratios.iter().zip(&w.weights).enumerate() {
            writer.write_record([&i.to_string(), arm_id, m, &r.to_string(), &wt.to_string()])?;
        }
    } else {
        writer.write_record(["unit_id", "arm", "raw_ratio", "weight"])?;
        for (i, (r, wt)) in w.raw_ratios.iter().zip(&w.weights).enumerate() {
            writer.write_record([&i.to_string(), arm_id, &r.to_string(), &wt.to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_weights_csv(path: &Path) -> Result<WeightVector> {
    let mut reader = csv::Reader::from_path(path)?;
    let cols: Vec<String> = reader.headers()?.iter().map(|c| c.to_string()).collect();
    let find = |name: &str| {
        cols.iter().position(|c| c == name).ok_or_else(|| {
            Error::DataValidation(format!("{}: missing column {}", path.display(), name))
        })
    };
    let raw_col = find("raw_ratio")?;
    let weight_col = find("weight")?;
    let mut raw = Vec::new();
    let mut weights = Vec::new();
    for record in reader.records() {
        let record = record?;
        raw.push(parse_cell(&record, raw_col, path)?);
        weights.push(parse_cell(&record, weight_col, path)?);
    }
    if raw.is_empty() {
        return Err(Error::DataValidation(format!("{}: empty weights file", path.display())));
    }
    Ok(WeightVector { arm_index: 0, raw_ratios: raw, weights })
}

fn parse_cell(record: &csv::StringRecord, col: usize, path: &Path) -> Result<f64> {
    record
        .get(col)
        .unwrap_or("")
        .parse()
        .map_err(|_| Error::DataValidation(format!("{}: non-numeric cell", path.display())))
}

// ---------------------------------------------------------------------------
// Training trace CSV

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let arms = trace.first().map(|r| r.per_arm.len()).unwrap_or(0);
    let mut header = vec!["iteration".to_string()];
    header.extend((0..arms).map(|a| format!("f_arm_{a}")));
    header.push("f_total".into());
    header.push("lr_gen".into());
    header.push("lr_disc".into());
    writer.write_record(&header)?;
    for row in trace {
        let mut record = vec![row.iteration.to_string()];
        record.extend(row.per_arm.iter().map(|v| v.to_string()));
        record.push(row.total.to_string());
        record.push(row.lr_gen.to_string());
        record.push(row.lr_disc.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint

fn write_mlp(out: &mut String, name: &str, mlp: &Mlp) {
    writeln!(out, "mlp {} {}", name, join(&mlp.config.widths)).unwrap();
    for (i, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        writeln!(out, "layer {} weights {}", i, join_f64(w.data())).unwrap();
        writeln!(out, "layer {} biases {}", i, join_f64(b.data())).unwrap();
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(out, "feature_dim {}", model.feature_dim()).unwrap();
    writeln!(out, "arms {}", model.n_arms()).unwrap();
    writeln!(out, "stats_mean {}", join_f64(&model.stats.mean)).unwrap();
    writeln!(out, "stats_std {}", join_f64(&model.stats.std)).unwrap();
    write_mlp(&mut out, "generator", &model.generator.net);
    for (a, disc) in model.discriminators.iter().enumerate() {
        writeln!(out, "shift {} {}", a, join_f64(&disc.shift)).unwrap();
        write_mlp(&mut out, &format!("discriminator_{a}"), &disc.net);
    }
    fs::write(path, out)?;
    Ok(())
}

struct LineParser<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> LineParser<'a> {
    fn next_line(&mut self, what: &str) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, wanted {what}")))
    }

    fn expect_field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line(key)?;
        let mut parts = line.split_whitespace();
        let first = parts.next().unwrap_or("");
        if first != key {
            return Err(Error::Checkpoint(format!("expected '{key}', found '{first}'")));
        }
        Ok(parts.collect())
    }
}

fn parse_f64s(parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Checkpoint(format!("bad float '{p}'")))
        })
        .collect()
}

fn read_mlp(parser: &mut LineParser) -> Result<Mlp> {
    let header = parser.expect_field("mlp")?;
    let widths: Vec<usize> = header[1..]
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Checkpoint(format!("bad width '{p}'")))
        })
        .collect::<Result<_>>()?;
    let config = MlpConfig::new(widths)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in config.widths.windows(2) {
        let w = parse_f64s(&parser.expect_field("layer")?[2..])?;
        weights.push(Tensor::matrix(pair[0], pair[1], w).map_err(|e| {
            Error::Checkpoint(format!("weight block size mismatch: {e}"))
        })?);
        let b = parse_f64s(&parser.expect_field("layer")?[2..])?;
        if b.len() != pair[1] {
            return Err(Error::Checkpoint("bias block size mismatch".into()));
        }
        biases.push(Tensor::vector(b));
    }
    Ok(Mlp { config, weights, biases })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path)?;
    let mut parser = LineParser { lines: text.lines().peekable() };

    let magic = parser.next_line("magic")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic '{}' (expected {CHECKPOINT_MAGIC})",
            magic.trim()
        )));
    }
    let feature_dim: usize = parser.expect_field("feature_dim")?[0]
        .parse()
        .map_err(|_| Error::Checkpoint("bad feature_dim".into()))?;
    let arms: usize = parser.expect_field("arms")?[0]
        .parse()
        .map_err(|_| Error::Checkpoint("bad arm count".into()))?;
    let mean = parse_f64s(&parser.expect_field("stats_mean")?)?;
    let std = parse_f64s(&parser.expect_field("stats_std")?)?;
    if mean.len() != feature_dim || std.len() != feature_dim {
        return Err(Error::Checkpoint("stats length mismatch".into()));
    }

    let gen_net = read_mlp(&mut parser)?;
    if gen_net.config.output_dim() != feature_dim {
        return Err(Error::Checkpoint("generator output dim mismatch".into()));
    }
    let generator = Generator { net: gen_net };

    let mut discriminators = Vec::with_capacity(arms);
    for _ in 0..arms {
        let shift = parse_f64s(&parser.expect_field("shift")?[1..])?;
        let net = read_mlp(&mut parser)?;
        if net.config.input_dim() != feature_dim || shift.len() != feature_dim {
            return Err(Error::Checkpoint("discriminator dim mismatch".into()));
        }
        discriminators.push(Discriminator { net, shift });
    }

    Ok(TrainedModel {
        generator,
        discriminators,
        stats: StandardizationStats { mean, std },
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{train, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn small_arm(id: &str, seed: u64) -> StudyArm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..40).map(|_| dist.sample(&mut rng)).collect();
        StudyArm::new(id, Tensor::matrix(20, 2, data).unwrap()).unwrap()
    }

    #[test]
    fn cohort_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arm.csv");
        let arm = small_arm("a1", 1)
            .with_labels((0..20).map(|i| if i < 10 { "A".into() } else { "B".into() }).collect())
            .unwrap()
            .with_outcomes((0..20).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        write_cohort_csv(&path, &arm).unwrap();
        let back = read_cohort_csv(&path, "a1").unwrap();
        assert_eq!(arm, back);
    }

    #[test]
    fn cohort_rejects_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "unit_id,f_0,f_1\n0,1.5,oops\n").unwrap();
        let err = read_cohort_csv(&path, "x").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("f_1"), "{}", msg);
    }

    #[test]
    fn cohort_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "unit_id,f_0\n").unwrap();
        assert!(read_cohort_csv(&path, "x").is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let arms = vec![small_arm("a1", 1), small_arm("a2", 2)];
        let cfg = TrainConfig { batch_size: 8, max_iters: 3, ..TrainConfig::default() };
        let model = train(&arms, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cgan");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.generator.net, loaded.generator.net);
        assert_eq!(model.stats, loaded.stats);
        for (a, b) in model.discriminators.iter().zip(&loaded.discriminators) {
            assert_eq!(a.net, b.net);
            assert_eq!(a.shift, b.shift);
        }

        // saving twice is byte-identical
        let path2 = dir.path().join("model2.cgan");
        save_checkpoint(&path2, &model).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cgan");
        fs::write(&path, "NOPE\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn weights_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = crate::weights::normalize(0, vec![1.0, 2.0, 1.0]).unwrap();
        write_weights_csv(&path, "arm1", &w, Some("cgan")).unwrap();
        let back = read_weights_csv(&path).unwrap();
        assert_eq!(w.raw_ratios, back.raw_ratios);
        assert_eq!(w.weights, back.weights);
    }
}

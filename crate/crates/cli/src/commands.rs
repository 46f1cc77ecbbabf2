use std::fs;
use std::path::Path;

use hgad_core::checkpoint::{checkpoint_precision, decode_checkpoint, encode_checkpoint};
use hgad_core::data::{encode_features, generate_synthetic, read_features, FeatureDataset, SynthSpec};
use hgad_core::eval::{auroc, compare_variants, histogram_export, pixel_auroc};
use hgad_core::numerics::{Precision, Scalar};
use hgad_core::scoring::{score_maps, ScoreSet};
use hgad_core::trainer::{train_with_eval, Config, EpochMetrics, TrainedModel, Variant};
use hgad_core::{sha256_hex, Error, Result};

use crate::manifest::{ensure_dir, RunManifest};
use crate::Global;

const MAX_PIXELS: usize = 1_000_000;

fn load_config(path: Option<&Path>, g: &Global) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = g.precision {
        cfg.train.precision = p;
    }
    if g.deterministic {
        cfg.train.parallel_levels = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serde name of a config enum, e.g. `exp-shift`.
fn label<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string(v).unwrap_or_default().trim_matches('"').to_string()
}

pub fn synth(g: &Global, spec: Option<&Path>, out: &Path, argv: &[String]) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SynthSpec::read(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    let task = generate_synthetic(&spec)?;
    ensure_dir(out)?;
    let mut m = RunManifest::start("synth", argv, spec.seed, g.deterministic);
    m.config_hash = Some(sha256_hex(spec.to_toml().as_bytes()));
    m.write(out, "spec.toml", spec.to_toml().as_bytes())?;
    m.write(out, "train.hgf1", &encode_features(&task.train)?)?;
    m.write(out, "test.hgf1", &encode_features(&task.test)?)?;
    m.finish(out)?;
    println!(
        "wrote {} train / {} test samples to {}",
        task.train.len(),
        task.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    g: &Global,
    config: Option<&Path>,
    data: &Path,
    test: Option<&Path>,
    out: &Path,
    argv: &[String],
) -> Result<()> {
    let cfg = load_config(config, g)?;
    let train_set = read_features(data)?;
    let test_set = test.map(read_features).transpose()?;
    ensure_dir(out)?;
    let mut m = RunManifest::start("train", argv, cfg.train.seed, g.deterministic);
    m.config_hash = Some(cfg.hash());
    m.precision = Some(cfg.train.precision.to_string());
    m.write(out, "config.toml", cfg.to_toml().as_bytes())?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &train_set, test_set.as_ref(), out, &mut m)?,
        Precision::F64 => train_typed::<f64>(&cfg, &train_set, test_set.as_ref(), out, &mut m)?,
    }
    m.finish(out)
}

fn train_typed<T: Scalar>(
    cfg: &Config,
    train_set: &FeatureDataset,
    test_set: Option<&FeatureDataset>,
    out: &Path,
    m: &mut RunManifest,
) -> Result<()> {
    let mut evaluator = |_epoch: usize, model: &TrainedModel<T>| -> Result<f64> {
        let test = test_set.expect("evaluator only installed with a test set");
        let set = score_maps(model, test, &model.config.scoring)?;
        image_auroc(&set, test)
    };
    let eval = match test_set {
        Some(_) => Some(&mut evaluator as &mut hgad_core::trainer::Evaluator<'_, T>),
        None => None,
    };
    let output = train_with_eval::<T>(train_set, cfg, eval)?;
    let mut csv = String::from(EpochMetrics::CSV_HEADER);
    csv.push('\n');
    for row in &output.metrics {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    m.write(out, "metrics.csv", csv.as_bytes())?;
    let path = m.write(out, "checkpoint.hgad", &encode_checkpoint(&output.model))?;
    let last = output.mean_total_per_epoch().last().copied().unwrap_or(f64::NAN);
    println!("final mean loss {last:.6}; checkpoint {}", path.display());
    Ok(())
}

fn image_auroc(set: &ScoreSet, test: &FeatureDataset) -> Result<f64> {
    let flags = test
        .anomaly_flags
        .as_deref()
        .ok_or_else(|| Error::Invalid("test set has no anomaly flags".into()))?;
    let scores: Vec<f64> = set.maps.iter().map(|m| m.image_score).collect();
    auroc(&scores, flags)
}

pub fn eval(g: &Global, checkpoint: &Path, data: &Path, out: &Path, bins: usize, argv: &[String]) -> Result<()> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let test = read_features(data)?;
    match checkpoint_precision(&bytes)? {
        Precision::F32 => eval_typed(&decode_checkpoint::<f32>(&bytes)?, &bytes, &test, g, out, bins, argv),
        Precision::F64 => eval_typed(&decode_checkpoint::<f64>(&bytes)?, &bytes, &test, g, out, bins, argv),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_typed<T: Scalar>(
    model: &TrainedModel<T>,
    ckpt_bytes: &[u8],
    test: &FeatureDataset,
    g: &Global,
    out: &Path,
    bins: usize,
    argv: &[String],
) -> Result<()> {
    let cfg = &model.config;
    let set = score_maps(model, test, &cfg.scoring)?;
    let n = test.len();
    let flags: Vec<bool> = (0..n).map(|i| test.is_anomalous(i)).collect();
    let n_anom = flags.iter().filter(|&&f| f).count();

    ensure_dir(out)?;
    let seed = g.seed.unwrap_or(cfg.train.seed);
    let mut m = RunManifest::start("eval", argv, seed, g.deterministic);
    m.config_hash = Some(cfg.hash());
    m.precision = Some(T::NAME.to_string());

    let mut scores = String::from("image_id,class,label_is_anomalous,image_score\n");
    for (i, map) in set.maps.iter().enumerate() {
        scores.push_str(&format!(
            "{i},{},{},{:.9e}\n",
            test.labels[i],
            flags[i] as u8,
            map.image_score
        ));
    }
    m.write(out, "scores.csv", scores.as_bytes())?;
    m.write(out, "score_maps.bin", &encode_score_maps(&set))?;

    let histogram = histogram_export(&set.image_logp, &flags, bins)?;
    m.write(out, "histogram.csv", histogram.to_csv().as_bytes())?;

    let mut report = format!(
        "config_hash: {}\ncheckpoint_sha256: {}\nimages: {n} ({} normal, {n_anom} anomalous)\n\
         normalization: {}\nentropy_sign: {}\ncriterion: {}\nimage_score: {}\n",
        cfg.hash(),
        sha256_hex(ckpt_bytes),
        n - n_anom,
        label(&cfg.scoring.normalization),
        label(&cfg.scoring.entropy_sign),
        label(&cfg.scoring.criterion),
        label(&cfg.scoring.image_score),
    );
    if n_anom > 0 && n_anom < n {
        report.push_str(&format!("image_auroc: {:.6}\n", image_auroc(&set, test)?));
        if let Some(masks) = &test.masks {
            let p = pixel_auroc(&set.maps, masks, Some(MAX_PIXELS), seed)?;
            report.push_str(&format!("pixel_auroc: {p:.6}\n"));
        }
        report.push_str(&format!("logp_overlap: {:.6}\n", histogram.overlap()));
    } else {
        report.push_str("image_auroc: n/a (test set needs normal and anomalous images)\n");
    }
    m.write(out, "report.txt", report.as_bytes())?;
    m.finish(out)?;
    print!("{report}");
    Ok(())
}

/// `"HGSM" version:u32 N:u32 H:u32 W:u32` then `N*H*W` f32 combined-map
/// values, little-endian.
fn encode_score_maps(set: &ScoreSet) -> Vec<u8> {
    let (h, w) = set.maps.first().map_or((0, 0), |m| (m.height, m.width));
    let mut out = Vec::with_capacity(20 + set.maps.len() * h * w * 4);
    out.extend_from_slice(b"HGSM");
    for v in [1, set.maps.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for map in &set.maps {
        for &v in &map.s {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn compare(
    g: &Global,
    config: Option<&Path>,
    data: &Path,
    test: &Path,
    out: &Path,
    variants: &[String],
    argv: &[String],
) -> Result<()> {
    let cfg = load_config(config, g)?;
    let variants: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<Result<_>>()?;
    let train_set = read_features(data)?;
    let test_set = read_features(test)?;
    let parallel = !g.deterministic;
    let report = match cfg.train.precision {
        Precision::F32 => compare_variants::<f32>(&train_set, &test_set, &cfg, &variants, parallel)?,
        Precision::F64 => compare_variants::<f64>(&train_set, &test_set, &cfg, &variants, parallel)?,
    };
    ensure_dir(out)?;
    let mut m = RunManifest::start("compare", argv, cfg.train.seed, g.deterministic);
    m.config_hash = Some(cfg.hash());
    m.precision = Some(cfg.train.precision.to_string());
    m.write(out, "config.toml", cfg.to_toml().as_bytes())?;
    m.write(out, "compare.csv", report.to_csv().as_bytes())?;
    let text = report.to_text();
    m.write(out, "report.txt", text.as_bytes())?;
    m.finish(out)?;
    print!("{text}");
    Ok(())
}

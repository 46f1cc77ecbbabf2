use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::scoring::score_maps;
use crate::trainer::{train_with_eval, Config, TrainOutput, TrainedModel, Variant};

use super::{auroc, histogram_export, pixel_auroc, Histogram};

const HISTOGRAM_BINS: usize = 50;
const MAX_PIXELS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    /// Histogram intersection of normal vs anomalous image log-likelihoods.
    pub overlap: f64,
    /// `(epoch, image AUROC)` at the evaluation cadence.
    pub trajectory: Vec<(usize, f64)>,
    /// Mean-over-levels total loss per epoch.
    pub loss_per_epoch: Vec<f64>,
    pub histogram: Histogram,
}

fn test_flags(test: &FeatureDataset) -> Result<&[bool]> {
    test.anomaly_flags
        .as_deref()
        .ok_or_else(|| Error::Invalid("evaluation set has no anomaly flags".into()))
}

/// Image AUROC of a model on a labelled test set.
pub fn image_auroc<T: Scalar>(model: &TrainedModel<T>, test: &FeatureDataset) -> Result<f64> {
    let set = score_maps(model, test, &model.config.scoring)?;
    let scores: Vec<f64> = set.maps.iter().map(|m| m.image_score).collect();
    auroc(&scores, test_flags(test)?)
}

/// Trains `variant` of `base` on `train` and evaluates it on `test`.
pub fn run_variant<T: Scalar>(
    train: &FeatureDataset,
    test: &FeatureDataset,
    base: &Config,
    variant: Variant,
) -> Result<(VariantResult, TrainOutput<T>)> {
    let flags = test_flags(test)?.to_vec();
    let mut config = base.clone();
    config.train = variant.apply(&base.train);
    let mut trajectory = Vec::new();
    let mut eval = |epoch: usize, m: &TrainedModel<T>| -> Result<f64> {
        let a = image_auroc(m, test)?;
        log::info!("{}: epoch {epoch} image AUROC {a:.4}", variant.name());
        trajectory.push((epoch, a));
        Ok(a)
    };
    let out = train_with_eval::<T>(train, &config, Some(&mut eval))?;

    let set = score_maps(&out.model, test, &config.scoring)?;
    let scores: Vec<f64> = set.maps.iter().map(|m| m.image_score).collect();
    let image = auroc(&scores, &flags)?;
    let pixel = match &test.masks {
        Some(masks) => Some(pixel_auroc(&set.maps, masks, Some(MAX_PIXELS), config.train.seed)?),
        None => None,
    };
    let histogram = histogram_export(&set.image_logp, &flags, HISTOGRAM_BINS)?;
    let result = VariantResult {
        variant,
        image_auroc: image,
        pixel_auroc: pixel,
        overlap: histogram.overlap(),
        trajectory,
        loss_per_epoch: out.mean_total_per_epoch(),
        histogram,
    };
    Ok((result, out))
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub config_hash: String,
    pub seed: u64,
    pub results: Vec<VariantResult>,
}

impl CompareReport {
    pub fn get(&self, variant: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == variant)
    }

    /// One row per variant.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,image_auroc,pixel_auroc,overlap,final_loss\n");
        for r in &self.results {
            s.push_str(&format!(
                "{},{:.6},{},{:.6},{:.6e}\n",
                r.variant.name(),
                r.image_auroc,
                r.pixel_auroc.map(|p| format!("{p:.6}")).unwrap_or_default(),
                r.overlap,
                r.loss_per_epoch.last().copied().unwrap_or(f64::NAN)
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("config_hash: {}\nseed: {}\n\n", self.config_hash, self.seed);
        s.push_str(&format!(
            "{:<8} {:>11} {:>11} {:>8}\n",
            "variant", "image_auroc", "pixel_auroc", "overlap"
        ));
        for r in &self.results {
            s.push_str(&format!(
                "{:<8} {:>11.6} {:>11} {:>8.4}\n",
                r.variant.name(),
                r.image_auroc,
                r.pixel_auroc.map(|p| format!("{p:.6}")).unwrap_or_else(|| "-".into()),
                r.overlap
            ));
        }
        for r in &self.results {
            if !r.trajectory.is_empty() {
                let t: Vec<String> = r.trajectory.iter().map(|(e, a)| format!("{}:{a:.4}", e + 1)).collect();
                s.push_str(&format!("\ntrajectory {}: {}", r.variant.name(), t.join(" ")));
            }
        }
        if let (Some(sgc), Some(full)) = (self.get(Variant::Sgc), self.get(Variant::Full)) {
            s.push_str(&format!(
                "\n\nfull - SGC image AUROC: {:+.4}\nSGC overlap - full overlap: {:+.4}\n",
                full.image_auroc - sgc.image_auroc,
                sgc.overlap - full.overlap
            ));
        } else {
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates each variant. With `parallel` every variant runs on
/// its own thread; results do not depend on the mode.
pub fn compare_variants<T: Scalar>(
    train: &FeatureDataset,
    test: &FeatureDataset,
    config: &Config,
    variants: &[Variant],
    parallel: bool,
) -> Result<CompareReport> {
    let run = |v: Variant| run_variant::<T>(train, test, config, v).map(|(r, _)| r);
    let results = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = variants.iter().map(|&v| s.spawn(move || run(v))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("variant thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        variants.iter().map(|&v| run(v)).collect::<Result<Vec<_>>>()?
    };
    Ok(CompareReport {
        config_hash: config.hash(),
        seed: config.train.seed,
        results,
    })
}

/// Single-center flow against the full hierarchical prior on the same data.
pub fn homogeneous_mapping_experiment<T: Scalar>(
    train: &FeatureDataset,
    test: &FeatureDataset,
    config: &Config,
    parallel: bool,
) -> Result<CompareReport> {
    compare_variants::<T>(train, test, config, &[Variant::Sgc, Variant::Full], parallel)
}

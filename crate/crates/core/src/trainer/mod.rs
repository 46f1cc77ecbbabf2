//! Per-level training with the two-stage schedule.
//!
//! Each pyramid level owns a flow, a prior, an optimizer state and its own
//! RNG streams, all derived from the run seed and the level index. Levels
//! therefore never share mutable state, and running them on separate threads
//! gives the same bits as running them in sequence.

mod adam;
mod config;
mod schedule;

pub use adam::{adam_step, AdamState};
pub use config::{Config, TrainConfig, Variant};
pub use schedule::schedule_lr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, PositionalEmbedding};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::prior::{HierarchicalPrior, SampleStats, Stage};

/// Seed for an independent stream, mixed from the run seed, a level index and
/// a stream tag with the splitmix64 finalizer.
pub fn derive_seed(seed: u64, level: usize, stream: u64) -> u64 {
    let mut x = seed
        ^ (level as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_FLOW: u64 = 1;
const STREAM_PRIOR: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

/// Flow and prior for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelModel<T> {
    pub height: usize,
    pub width: usize,
    pub flow: FlowModel<T>,
    pub prior: HierarchicalPrior<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub config: Config,
    /// Class count of the data (the prior has one class in single-center mode).
    pub classes: usize,
    pub levels: Vec<LevelModel<T>>,
}

impl<T: Scalar> TrainedModel<T> {
    /// Freshly initialized models shaped after `data`.
    pub fn init(data: &FeatureDataset, config: &Config) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let tc = &config.train;
        let prior_classes = if tc.single_class { 1 } else { data.classes };
        let levels = data
            .levels
            .iter()
            .enumerate()
            .map(|(k, lvl)| {
                let flow = FlowModel::new(k, lvl.dim, &config.flow, derive_seed(tc.seed, k, STREAM_FLOW))?;
                let mut prior = HierarchicalPrior::init(
                    prior_classes,
                    tc.intra_centers,
                    flow.dim,
                    derive_seed(tc.seed, k, STREAM_PRIOR),
                )?;
                prior.entropy_uses_weights = tc.entropy_uses_weights;
                Ok(LevelModel {
                    height: lvl.height,
                    width: lvl.width,
                    flow,
                    prior,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            classes: data.classes,
            levels,
        })
    }

    /// Labels as seen by the prior.
    pub fn effective_labels(&self, labels: &[usize]) -> Vec<usize> {
        if self.config.train.single_class {
            vec![0; labels.len()]
        } else {
            labels.to_vec()
        }
    }

    pub fn positional(&self, level: usize) -> Result<PositionalEmbedding<T>> {
        let lm = &self.levels[level];
        PositionalEmbedding::new(lm.height, lm.width, lm.flow.pos_dim, self.config.flow.pos_mode)
    }

    fn check_compatible(&self, data: &FeatureDataset) -> Result<()> {
        if data.levels.len() != self.levels.len() {
            return Err(Error::Invalid(format!(
                "data has {} levels, model has {}",
                data.levels.len(),
                self.levels.len()
            )));
        }
        for (k, (d, m)) in data.levels.iter().zip(&self.levels).enumerate() {
            if (d.height, d.width, d.dim) != (m.height, m.width, m.flow.input_dim) {
                return Err(Error::Invalid(format!(
                    "level {k}: data is {}x{}x{}, model expects {}x{}x{}",
                    d.height, d.width, d.dim, m.height, m.width, m.flow.input_dim
                )));
            }
        }
        if data.classes != self.classes {
            return Err(Error::Invalid(format!(
                "data has {} classes, model was trained with {}",
                data.classes, self.classes
            )));
        }
        Ok(())
    }

    /// Per-location statistics at `level` for every location of every
    /// sample, in sample-major order. With `infer_class` the label of each
    /// sample is replaced by the nearest main center of its first location.
    pub fn level_stats(&self, data: &FeatureDataset, level: usize, infer_class: bool) -> Result<Vec<SampleStats>> {
        self.check_compatible(data)?;
        data.validate()?;
        const CHUNK: usize = 256;
        let lm = &self.levels[level];
        let pos = self.positional(level)?;
        let samples: Vec<usize> = (0..data.len()).collect();
        let mut out = Vec::with_capacity(data.len() * lm.height * lm.width);
        for chunk in samples.chunks(CHUNK) {
            let (x, locs, labels) = data.gather::<T>(level, chunk);
            let p = (!pos.is_zero()).then(|| pos.gather(&locs));
            let (z, logdet) = lm.flow.forward_tensor(&x, p.as_ref())?;
            let labels = if infer_class {
                let per = lm.height * lm.width;
                let mut inferred = Vec::with_capacity(labels.len());
                for s in 0..chunk.len() {
                    let y = lm.prior.infer_label(z.row(s * per));
                    inferred.extend(std::iter::repeat_n(y, per));
                }
                inferred
            } else {
                self.effective_labels(&labels)
            };
            out.extend(lm.prior.sample_stats(&z, &logdet, &labels)?);
        }
        Ok(out)
    }
}

/// Losses of one level averaged over the batches of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub level: usize,
    pub l_g: f64,
    pub l_mi: f64,
    pub l_e: f64,
    pub l_in: f64,
    pub total: f64,
    pub lr: f64,
    pub clipped_steps: usize,
    pub auroc: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,level,l_g,l_mi,l_e,l_in,total,lr,auroc";

    pub fn csv_row(&self) -> String {
        let auroc = self.auroc.map(|a| format!("{a:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:e},{}",
            self.epoch, self.level, self.l_g, self.l_mi, self.l_e, self.l_in, self.total, self.lr, auroc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub model: TrainedModel<T>,
    pub metrics: Vec<EpochMetrics>,
}

impl<T> TrainOutput<T> {
    /// Mean over levels of the per-epoch total loss.
    pub fn mean_total_per_epoch(&self) -> Vec<f64> {
        let epochs = self.metrics.iter().map(|m| m.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<f64> = self.metrics.iter().filter(|m| m.epoch == e).map(|m| m.total).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

/// Evaluation hook, called with the epoch index and the current model.
pub type Evaluator<'a, T> = dyn FnMut(usize, &TrainedModel<T>) -> Result<f64> + 'a;

struct LevelState<T> {
    adam: AdamState<T>,
    rng: ChaCha8Rng,
}

pub fn train<T: Scalar>(data: &FeatureDataset, config: &Config) -> Result<TrainOutput<T>> {
    train_with_eval(data, config, None)
}

/// Trains every level for `config.train.epochs` epochs. When `eval` is
/// given it runs after every `eval_every`-th epoch and its value is recorded
/// in that epoch's metric rows.
pub fn train_with_eval<T: Scalar>(
    data: &FeatureDataset,
    config: &Config,
    mut eval: Option<&mut Evaluator<'_, T>>,
) -> Result<TrainOutput<T>> {
    data.validate_for_training()?;
    let mut model = TrainedModel::<T>::init(data, config)?;
    let tc = &config.train;
    let mut states: Vec<LevelState<T>> = model
        .levels
        .iter()
        .enumerate()
        .map(|(k, lm)| LevelState {
            adam: AdamState::for_params(&trainable(lm, tc.freeze_centers)),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, k, STREAM_SHUFFLE)),
        })
        .collect();
    let positional: Vec<PositionalEmbedding<T>> =
        (0..model.levels.len()).map(|k| model.positional(k)).collect::<Result<_>>()?;

    let mut metrics = Vec::with_capacity(tc.epochs * model.levels.len());
    for epoch in 0..tc.epochs {
        let lr = schedule_lr(epoch, tc);
        let stage = if epoch < tc.warmup_epochs { Stage::Warmup } else { Stage::Full };
        let run = |(k, (lm, st)): (usize, (&mut LevelModel<T>, &mut LevelState<T>))| {
            train_level_epoch(lm, st, data, k, &positional[k], tc, epoch, stage, lr)
        };
        let rows: Vec<EpochMetrics> = if tc.parallel_levels && model.levels.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = model
                    .levels
                    .iter_mut()
                    .zip(states.iter_mut())
                    .enumerate()
                    .map(|item| s.spawn(move || run(item)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("level thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            model
                .levels
                .iter_mut()
                .zip(states.iter_mut())
                .enumerate()
                .map(run)
                .collect::<Result<Vec<_>>>()?
        };
        let mut rows = rows;
        if let Some(f) = eval.as_deref_mut() {
            if tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0 {
                let auroc = f(epoch, &model)?;
                rows.iter_mut().for_each(|r| r.auroc = Some(auroc));
            }
        }
        for r in &rows {
            log::info!(
                "epoch {:>3} level {} total {:.4} (g {:.4} mi {:.4} e {:.4} in {:.4}) lr {:.1e}",
                r.epoch,
                r.level,
                r.total,
                r.l_g,
                r.l_mi,
                r.l_e,
                r.l_in,
                r.lr
            );
        }
        metrics.extend(rows);
    }
    Ok(TrainOutput { model, metrics })
}

/// Parameters updated by the optimizer, in a fixed order: flow subnet
/// tensors, then `mu`, `psi` (unless frozen), `delta`, `psi_intra`.
fn trainable<T: Scalar>(lm: &LevelModel<T>, freeze_centers: bool) -> Vec<&Tensor<T>> {
    let mut p = lm.flow.params();
    if !freeze_centers {
        p.push(&lm.prior.mu);
        p.push(&lm.prior.psi);
    }
    p.push(&lm.prior.delta);
    p.push(&lm.prior.psi_intra);
    p
}

#[allow(clippy::too_many_arguments)]
fn train_level_epoch<T: Scalar>(
    lm: &mut LevelModel<T>,
    st: &mut LevelState<T>,
    data: &FeatureDataset,
    level: usize,
    pos: &PositionalEmbedding<T>,
    tc: &TrainConfig,
    epoch: usize,
    stage: Stage,
    lr: f64,
) -> Result<EpochMetrics> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut st.rng);
    let mut sums = [0.0f64; 5];
    let mut batches = 0usize;
    let mut clipped_steps = 0usize;
    for (batch, samples) in order.chunks(tc.batch_size).enumerate() {
        let diverged = |e: Error| {
            if e.is_numerical() {
                Error::Diverged {
                    epoch,
                    level,
                    batch,
                    detail: e.to_string(),
                }
            } else {
                e
            }
        };
        let (losses, clipped) = train_step(lm, st, data, level, pos, samples, tc, stage, lr).map_err(diverged)?;
        for (s, v) in sums.iter_mut().zip(losses) {
            *s += v;
        }
        batches += 1;
        clipped_steps += clipped as usize;
    }
    if clipped_steps > 0 {
        log::debug!("epoch {epoch} level {level}: gradient clipped in {clipped_steps} steps");
    }
    let n = batches as f64;
    Ok(EpochMetrics {
        epoch,
        level,
        l_g: sums[0] / n,
        l_mi: sums[1] / n,
        l_e: sums[2] / n,
        l_in: sums[3] / n,
        total: sums[4] / n,
        lr,
        clipped_steps,
        auroc: None,
    })
}

/// One optimizer step; returns `[l_g, l_mi, l_e, l_in, total]` and whether
/// the gradient was clipped.
#[allow(clippy::too_many_arguments)]
fn train_step<T: Scalar>(
    lm: &mut LevelModel<T>,
    st: &mut LevelState<T>,
    data: &FeatureDataset,
    level: usize,
    pos: &PositionalEmbedding<T>,
    samples: &[usize],
    tc: &TrainConfig,
    stage: Stage,
    lr: f64,
) -> Result<([f64; 5], bool)> {
    let (x, locs, labels) = data.gather::<T>(level, samples);
    let labels = if tc.single_class { vec![0; labels.len()] } else { labels };

    let mut g = Graph::new();
    let bf = lm.flow.bind(&mut g);
    let bp = lm.prior.bind(&mut g);
    let xin = g.constant(lm.flow.prepare_input(&x)?);
    let pv = (!pos.is_zero()).then(|| g.constant(pos.gather(&locs)));
    let (z, logdet) = lm.flow.forward(&mut g, &bf, xin, pv)?;
    let batch = lm.prior.prepare(&mut g, &bp, z, logdet, &labels)?;
    let loss = lm.prior.total_loss(&mut g, &bp, &batch, tc.lambda1, tc.lambda2, stage)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    let grads = g.backward(loss.total_var)?;

    let mut vars = bf.params();
    if !tc.freeze_centers {
        vars.extend([bp.mu, bp.psi]);
    }
    vars.extend([bp.delta, bp.psi_intra]);
    let mut grads: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();

    let mut clipped = false;
    if let Some(max_norm) = tc.clip_norm {
        let norm = grads
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        if norm > max_norm {
            let f = T::of(max_norm / norm);
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = *v * f));
            clipped = true;
        }
    }

    let flow_count = lm.flow.params().len();
    let mut params: Vec<&mut Tensor<T>> = lm.flow.params_mut();
    let prior = &mut lm.prior;
    if !tc.freeze_centers {
        params.push(&mut prior.mu);
        params.push(&mut prior.psi);
    }
    params.push(&mut prior.delta);
    params.push(&mut prior.psi_intra);
    let decay: Vec<bool> = (0..params.len()).map(|i| i < flow_count).collect();
    adam_step(&mut params, &grads, &mut st.adam, lr, tc.weight_decay, &decay)?;
    lm.prior.enforce_pinned_offset();

    Ok(([loss.l_g, loss.l_mi, loss.l_e, loss.l_in, loss.total], clipped))
}

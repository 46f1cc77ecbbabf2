use super::TrainConfig;

/// Step-decayed learning rate: the base rate times `factor` for every drop
/// epoch at or before `epoch`.
pub fn schedule_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr * cfg.lr_drop_factor.powi(drops as i32)
}

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::{Gradients, Result, SaeError, SaeModel};
use crate::store::ActivationStore;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_tokens: 4096,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SaeError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(SaeError::InvalidConfig("batch_tokens must be >= 1".into()));
        }
        // lr = 0 is accepted: it is useful as a no-op check.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SaeError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    /// Mean per-token loss of each step's batch, measured before the update.
    pub loss_curve: Vec<f64>,
}

/// Seeded batch sampler over token rows. The permutation is redrawn every
/// time it is exhausted; a batch may straddle two epochs.
struct BatchSampler {
    order: Vec<u32>,
    cursor: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(num_rows: usize, shuffle: bool, seed: u64) -> Self {
        let mut sampler = Self {
            order: (0..num_rows as u32).collect(),
            cursor: 0,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        if self.shuffle {
            self.order.shuffle(&mut self.rng);
        }
        self.cursor = 0;
    }

    fn fill(&mut self, rows: &[f32], d_x: usize, batch: usize, out: &mut Vec<f32>) {
        out.clear();
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            let r = self.order[self.cursor] as usize;
            self.cursor += 1;
            out.extend_from_slice(&rows[r * d_x..(r + 1) * d_x]);
        }
    }
}

/// Train on every token row of `store`, pooled across clips.
///
/// All rows are loaded into memory first.
pub fn train(model: SaeModel, store: &ActivationStore, config: &TrainConfig) -> Result<TrainOutcome> {
    if store.d_x() != model.d_x() {
        return Err(SaeError::DimensionMismatch {
            expected: model.d_x(),
            actual: store.d_x(),
        });
    }
    let mut rows = Vec::with_capacity(store.manifest().total_tokens() as usize * model.d_x());
    for id in store.clip_ids() {
        rows.extend_from_slice(&store.load_activation(id)?.values);
    }
    train_rows(model, &rows, config)
}

/// Train on a flat `N x d_x` row-major block of token rows.
pub fn train_rows(mut model: SaeModel, rows: &[f32], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let d_x = model.d_x();
    if rows.len() % d_x != 0 {
        return Err(SaeError::DimensionMismatch {
            expected: d_x,
            actual: rows.len() % d_x,
        });
    }
    let num_rows = rows.len() / d_x;
    if num_rows == 0 {
        return Err(SaeError::EmptyStore);
    }

    let mut sampler = BatchSampler::new(num_rows, config.shuffle, config.seed);
    let n_enc = model.w_enc.len();
    let n_b = model.b_enc.len();
    let mut adam = Adam::new(config.adam(), model.parameter_count());
    let mut grads = Gradients::zeros(&model);
    let mut batch = Vec::with_capacity(config.batch_tokens * d_x);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch_tokens as f64;

    for step in 0..config.steps {
        sampler.fill(rows, d_x, config.batch_tokens, &mut batch);
        grads.clear();
        let loss = model.forward_backward(&batch, Some(&mut grads));
        grads.scale(scale);
        let mean = loss * scale;
        loss_curve.push(mean);
        if step % 1000 == 0 {
            debug!("step {step}: mean token loss {mean:.6}");
        }

        adam.begin_step();
        adam.update_slice(0, &mut model.w_enc, &grads.w_enc);
        adam.update_slice(n_enc, &mut model.b_enc, &grads.b_enc);
        adam.update_slice(n_enc + n_b, &mut model.dec_atoms, &grads.dec_atoms);
    }
    if !model.is_finite() {
        return Err(SaeError::NonFiniteParameter);
    }
    Ok(TrainOutcome { model, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rows(seed: u64, n: usize, d: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let model = SaeModel::init(4, 2, 2, 1).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            batch_tokens: 8,
            learning_rate: 0.0,
            ..Default::default()
        };
        let out = train_rows(model.clone(), &rows(0, 10, 4), &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.loss_curve.len(), 1);
    }

    #[test]
    fn deterministic_for_seed() {
        let data = rows(3, 50, 4);
        let cfg = TrainConfig {
            steps: 20,
            batch_tokens: 16,
            learning_rate: 1e-2,
            seed: 9,
            ..Default::default()
        };
        let a = train_rows(SaeModel::init(4, 2, 2, 1).unwrap(), &data, &cfg).unwrap();
        let b = train_rows(SaeModel::init(4, 2, 2, 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_curve, b.loss_curve);
        let c = train_rows(
            SaeModel::init(4, 2, 2, 1).unwrap(),
            &data,
            &TrainConfig { seed: 10, ..cfg },
        )
        .unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn sampler_covers_each_row_once_per_epoch() {
        let data: Vec<f32> = (0..10).map(|v| v as f32).collect();
        let mut s = BatchSampler::new(10, true, 4);
        let mut out = Vec::new();
        s.fill(&data, 1, 10, &mut out);
        let mut seen = out.clone();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, data);
        // batch larger than the dataset wraps into the next epoch
        s.fill(&data, 1, 25, &mut out);
        assert_eq!(out.len(), 25);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = SaeModel::init(4, 2, 2, 1).unwrap();
        assert!(matches!(
            train_rows(m.clone(), &[], &TrainConfig { steps: 1, ..Default::default() }),
            Err(SaeError::EmptyStore)
        ));
        assert!(matches!(
            train_rows(m.clone(), &rows(0, 2, 4), &TrainConfig { steps: 0, ..Default::default() }),
            Err(SaeError::InvalidConfig(_))
        ));
        assert!(matches!(
            train_rows(m, &rows(0, 2, 3)[..5], &TrainConfig::default()),
            Err(SaeError::DimensionMismatch { .. })
        ));
    }
}

//! Episodic Dice-loss training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episode, Dataset};
use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::model::{EpisodeInput, Model};
use crate::nn::Ctx;
use crate::tensor::{AdamConfig, Scalar, Tape, Tensor, Var};
use crate::util;

/// Smoothing term of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Episodes per optimizer step.
    pub batch: usize,
    pub steps: u64,
    /// Seeds parameter initialization and episode sampling.
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 4, steps: 2000, seed: 1, log_every: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)` on plain probabilities.
pub fn dice_value(probs: &[f64], gt: &[bool]) -> f64 {
    let inter: f64 = probs.iter().zip(gt).filter(|(_, &g)| g).map(|(p, _)| p).sum();
    let ps: f64 = probs.iter().sum();
    let gs = gt.iter().filter(|&&g| g).count() as f64;
    1.0 - (2.0 * inter + DICE_SMOOTH) / (ps + gs + DICE_SMOOTH)
}

/// Soft Dice loss of `1×h×w` logits against `gt`; logits are bilinearly
/// resized to the mask resolution first when they differ.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: &Mask) -> Result<Var> {
    let (h, w) = gt.dims();
    let logits = match *tape.value(logits).shape() {
        [1, lh, lw] if (lh, lw) == (h, w) => logits,
        [1, _, _] => tape.bilinear_resize(logits, h, w)?,
        ref s => return dim_err(format!("logits must be 1×h×w, got {s:?}")),
    };
    let p = tape.sigmoid(logits)?;
    let g = tape.constant(gt.to_tensor::<T>().reshape(&[1, h, w])?)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let ps = tape.sum(p)?;
    let den = tape.add_scalar(ps, gt.count() as f64 + DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean Dice over the batch, one Adam step. Per-episode gradients are summed
/// in batch order.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[(EpisodeInput<T>, &Mask)],
    adam: &AdamConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut buf = model.params.zero_buffer();
    let mut total = 0.0;
    for (inp, gt) in batch {
        let mut ctx = Ctx::new(&model.params);
        let out = model.forward(&mut ctx, inp)?;
        let loss = dice_loss(&mut ctx.tape, out.logits, gt)?;
        let loss = ctx.tape.scale(loss, 1.0 / n)?;
        total += ctx.value(loss).data()[0].f64();
        let grads = ctx.tape.backward(loss)?;
        buf.accumulate(&ctx.tape, &grads);
    }
    if !total.is_finite() || !buf.is_finite() {
        return Err(Error::NonFinite(format!("loss {total} or its gradient is not finite")));
    }
    model.params.set_grads(&buf);
    model.params.adam_step(adam)?;
    Ok(total)
}

/// Step-loss record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
}

/// Training state: model, optimizer settings and the number of completed steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    pub shots: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: &TrainConfig, shots: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { model, cfg: cfg.clone(), shots, step: 0 })
    }

    /// RNG for the episodes of one step; depends only on the seed and step
    /// index so that resumed runs draw the same episodes.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(util::mix_seed(self.cfg.seed, 0x5_7E90_0000 + step))
    }

    pub fn step_once(&mut self, ds: &Dataset) -> Result<f64> {
        let mut rng = self.step_rng(self.step);
        let mut eps = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            eps.push(sample_episode(ds, self.shots, &mut rng)?);
        }
        let batch: Vec<(EpisodeInput<f32>, &Mask)> =
            eps.iter().map(|e| (EpisodeInput::from_episode(e), e.query.mask())).collect();
        let loss = train_step(&mut self.model, &batch, &AdamConfig::with_lr(self.cfg.lr)).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step)),
            e => e,
        })?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs until `cfg.steps` steps are complete, reporting each loss.
    pub fn run(&mut self, ds: &Dataset, mut on_step: impl FnMut(StepLog)) -> Result<()> {
        while self.step < self.cfg.steps {
            let loss = self.step_once(ds)?;
            on_step(StepLog { step: self.step, loss });
        }
        Ok(())
    }
}

/// Human-readable parameter statistics for a non-finite abort.
pub fn diagnostic_dump<T: Scalar>(model: &Model<T>, step: u64, reason: &str) -> String {
    let mut s = format!("non-finite abort at step {step}\nreason: {reason}\n\nname\tshape\tmin\tmax\tfinite\n");
    for (_, p) in model.params.iter() {
        let d = p.value.to_f64_vec();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s += &format!("{}\t{:?}\t{lo:.6e}\t{hi:.6e}\t{}\n", p.name, p.value.shape(), p.value.is_finite());
    }
    s
}

/// Converts soft probabilities to the `Tensor` layout `dice_loss` consumes;
/// used in tests.
pub fn probs_from_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    logits.data().iter().map(|v| 1.0 / (1.0 + (-v.f64()).exp())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_closed_forms() {
        let gt: Vec<bool> = (0..200).map(|i| i < 100).collect();
        let probs: Vec<f64> = (0..200).map(|i| if (50..150).contains(&i) { 1.0 } else { 0.0 }).collect();
        let d = dice_value(&probs, &gt);
        assert!((d - (1.0 - 101.0 / 201.0)).abs() < 1e-15);
        let exact: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
        assert_eq!(dice_value(&exact, &gt), 0.0);
    }

    #[test]
    fn tape_dice_matches_plain() {
        let gt = Mask::from_fn(4, 4, |y, x| y < 2 && x < 3);
        let logits = Tensor::<f64>::new(&[1, 4, 4], (0..16).map(|i| (i as f64 - 7.0) * 0.3).collect()).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone()).unwrap();
        let loss = dice_loss(&mut tape, l, &gt).unwrap();
        let expect = dice_value(&probs_from_logits(&logits), gt.data());
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-14);
    }
}

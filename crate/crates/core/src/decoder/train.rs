//! Training loop: item assembly (including prompt-style concatenations),
//! batching, optimizer steps and checkpoint snapshots.

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DecoderConfig, OptimConfig};
use super::flow::{sample_mask, training_step, BatchItem, TrainingBatch};
use super::model::DitModel;
use super::optim::AdamW;
use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::units::{UnitSequence, UnitVocabulary};

/// One utterance of the training set: its log-mel and deduplicated units.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: String,
    pub mel: MelSpectrogram,
    pub units: UnitSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    /// Probability that an example is a (prompt, continuation) pair of two
    /// utterances with only the continuation masked, the layout used at
    /// conversion time.
    pub concat_prob: f64,
    pub log_every: u64,
    /// 0 disables periodic snapshots.
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concat_prob: 0.5,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.concat_prob) {
            return Err(Error::Config("trainer: concat_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Concatenate two mels frame-wise.
pub fn concat_mels(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<MelSpectrogram> {
    if a.n_mels != b.n_mels || a.hop_length != b.hop_length || a.sample_rate != b.sample_rate {
        return Err(Error::contract("cannot join mels with different analysis settings"));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    MelSpectrogram::new(data, a.n_mels, a.hop_length, a.sample_rate)
}

/// Token stream for a prompt utterance followed by the utterance to generate:
/// both unit sequences back to back, FILLER-padded to the combined length.
pub fn prompt_tokens(
    vocab: &UnitVocabulary,
    prompt: &UnitSequence,
    body: &UnitSequence,
    total_frames: usize,
) -> Result<Vec<u32>> {
    vocab.to_tokens(&prompt.concat(body), total_frames)
}

/// A single utterance with a random infilling span.
pub fn infill_item(vocab: &UnitVocabulary, item: &TrainItem, frac_range: [f64; 2], rng: &mut ChaCha8Rng) -> Result<BatchItem> {
    let len = item.mel.n_frames;
    Ok(BatchItem {
        mel: item.mel.clone(),
        tokens: vocab.to_tokens(&item.units, len)?,
        mask: sample_mask(len, frac_range, rng),
    })
}

/// `prompt` then `body`, with exactly the body frames masked.
pub fn prompt_item(vocab: &UnitVocabulary, prompt: &TrainItem, body: &TrainItem) -> Result<BatchItem> {
    let mel = concat_mels(&prompt.mel, &body.mel)?;
    let total = mel.n_frames;
    let mut mask = vec![false; prompt.mel.n_frames];
    mask.resize(total, true);
    Ok(BatchItem {
        tokens: prompt_tokens(vocab, &prompt.units, &body.units, total)?,
        mel,
        mask,
    })
}

pub struct Trainer {
    model: DitModel,
    optim: AdamW,
    cfg: TrainerConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(model: DitModel, optim_cfg: OptimConfig, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let optim = AdamW::new(model.params(), optim_cfg)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            optim,
            cfg,
            order: Vec::new(),
            cursor: 0,
            history: Vec::new(),
        })
    }

    /// Continue from a snapshot. The data stream is reseeded from the
    /// configured seed and the step count, so a resumed run is reproducible
    /// but does not replay the exact batches of an uninterrupted one.
    pub fn resume(ck: &Checkpoint, cfg: TrainerConfig) -> Result<Self> {
        let model = ck.to_model(DType::F32)?;
        let mut t = Self::new(model, ck.optim.clone(), cfg)?;
        if let Some(state) = &ck.optimizer {
            t.optim.restore(state.clone(), ck.step)?;
        }
        t.rng = ChaCha8Rng::seed_from_u64(t.cfg.seed ^ ck.step.rotate_left(32));
        Ok(t)
    }

    pub fn model(&self) -> &DitModel {
        &self.model
    }

    pub fn into_model(self) -> DitModel {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step_count()
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn checkpoint(&self, with_optimizer: bool) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.model,
            self.optim.config(),
            with_optimizer.then_some(&self.optim),
            self.step_count(),
        )
    }

    fn next_index(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Draw the next batch of examples from `items`.
    pub fn next_batch(&mut self, items: &[TrainItem]) -> Result<Vec<BatchItem>> {
        if items.is_empty() {
            return Err(Error::Domain("no training items".into()));
        }
        let vocab = self.model.config().vocabulary();
        let range = self.model.config().mask_frac_range;
        (0..self.optim.config().batch_size)
            .map(|_| {
                let i = self.next_index(items.len());
                if self.rng.random::<f64>() < self.cfg.concat_prob {
                    let j = self.rng.random_range(0..items.len());
                    prompt_item(&vocab, &items[j], &items[i])
                } else {
                    infill_item(&vocab, &items[i], range, &mut self.rng)
                }
            })
            .collect()
    }

    /// One optimizer update on a freshly drawn batch.
    pub fn step(&mut self, items: &[TrainItem]) -> Result<LossRecord> {
        let batch = self.next_batch(items)?;
        self.step_on(&batch)
    }

    /// One optimizer update on the given examples.
    pub fn step_on(&mut self, items: &[BatchItem]) -> Result<LossRecord> {
        let cfg: &DecoderConfig = self.model.config();
        let mut batch = TrainingBatch::new(items, cfg.vocabulary().pad(), self.model.dtype())?;
        batch.mel = cfg.normalize(&batch.mel)?;
        let out = training_step(&self.model, cfg, &batch, &mut self.rng)?;
        let stats = self.optim.step(&out.grads)?;
        let rec = LossRecord {
            step: self.optim.step_count(),
            loss: out.loss,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Run `steps` updates. `on_log` sees every `log_every`-th record and
    /// `on_checkpoint` every `checkpoint_every`-th snapshot.
    pub fn fit(
        &mut self,
        items: &[TrainItem],
        steps: u64,
        mut on_log: impl FnMut(&LossRecord),
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let rec = self.step(items)?;
            if self.cfg.log_every > 0 && rec.step % self.cfg.log_every == 0 {
                on_log(&rec);
            }
            if self.cfg.checkpoint_every > 0 && rec.step % self.cfg.checkpoint_every == 0 {
                on_checkpoint(&self.checkpoint(true)?)?;
            }
        }
        Ok(())
    }
}

/// Trailing moving average of the loss, one value per record.
pub fn moving_average(history: &[LossRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, r) in history.iter().enumerate() {
        sum += r.loss;
        if i >= window {
            sum -= history[i - window].loss;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::dedup;

    fn item(id: &str, frames: usize, level: f32, units: &[u32]) -> TrainItem {
        let data = (0..frames * 80).map(|i| level + (i % 80) as f32 * 0.01).collect();
        TrainItem {
            id: id.into(),
            mel: MelSpectrogram::new(data, 80, 160, 16000).unwrap(),
            units: dedup(&UnitSequence::new(units.to_vec())),
        }
    }

    #[test]
    fn prompt_item_layout() {
        let vocab = UnitVocabulary::new(8);
        let a = item("a", 5, -1.0, &[1, 2]);
        let b = item("b", 4, 2.0, &[2, 3, 4]);
        let it = prompt_item(&vocab, &a, &b).unwrap();
        assert_eq!(it.mel.n_frames, 9);
        assert_eq!(it.mask, [false, false, false, false, false, true, true, true, true]);
        assert_eq!(it.tokens, [1, 2, 2, 3, 4, 8, 8, 8, 8]);
        assert_eq!(it.mel.frame(5), b.mel.frame(0));
    }

    #[test]
    fn concat_rejects_mismatched_settings() {
        let a = item("a", 2, 0.0, &[1]).mel;
        let b = MelSpectrogram::new(vec![0.0; 40], 40, 160, 16000).unwrap();
        assert!(concat_mels(&a, &b).is_err());
    }

    #[test]
    fn moving_average_and_median() {
        let h: Vec<LossRecord> = [4.0, 2.0, 6.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossRecord {
                step: i as u64,
                loss,
                lr: 0.0,
                grad_norm: 0.0,
            })
            .collect();
        assert_eq!(moving_average(&h, 2), [4.0, 3.0, 4.0, 3.0]);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn batches_are_seeded() {
        let items = vec![item("a", 6, 0.0, &[1, 2]), item("b", 7, 1.0, &[3])];
        let make = || {
            let model = DitModel::new(DecoderConfig::tiny(8), DType::F32, 0).unwrap();
            let cfg = TrainerConfig {
                seed: 9,
                ..TrainerConfig::default()
            };
            let mut t = Trainer::new(model, OptimConfig::desk(), cfg).unwrap();
            (0..3)
                .map(|_| t.next_batch(&items).unwrap().into_iter().map(|b| (b.tokens, b.mask)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(make(), make());
    }
}

//! Conditional flow matching on the linear (optimal-transport) path, trained
//! as mel infilling: a contiguous span of frames is masked and regenerated
//! from the remaining frames plus the unit tokens.

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::DecoderConfig;
use super::model::VelocityField;
use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};

/// One sample on the interpolation path between noise and data.
#[derive(Debug, Clone)]
pub struct FlowPoint {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Tensor,
    pub xt: Tensor,
    pub v_target: Tensor,
}

/// `xt = (1 - t) x0 + t x1` and `v = x1 - x0`.
///
/// `t` is a scalar tensor or one value per leading (batch) index.
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: &Tensor) -> Result<FlowPoint> {
    if x0.dims() != x1.dims() {
        return Err(Error::contract(format!(
            "noise {:?} and data {:?} shapes differ",
            x0.dims(),
            x1.dims()
        )));
    }
    let t_vals = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if t_vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("flow time outside [0, 1]"));
    }
    let tb = match t.rank() {
        0 => t.clone(),
        1 if x0.rank() >= 1 && t.dim(0)? == x0.dim(0)? => {
            let mut shape = vec![t.dim(0)?];
            shape.resize(x0.rank(), 1);
            t.reshape(shape)?
        }
        _ => {
            return Err(Error::contract(format!(
                "flow time shape {:?} does not match data {:?}",
                t.dims(),
                x0.dims()
            )))
        }
    };
    let tb = tb.to_dtype(x0.dtype())?;
    let one_minus = tb.affine(-1.0, 1.0)?;
    let xt = (x0.broadcast_mul(&one_minus)? + x1.broadcast_mul(&tb)?)?;
    let v_target = (x1 - x0)?;
    Ok(FlowPoint {
        x0: x0.clone(),
        x1: x1.clone(),
        t: t.clone(),
        xt,
        v_target,
    })
}

/// One contiguous masked span of `round(f * len)` frames, `f` uniform over
/// `frac_range`, start uniform over the valid positions.
pub fn sample_mask(len: usize, frac_range: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<bool> {
    assert!(len >= 1, "mask over an empty sequence");
    let [lo, hi] = frac_range;
    let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let span = ((f * len as f64).round() as usize).clamp(1, len);
    let start = rng.random_range(0..=len - span);
    (0..len).map(|i| i >= start && i < start + span).collect()
}

/// One training example before batching.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub mel: MelSpectrogram,
    /// FILLER-padded tokens, one per mel frame.
    pub tokens: Vec<u32>,
    /// True on frames to be infilled.
    pub mask: Vec<bool>,
}

/// Items padded to a common length.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// `(B, T, mel)`
    pub mel: Tensor,
    /// `(B, T)` u32
    pub tokens: Tensor,
    /// `(B, T)`, 1 on frames to be infilled.
    pub mask: Tensor,
    /// `(B, T)`, 1 on real frames, 0 on batch padding.
    pub key_mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TrainingBatch {
    pub fn new(items: &[BatchItem], pad_token: u32, dtype: DType) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let n_mels = items[0].mel.n_mels;
        let max_len = items.iter().map(|i| i.mel.n_frames).max().unwrap();
        let b = items.len();
        let mut mel = vec![0.0f32; b * max_len * n_mels];
        let mut tokens = vec![pad_token; b * max_len];
        let mut mask = vec![0.0f32; b * max_len];
        let mut key = vec![0.0f32; b * max_len];
        for (i, item) in items.iter().enumerate() {
            let len = item.mel.n_frames;
            if item.mel.n_mels != n_mels {
                return Err(Error::contract("batch items disagree on mel channels"));
            }
            if item.tokens.len() != len || item.mask.len() != len {
                return Err(Error::contract(format!(
                    "item {i}: {} tokens and {} mask flags for {len} frames",
                    item.tokens.len(),
                    item.mask.len()
                )));
            }
            let runs = (0..len)
                .filter(|&j| item.mask[j] && (j == 0 || !item.mask[j - 1]))
                .count();
            if !item.mask.iter().any(|&m| m) {
                return Err(Error::contract(format!("item {i}: mask selects no frames")));
            }
            if runs > 1 {
                return Err(Error::contract(format!("item {i}: mask is not one contiguous span")));
            }
            let base = i * max_len;
            mel[base * n_mels..(base + len) * n_mels].copy_from_slice(&item.mel.data);
            tokens[base..base + len].copy_from_slice(&item.tokens);
            for j in 0..len {
                mask[base + j] = if item.mask[j] { 1.0 } else { 0.0 };
                key[base + j] = 1.0;
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            mel: Tensor::from_vec(mel, (b, max_len, n_mels), &dev)?.to_dtype(dtype)?,
            tokens: Tensor::from_vec(tokens, (b, max_len), &dev)?,
            mask: Tensor::from_vec(mask, (b, max_len), &dev)?.to_dtype(dtype)?,
            key_mask: Tensor::from_vec(key, (b, max_len), &dev)?.to_dtype(dtype)?,
            lengths: items.iter().map(|i| i.mel.n_frames).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Random draws for one training step.
#[derive(Debug, Clone)]
pub struct FlowInputs {
    /// Standard normal noise, same shape as the batch mel.
    pub x0: Tensor,
    /// `(B,)` flow times.
    pub t: Tensor,
    /// Items whose conditioning is dropped for classifier-free guidance.
    pub drop: Vec<bool>,
}

/// Standard normal tensor drawn from a seeded host stream.
pub fn gaussian(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn draw_flow_inputs(batch: &TrainingBatch, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Result<FlowInputs> {
    let b = batch.batch_size();
    let dtype = batch.mel.dtype();
    let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let drop = (0..b).map(|_| rng.random::<f64>() < cfg.cond_drop_prob).collect();
    let x0 = gaussian(batch.mel.dims(), dtype, rng)?;
    Ok(FlowInputs {
        x0,
        t: Tensor::from_vec(t, b, &Device::Cpu)?.to_dtype(dtype)?,
        drop,
    })
}

/// Mean squared error over the frames where `mask` is 1.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let channels = pred.dim(candle_core::D::Minus1)?;
    let denom = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * channels as f64;
    if denom == 0.0 {
        return Err(Error::contract("loss mask selects no frames"));
    }
    let sq = (pred - target)?.sqr()?.broadcast_mul(&mask.unsqueeze(2)?)?;
    Ok((sq.sum_all()? / denom)?)
}

/// Conditioning mel and tokens as the model sees them: masked frames zeroed,
/// and for dropped items no audio at all and FILLER tokens only.
pub fn conditioning(batch: &TrainingBatch, drop: &[bool], filler: u32) -> Result<(Tensor, Tensor)> {
    let keep_frames = batch.mask.affine(-1.0, 1.0)?;
    let keep_item: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let b = batch.batch_size();
    let keep_item = Tensor::from_vec(keep_item, (b, 1), &Device::Cpu)?.to_dtype(batch.mel.dtype())?;
    let keep = keep_frames.broadcast_mul(&keep_item)?;
    let cond = batch.mel.broadcast_mul(&keep.unsqueeze(2)?)?;
    let tokens = if drop.iter().any(|&d| d) {
        let mut host = batch.tokens.to_vec2::<u32>()?;
        for (row, &d) in host.iter_mut().zip(drop) {
            if d {
                row.iter_mut().for_each(|tok| *tok = filler);
            }
        }
        Tensor::new(host, &Device::Cpu)?
    } else {
        batch.tokens.clone()
    };
    Ok((cond, tokens))
}

/// Flow-matching loss for fixed random draws.
pub fn flow_loss<M: VelocityField + ?Sized>(
    model: &M,
    batch: &TrainingBatch,
    inputs: &FlowInputs,
    filler: u32,
) -> Result<Tensor> {
    let (cond, tokens) = conditioning(batch, &inputs.drop, filler)?;
    let point = ot_path(&inputs.x0, &batch.mel, &inputs.t)?;
    let pred = model.velocity(&point.xt, &cond, &tokens, &inputs.t, Some(&batch.key_mask))?;
    masked_mse(&pred, &point.v_target, &batch.mask)
}

#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: GradStore,
}

/// Draw noise, times and dropout flags, evaluate the loss and backpropagate.
pub fn training_step<M: VelocityField + ?Sized>(
    model: &M,
    cfg: &DecoderConfig,
    batch: &TrainingBatch,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let inputs = draw_flow_inputs(batch, cfg, rng)?;
    let loss = flow_loss(model, batch, &inputs, cfg.filler_token())?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Data(format!("non-finite training loss {value}")));
    }
    let grads = loss.backward()?;
    Ok(StepOutput { loss: value, grads })
}

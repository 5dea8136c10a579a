//! Euler integration of the learned flow with sway-warped time steps and
//! classifier-free guidance.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::gaussian;
use super::model::VelocityField;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_w: f64,
    pub sway_s: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            guidance_w: 2.0,
            sway_s: -1.0,
        }
    }
}

/// `steps + 1` time points `u + s (cos(pi u / 2) - 1 + u)` for uniform `u`.
///
/// Negative `s` packs the early, noise-dominated part of the trajectory
/// more densely. `s = 0` gives the uniform grid.
pub fn sway_schedule(steps: usize, sway_s: f64) -> Vec<f64> {
    (0..=steps)
        .map(|i| {
            let u = i as f64 / steps as f64;
            u + sway_s * ((std::f64::consts::FRAC_PI_2 * u).cos() - 1.0 + u)
        })
        .collect()
}

/// Inputs for one generation.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    /// `(total_frames, mel)` conditioning: the prompt mel on the first
    /// `prompt_frames` frames, zeros after.
    pub cond_mel: Tensor,
    pub prompt_frames: usize,
    /// FILLER-padded tokens, one per frame.
    pub tokens: Vec<u32>,
    pub filler: u32,
}

impl SampleRequest {
    pub fn total_frames(&self) -> usize {
        self.tokens.len()
    }
}

/// Draw the initial noise and integrate. Returns `(total_frames, mel)`.
pub fn sample<M: VelocityField + ?Sized>(
    model: &M,
    req: &SampleRequest,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let x_init = gaussian(req.cond_mel.dims(), req.cond_mel.dtype(), rng)?;
    sample_from(model, req, cfg, &x_init)
}

/// Integrate from a given initial state.
pub fn sample_from<M: VelocityField + ?Sized>(
    model: &M,
    req: &SampleRequest,
    cfg: &SamplerConfig,
    x_init: &Tensor,
) -> Result<Tensor> {
    if cfg.steps < 1 {
        return Err(Error::contract("sampler needs at least one step"));
    }
    let (frames, _) = req.cond_mel.dims2()?;
    if req.tokens.len() != frames {
        return Err(Error::contract(format!(
            "{} tokens for {frames} frames",
            req.tokens.len()
        )));
    }
    if req.prompt_frames > frames {
        return Err(Error::contract("prompt longer than the generated sequence"));
    }
    if x_init.dims() != req.cond_mel.dims() {
        return Err(Error::contract("initial state does not match the conditioning shape"));
    }
    let dtype = req.cond_mel.dtype();
    let dev = Device::Cpu;
    let cond = req.cond_mel.unsqueeze(0)?;
    let tokens = Tensor::from_vec(req.tokens.clone(), (1, frames), &dev)?;
    let guided = cfg.guidance_w > 0.0;
    let (null_cond, null_tokens) = if guided {
        (
            cond.zeros_like()?,
            Tensor::from_vec(vec![req.filler; frames], (1, frames), &dev)?,
        )
    } else {
        (cond.clone(), tokens.clone())
    };
    let prompt: Vec<f64> = (0..frames)
        .map(|i| if i < req.prompt_frames { 1.0 } else { 0.0 })
        .collect();
    let prompt = Tensor::from_vec(prompt, (1, frames, 1), &dev)?.to_dtype(dtype)?;
    let free = prompt.affine(-1.0, 1.0)?;
    let pinned = cond.broadcast_mul(&prompt)?;

    let times = sway_schedule(cfg.steps, cfg.sway_s);
    let mut x = x_init.unsqueeze(0)?;
    for w in times.windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let tt = Tensor::new(&[t], &dev)?.to_dtype(dtype)?;
        let v_cond = model.velocity(&x, &cond, &tokens, &tt, None)?;
        let v = if guided {
            let v_null = model.velocity(&x, &null_cond, &null_tokens, &tt, None)?;
            (&v_null + ((&v_cond - &v_null)? * cfg.guidance_w)?)?
        } else {
            v_cond
        };
        x = (x + (v * dt)?)?;
        // the prompt region always carries the reference mel
        x = (x.broadcast_mul(&free)? + &pinned)?;
    }
    Ok(x.squeeze(0)?)
}

/// Host-side helper: a `(frames, mel)` tensor from row-major values.
pub fn mel_tensor(data: &[f32], frames: usize, mel: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, (frames, mel), &Device::Cpu)?.to_dtype(dtype)?)
}

//! Diffusion-transformer velocity network.
//!
//! The noisy mel, the masked conditioning mel and the embedded unit tokens
//! are concatenated per frame and projected to the model width. A sinusoidal
//! embedding of the flow time drives adaptive layer norm in every block.

use candle_core::{DType, Device, Module, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderConfig, Positional};
use super::layers::{
    apply_rope, depthwise_conv, layer_norm, rope_tables, sinusoidal, softmax, Init, Linear, ParamStore,
};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
const TIME_SCALE: f64 = 1000.0;
const TEXT_CONV_KERNEL: usize = 7;

/// Anything that predicts a velocity field for the flow ODE.
pub trait VelocityField {
    /// Velocity for `xt` and `cond` of shape `(B, T, mel)`, `tokens` `(B, T)`
    /// u32 and flow times `t` `(B,)`. `key_mask` is `(B, T)` with 1 for real
    /// frames and 0 for batch padding.
    fn velocity(
        &self,
        xt: &Tensor,
        cond: &Tensor,
        tokens: &Tensor,
        t: &Tensor,
        key_mask: Option<&Tensor>,
    ) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct TextBlock {
    dw_kernel: candle_core::Var,
    dw_bias: candle_core::Var,
    up: Linear,
    down: Linear,
}

impl TextBlock {
    fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let bound = 1.0 / (TEXT_CONV_KERNEL as f64).sqrt();
        Ok(Self {
            dw_kernel: init.uniform(format!("{name}.dw.weight"), &[TEXT_CONV_KERNEL, dim], bound)?,
            dw_bias: init.uniform(format!("{name}.dw.bias"), &[dim], bound)?,
            up: Linear::new(init, &format!("{name}.up"), dim, 2 * dim)?,
            down: Linear::new(init, &format!("{name}.down"), 2 * dim, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = depthwise_conv(x, &self.dw_kernel)?.broadcast_add(&self.dw_bias)?;
        let h = layer_norm(&h, LN_EPS)?;
        let h = self.down.forward(&self.up.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct ConvPosition {
    kernels: [candle_core::Var; 2],
    biases: [candle_core::Var; 2],
}

impl ConvPosition {
    fn new(init: &mut Init, dim: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / (k as f64).sqrt();
        Ok(Self {
            kernels: [
                init.uniform("conv_pos.0.weight".into(), &[k, dim], bound)?,
                init.uniform("conv_pos.1.weight".into(), &[k, dim], bound)?,
            ],
            biases: [
                init.uniform("conv_pos.0.bias".into(), &[dim], bound)?,
                init.uniform("conv_pos.1.bias".into(), &[dim], bound)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            if let Some(m) = mask {
                h = h.broadcast_mul(m)?;
            }
            h = depthwise_conv(&h, k)?.broadcast_add(b)?.gelu()?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    attn_out: Linear,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn new(init: &mut Init, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            modulation: Linear::zeroed(init, &format!("{name}.modulation"), d, 6 * d)?,
            qkv: Linear::new(init, &format!("{name}.attn.qkv"), d, 3 * d)?,
            attn_out: Linear::new(init, &format!("{name}.attn.out"), d, d)?,
            ff_in: Linear::new(init, &format!("{name}.ff.in"), d, cfg.ff_mult * d)?,
            ff_out: Linear::new(init, &format!("{name}.ff.out"), cfg.ff_mult * d, d)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &AttnContext) -> Result<Tensor> {
        let m = self.modulation.forward(temb)?.unsqueeze(1)?.chunk(6, D::Minus1)?;
        let (shift_a, scale_a, gate_a) = (&m[0], &m[1], &m[2]);
        let (shift_f, scale_f, gate_f) = (&m[3], &m[4], &m[5]);

        let h = modulate(&layer_norm(x, LN_EPS)?, shift_a, scale_a)?;
        let x = (x + self.attention(&h, ctx)?.broadcast_mul(gate_a)?)?;
        let h = modulate(&layer_norm(&x, LN_EPS)?, shift_f, scale_f)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&h)?.gelu()?)?;
        Ok((x + ff.broadcast_mul(gate_f)?)?)
    }

    fn attention(&self, h: &Tensor, ctx: &AttnContext) -> Result<Tensor> {
        let (b, t, d) = h.dims3()?;
        let heads = ctx.heads;
        let dh = d / heads;
        let qkv = self.qkv.forward(h)?.reshape((b, t, 3, heads, dh))?;
        let split = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()
        };
        let (mut q, mut k, v) = (split(0)?, split(1)?, split(2)?);
        if let Some((cos, sin)) = &ctx.rope {
            q = apply_rope(&q, cos, sin)?;
            k = apply_rope(&k, cos, sin)?;
        }
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let scores = match &ctx.key_bias {
            Some(bias) => scores.broadcast_add(bias)?,
            None => scores,
        };
        let out = softmax(&scores)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((b, t, d))?;
        Ok(self.attn_out.forward(&out)?)
    }
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> candle_core::Result<Tensor> {
    x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)
}

struct AttnContext {
    heads: usize,
    rope: Option<(Tensor, Tensor)>,
    key_bias: Option<Tensor>,
}

/// The trainable velocity network.
#[derive(Debug, Clone)]
pub struct DitModel {
    cfg: DecoderConfig,
    dtype: DType,
    params: ParamStore,
    text_embed: candle_core::Var,
    text_blocks: Vec<TextBlock>,
    input_proj: Linear,
    conv_pos: ConvPosition,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    proj_out: Linear,
}

impl DitModel {
    /// Fresh parameters drawn deterministically from `seed`. Modulation and
    /// output projections start at zero, so the untrained model predicts a
    /// zero velocity everywhere.
    pub fn new(cfg: DecoderConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::contract("decoder runs in f32 or f64"));
        }
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            dtype,
        };
        let d = cfg.model_dim;
        let text_embed = init.normal("text.embed".into(), &[cfg.vocab_size, cfg.text_dim], 1.0)?;
        let text_blocks = (0..cfg.text_conv_layers)
            .map(|i| TextBlock::new(&mut init, &format!("text.block{i}"), cfg.text_dim))
            .collect::<Result<Vec<_>>>()?;
        let input_proj = Linear::new(&mut init, "input.proj", 2 * cfg.mel_dim + cfg.text_dim, d)?;
        let conv_pos = ConvPosition::new(&mut init, d, cfg.conv_kernel)?;
        let time_in = Linear::new(&mut init, "time.in", cfg.time_freq_dim, d)?;
        let time_out = Linear::new(&mut init, "time.out", d, d)?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut init, &format!("blocks.{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let final_modulation = Linear::zeroed(&mut init, "final.modulation", d, 2 * d)?;
        let proj_out = Linear::zeroed(&mut init, "final.proj", d, cfg.mel_dim)?;
        Ok(Self {
            cfg,
            dtype,
            params,
            text_embed,
            text_blocks,
            input_proj,
            conv_pos,
            time_in,
            time_out,
            blocks,
            final_modulation,
            proj_out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Add Gaussian noise of the given scale to every parameter, including
    /// the zero-initialized ones. Used to probe gradients away from the
    /// degenerate starting point.
    pub fn perturb_parameters(&self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, var) in self.params.entries() {
            let noise: Vec<f64> = (0..var.elem_count())
                .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * std)
                .collect();
            let noise = Tensor::from_vec(noise, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&(var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    fn check_inputs(&self, xt: &Tensor, cond: &Tensor, tokens: &Tensor, t: &Tensor) -> Result<(usize, usize)> {
        let (b, len, mel) = xt.dims3()?;
        if mel != self.cfg.mel_dim {
            return Err(Error::contract(format!("expected {} mel channels, got {mel}", self.cfg.mel_dim)));
        }
        if cond.dims() != xt.dims() {
            return Err(Error::contract(format!(
                "conditioning shape {:?} differs from noisy mel {:?}",
                cond.dims(),
                xt.dims()
            )));
        }
        if tokens.dims() != [b, len] {
            return Err(Error::contract(format!(
                "token stream {:?} does not cover {len} frames for {b} items",
                tokens.dims()
            )));
        }
        if t.dims() != [b] {
            return Err(Error::contract(format!("need one flow time per item, got {:?}", t.dims())));
        }
        Ok((b, len))
    }
}

impl VelocityField for DitModel {
    fn velocity(
        &self,
        xt: &Tensor,
        cond: &Tensor,
        tokens: &Tensor,
        t: &Tensor,
        key_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, len) = self.check_inputs(xt, cond, tokens, t)?;
        let cfg = &self.cfg;
        let frame_mask = key_mask.map(|m| m.unsqueeze(2)).transpose()?;

        let mut text = embed_tokens(&self.text_embed, tokens)?;
        for block in &self.text_blocks {
            if let Some(m) = &frame_mask {
                text = text.broadcast_mul(m)?;
            }
            text = block.forward(&text)?;
        }
        let joined = Tensor::cat(&[xt, cond, &text], D::Minus1)?;
        let mut x = self.input_proj.forward(&joined)?;

        let rope = match cfg.positional {
            Positional::Rotary => {
                x = (&x + self.conv_pos.forward(&x, frame_mask.as_ref())?)?;
                Some(rope_tables(len, cfg.head_dim(), self.dtype)?)
            }
            Positional::Sinusoidal => {
                let pos = Tensor::arange(0u32, len as u32, &Device::Cpu)?.to_dtype(self.dtype)?;
                let pe = sinusoidal(&pos, cfg.model_dim, 1.0)?;
                x = x.broadcast_add(&pe.unsqueeze(0)?)?;
                None
            }
        };

        let t = t.to_dtype(self.dtype)?;
        let temb = sinusoidal(&t, cfg.time_freq_dim, TIME_SCALE)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;
        let temb_act = temb.silu()?;

        let key_bias = key_mask
            .map(|m| -> candle_core::Result<Tensor> {
                ((m.to_dtype(self.dtype)? - 1.0)? * 1e9)?.reshape((b, 1, 1, len))
            })
            .transpose()?;
        let ctx = AttnContext {
            heads: cfg.heads,
            rope,
            key_bias,
        };
        for block in &self.blocks {
            x = block.forward(&x, &temb_act, &ctx)?;
        }
        let m = self.final_modulation.forward(&temb_act)?.unsqueeze(1)?.chunk(2, D::Minus1)?;
        let x = modulate(&layer_norm(&x, LN_EPS)?, &m[0], &m[1])?;
        Ok(self.proj_out.forward(&x)?)
    }
}

fn embed_tokens(table: &Tensor, ids: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let rows = table.index_select(&ids.flatten_all()?, 0)?;
    rows.reshape((b, t, table.dim(1)?))
}

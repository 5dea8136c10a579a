//! Building blocks of the velocity network. Every op here is differentiable
//! through candle's autograd; the depthwise convolution brings its own
//! backward kernels.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Module, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Named trainable tensors, in registration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn register(&mut self, name: String, var: Var) -> Var {
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, var.clone()));
        var
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Parameter factory: deterministic initialization from a seeded stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
}

impl Init<'_> {
    fn make(&mut self, name: String, shape: &[usize], f: impl FnMut(&mut ChaCha8Rng) -> f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let mut f = f;
        let values: Vec<f64> = (0..n).map(|_| f(self.rng)).collect();
        let t = Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(self.dtype)?;
        Ok(self.store.register(name, Var::from_tensor(&t)?))
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        self.make(name, shape, |r| r.random_range(-bound..=bound))
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Var> {
        self.make(name, shape, |r| {
            let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
            n * std
        })
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> Result<Var> {
        self.make(name, shape, |_| 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: init.uniform(format!("{name}.weight"), &[d_in, d_out], bound)?,
            bias: init.uniform(format!("{name}.bias"), &[d_out], bound)?,
        })
    }

    /// Zero weights and bias; the layer starts as a constant-zero map.
    pub fn zeroed(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.zeros(format!("{name}.weight"), &[d_in, d_out])?,
            bias: init.zeros(format!("{name}.bias"), &[d_out])?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = dims[dims.len() - 1];
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        y.reshape(out)
    }
}

/// Layer norm over the last dimension, without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

/// Softmax over the last dimension.
pub fn softmax(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Sinusoidal features of a `(B,)` tensor of scalars, `(B, dim)`.
pub fn sinusoidal(t: &Tensor, dim: usize, scale: f64) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let step = (10000f64).ln() / (half as f64 - 1.0).max(1.0);
    let freqs: Vec<f64> = (0..half).map(|i| (-(i as f64) * step).exp()).collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * scale)?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.sin()?, args.cos()?], 1)
}

/// Rotary position tables `(T, head_dim)` for half-split rotation.
pub fn rope_tables(len: usize, head_dim: usize, dtype: DType) -> candle_core::Result<(Tensor, Tensor)> {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * head_dim);
    let mut sin = Vec::with_capacity(len * head_dim);
    for pos in 0..len {
        for rep in 0..2 {
            let _ = rep;
            for i in 0..half {
                let inv = 1.0 / 10000f64.powf(2.0 * i as f64 / head_dim as f64);
                let a = pos as f64 * inv;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    let dev = candle_core::Device::Cpu;
    Ok((
        Tensor::from_vec(cos, (len, head_dim), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(sin, (len, head_dim), &dev)?.to_dtype(dtype)?,
    ))
}

/// Rotate `(B, H, T, Dh)` queries or keys.
pub fn apply_rope(x: &Tensor, cos: &Tensor, sin: &Tensor) -> candle_core::Result<Tensor> {
    let dh = x.dim(D::Minus1)?;
    let half = dh / 2;
    let x1 = x.narrow(D::Minus1, 0, half)?;
    let x2 = x.narrow(D::Minus1, half, half)?;
    let rotated = Tensor::cat(&[&x2.neg()?, &x1], D::Minus1)?;
    x.broadcast_mul(cos)? + rotated.broadcast_mul(sin)?
}

/// Depthwise 1-D convolution over time with zero "same" padding.
///
/// Input `(B, T, C)`, kernel `(K, C)` with odd `K`, output `(B, T, C)`.
pub fn depthwise_conv(x: &Tensor, kernel: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, DepthwiseConv)
}

struct DepthwiseConv;
struct DepthwiseConvGradInput;
struct DepthwiseConvGradKernel {
    k: usize,
}

trait Float: candle_core::WithDType + std::ops::AddAssign + std::ops::Mul<Output = Self> {}
impl Float for f32 {}
impl Float for f64 {}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("depthwise conv needs contiguous inputs"),
    }
}

/// y[b,t,c] = sum_k w[k,c] x[b, t+k-p, c]
fn conv_fwd<T: Float>(x: &[T], w: &[T], b: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let mut y = vec![T::zero(); b * t * c];
    for bi in 0..b {
        let xb = &x[bi * t * c..(bi + 1) * t * c];
        let yb = &mut y[bi * t * c..(bi + 1) * t * c];
        for ti in 0..t {
            let yrow = &mut yb[ti * c..(ti + 1) * c];
            for ki in 0..k {
                let src = ti as isize + ki as isize - p as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xrow = &xb[src as usize * c..(src as usize + 1) * c];
                let wrow = &w[ki * c..(ki + 1) * c];
                for ((yv, &xv), &wv) in yrow.iter_mut().zip(xrow).zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
    }
    y
}

/// gx[b,s,c] = sum_k w[k,c] gy[b, s-k+p, c]
fn conv_grad_input<T: Float>(gy: &[T], w: &[T], b: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let mut gx = vec![T::zero(); b * t * c];
    for bi in 0..b {
        let gyb = &gy[bi * t * c..(bi + 1) * t * c];
        let gxb = &mut gx[bi * t * c..(bi + 1) * t * c];
        for si in 0..t {
            let gxrow = &mut gxb[si * c..(si + 1) * c];
            for ki in 0..k {
                let dst = si as isize - ki as isize + p as isize;
                if dst < 0 || dst as usize >= t {
                    continue;
                }
                let gyrow = &gyb[dst as usize * c..(dst as usize + 1) * c];
                let wrow = &w[ki * c..(ki + 1) * c];
                for ((g, &gv), &wv) in gxrow.iter_mut().zip(gyrow).zip(wrow) {
                    *g += gv * wv;
                }
            }
        }
    }
    gx
}

/// gw[k,c] = sum_{b,t} gy[b,t,c] x[b, t+k-p, c]
fn conv_grad_kernel<T: Float>(x: &[T], gy: &[T], b: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let mut gw = vec![T::zero(); k * c];
    for bi in 0..b {
        let xb = &x[bi * t * c..(bi + 1) * t * c];
        let gyb = &gy[bi * t * c..(bi + 1) * t * c];
        for ki in 0..k {
            let gwrow = &mut gw[ki * c..(ki + 1) * c];
            for ti in 0..t {
                let src = ti as isize + ki as isize - p as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xrow = &xb[src as usize * c..(src as usize + 1) * c];
                let gyrow = &gyb[ti * c..(ti + 1) * c];
                for ((g, &xv), &gv) in gwrow.iter_mut().zip(xrow).zip(gyrow) {
                    *g += xv * gv;
                }
            }
        }
    }
    gw
}

fn conv_dims(l_data: &Layout, l_kernel: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    let (b, t, c) = l_data.shape().dims3()?;
    let (k, ck) = l_kernel.shape().dims2()?;
    if ck != c || k % 2 == 0 {
        candle_core::bail!("depthwise conv: kernel ({k}, {ck}) does not fit {c} channels or is even");
    }
    Ok((b, t, c, k))
}

macro_rules! dispatch {
    ($s1:expr, $s2:expr, $f:ident, $l1:expr, $l2:expr, $($dims:expr),*) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32($f::<f32>(slice($s1, $l1)?, slice($s2, $l2)?, $($dims),*))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64($f::<f64>(slice($s1, $l1)?, slice($s2, $l2)?, $($dims),*))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        }
    };
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, c, k) = conv_dims(l1, l2)?;
        let out = dispatch!(s1, s2, conv_fwd, l1, l2, b, t, c, k);
        Ok((out, Shape::from((b, t, c))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &DepthwiseConvGradInput)?;
        let gw = x.apply_op2_no_bwd(&grad, &DepthwiseConvGradKernel { k: w.dim(0)? })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseConvGradInput {
    fn name(&self) -> &'static str {
        "depthwise-conv-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, c, k) = conv_dims(l1, l2)?;
        let out = dispatch!(s1, s2, conv_grad_input, l1, l2, b, t, c, k);
        Ok((out, Shape::from((b, t, c))))
    }
}

impl CustomOp2 for DepthwiseConvGradKernel {
    fn name(&self) -> &'static str {
        "depthwise-conv-grad-kernel"
    }

    /// Inputs are the forward input `(B, T, C)` and the output gradient.
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, c) = l1.shape().dims3()?;
        if l2.shape().dims3()? != (b, t, c) {
            candle_core::bail!("depthwise conv grad: shape mismatch");
        }
        let k = self.k;
        let out = dispatch!(s1, s2, conv_grad_kernel, l1, l2, b, t, c, k);
        Ok((out, Shape::from((k, c))))
    }
}

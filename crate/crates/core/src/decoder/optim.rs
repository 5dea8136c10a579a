//! AdamW with global gradient-norm clipping and a warmup schedule.
//!
//! Moment estimates live on the host in f32 (the checkpoint precision); the
//! update itself is computed in f64.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use super::config::OptimConfig;
use super::layers::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    vars: Vec<Var>,
    state: Vec<AdamState>,
    step: u64,
}

/// What one update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let vars = params.vars();
        let state = vars
            .iter()
            .map(|v| AdamState {
                m: vec![0.0; v.elem_count()],
                v: vec![0.0; v.elem_count()],
            })
            .collect();
        Ok(Self {
            cfg,
            vars,
            state,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &[AdamState] {
        &self.state
    }

    /// Replace moments and step counter, e.g. when resuming.
    pub fn restore(&mut self, state: Vec<AdamState>, step: u64) -> Result<()> {
        if state.len() != self.vars.len()
            || state
                .iter()
                .zip(&self.vars)
                .any(|(s, v)| s.m.len() != v.elem_count() || s.v.len() != v.elem_count())
        {
            return Err(Error::format("optimizer state does not match the parameters"));
        }
        self.state = state;
        self.step = step;
        Ok(())
    }

    /// Apply one update from `grads`. Parameters without a gradient still
    /// receive weight decay and moment decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<UpdateStats> {
        let grads: Vec<Option<Vec<f64>>> = self
            .vars
            .iter()
            .map(|v| grads.get(v.as_tensor()).map(host_f64).transpose())
            .collect::<Result<_>>()?;
        let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Data(format!("non-finite gradient norm {grad_norm}")));
        }
        let clip = if self.cfg.max_grad_norm > 0.0 && grad_norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / grad_norm
        } else {
            1.0
        };

        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.cfg.weight_decay;

        for ((var, state), grad) in self.vars.iter().zip(&mut self.state).zip(&grads) {
            let mut p = host_f64(var.as_tensor())?;
            for i in 0..p.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i] * clip);
                let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
                state.m[i] = m as f32;
                state.v[i] = v as f32;
                let update = (m / bc1) / ((v / bc2).sqrt() + self.cfg.eps);
                p[i] = p[i] * decay - lr * update;
            }
            let t = Tensor::from_vec(p, var.shape(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(UpdateStats { lr, grad_norm })
    }
}

fn host_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        let t = Tensor::from_slice(values, values.len(), &Device::Cpu).unwrap();
        s.register("w".into(), Var::from_tensor(&t).unwrap());
        s
    }

    fn cfg() -> OptimConfig {
        OptimConfig {
            peak_lr: 0.1,
            warmup_steps: 1,
            total_steps: 1000,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 0.0,
            linear_decay: false,
        }
    }

    fn value(s: &ParamStore) -> Vec<f64> {
        s.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // after bias correction the first Adam update is lr * sign(g)
        let s = store(&[1.0, -2.0]);
        let mut opt = AdamW::new(&s, cfg()).unwrap();
        let w = s.get("w").unwrap().clone();
        let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let v = value(&s);
        assert!((v[0] - 0.9).abs() < 1e-6, "{v:?}");
        assert!((v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let s = store(&[3.0, -4.0, 0.5]);
        let mut opt = AdamW::new(&s, cfg()).unwrap();
        let w = s.get("w").unwrap().clone();
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(value(&s).iter().all(|x| x.abs() < 0.05), "{:?}", value(&s));
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let s = store(&[2.0]);
        let mut c = cfg();
        c.weight_decay = 0.5;
        let mut opt = AdamW::new(&s, c).unwrap();
        // a gradient store that does not mention `w`
        let other = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let grads = other.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        assert!((value(&s)[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let s = store(&[3.0, 4.0]);
        let mut c = cfg();
        c.max_grad_norm = 1.0;
        let mut opt = AdamW::new(&s, c).unwrap();
        let w = s.get("w").unwrap().clone();
        let loss = (w.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let stats = opt.step(&loss.backward().unwrap()).unwrap();
        assert!((stats.grad_norm - 5.0).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn restore_rejects_mismatched_state() {
        let s = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(&s, cfg()).unwrap();
        let bad = vec![AdamState {
            m: vec![0.0],
            v: vec![0.0],
        }];
        assert!(matches!(opt.restore(bad, 3), Err(Error::Format(_))));
    }
}

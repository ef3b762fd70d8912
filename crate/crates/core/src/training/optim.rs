use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.98);
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `peak` at `warmup`, then `peak·√(warmup/step)`.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config(
            "learning-rate schedule starts at step 1".into(),
        ));
    }
    if warmup == 0 {
        return Ok(peak);
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(if step < warmup {
        peak * (s / w)
    } else {
        peak * (w / s).sqrt()
    })
}

/// Bias-corrected Adam with moments shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |_| -> Vec<Tensor<T>> {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Adam {
            beta1: ADAM_BETAS.0,
            beta2: ADAM_BETAS.1,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` means no
    /// gradient reached it and counts as zero.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        let ids: Vec<ParamId> = params.iter().map(|(id, _, _)| id).collect();
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match g {
                Some(g) => {
                    for ((m, v), &g) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                    }
                }
                None => {
                    for (m, v) in m.iter_mut().zip(v.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                    }
                }
            }
            if m.iter().all(|&x| x == T::zero()) {
                continue;
            }
            let p = params.get_mut(ids[i]).data_mut();
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mh = m / c1;
                let vh = v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

/// Linear warmup to the peak rate, then exponential decay reaching
/// `final_fraction · peak` at the last step.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    decay: f64,
}

impl Schedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64, final_fraction: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).ceil() as usize;
        let warmup_steps = warmup_steps.min(total_steps);
        let decay_steps = total_steps.saturating_sub(warmup_steps);
        let decay = if decay_steps == 0 { 1.0 } else { final_fraction.powf(1.0 / decay_steps as f64) };
        Schedule { peak, total_steps, warmup_steps, decay }
    }

    /// Rate for step `step` (1-based).
    pub fn rate(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else {
            self.peak * self.decay.powi((step - self.warmup_steps) as i32)
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Invariant("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, x) in pd.iter_mut().enumerate() {
                let gi = gd[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vhat = *vi / c2;
                *x -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1e-3, 100, 0.06, 0.1);
        assert_eq!(s.warmup_steps, 6);
        assert!((s.rate(3) - 5e-4).abs() < 1e-15);
        assert!((s.rate(6) - 1e-3).abs() < 1e-15);
        assert!((s.rate(100) - 1e-4).abs() < 1e-12);
        for k in 7..100 {
            assert!(s.rate(k + 1) < s.rate(k));
        }
        let flat = Schedule::new(1.0, 3, 0.0, 1.0);
        assert_eq!((flat.rate(1), flat.rate(3)), (1.0, 1.0));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::row(&[3.0, 4.0]), Tensor::row(&[12.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = vec![Tensor::row(&[0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row(&[3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g: Vec<Tensor> = store.tensors().iter().map(|t| t.map(|x| 2.0 * x)).collect();
            opt.step(&mut store, &g, 0.01).unwrap();
        }
        assert!(store.get("x").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }
}

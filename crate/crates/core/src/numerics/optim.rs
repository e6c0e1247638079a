use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::Scalar;
use crate::error::{Error, Result};

pub type GradMap<F> = BTreeMap<ParamId, Vec<F>>;

/// Trainable tensors sharing one peak learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub peak_lr: f64,
    pub weight_decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        let s = Self { total_steps, warmup_fraction };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0,1)", self.warmup_fraction)));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).floor() as usize
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay to zero at `total_steps`.
/// Steps past the end of the schedule get a zero rate.
pub fn cosine_lr(step: usize, schedule: &LrSchedule, peak_lr: f64) -> f64 {
    let t = schedule.total_steps;
    if step > t {
        return 0.0;
    }
    let w = schedule.warmup_steps();
    if step < w {
        return peak_lr * step as f64 / w as f64;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut GradMap<F>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.values().map(|g| super::kernels::l2_norm_sq(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Element-wise mean of per-example gradient maps, summed in list order.
pub fn mean_gradients<F: Scalar>(parts: Vec<GradMap<F>>) -> GradMap<F> {
    let n = parts.len();
    let mut out: GradMap<F> = BTreeMap::new();
    for part in parts {
        for (id, g) in part {
            match out.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                None => {
                    out.insert(id, g);
                }
            }
        }
    }
    if n > 1 {
        let inv = F::of(1.0 / n as f64);
        out.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= inv);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// AdamW with decoupled weight decay and per-group cosine schedules.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, state: BTreeMap::new() }
    }

    pub fn state(&self) -> &BTreeMap<ParamId, Moments> {
        &self.state
    }

    /// Applies one update at 0-based `step`; returns each group's learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        groups: &[ParamGroup],
        grads: &GradMap<f32>,
        step: usize,
        schedule: &LrSchedule,
    ) -> Result<Vec<f64>> {
        let mut owner: BTreeMap<ParamId, usize> = BTreeMap::new();
        for (gi, g) in groups.iter().enumerate() {
            if g.peak_lr <= 0.0 {
                return Err(Error::Config(format!("group {} has non-positive peak lr", g.name)));
            }
            for &p in &g.params {
                if !store.get(p).trainable {
                    return Err(Error::Config(format!(
                        "frozen parameter {} listed in group {}",
                        store.get(p).name,
                        g.name
                    )));
                }
                if owner.insert(p, gi).is_some() {
                    return Err(Error::Config(format!("parameter {} in more than one group", store.get(p).name)));
                }
            }
        }
        for id in grads.keys() {
            if !owner.contains_key(id) {
                return Err(Error::Config(format!("gradient for {} which belongs to no group", store.get(*id).name)));
            }
        }

        let lrs: Vec<f64> = groups.iter().map(|g| cosine_lr(step, schedule, g.peak_lr)).collect();
        let t = (step + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let gi = owner[id];
            let lr = lrs[gi];
            let decay = if groups[gi].weight_decay { self.weight_decay } else { 0.0 };
            let param = store.get_mut(*id);
            let st = self.state.entry(*id).or_insert_with(|| Moments {
                m: vec![0.0; param.data.len()],
                v: vec![0.0; param.data.len()],
            });
            for (((p, g), m), v) in param.data.iter_mut().zip(grad).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                let g = *g as f64;
                let mut x = *p as f64;
                x -= lr * decay * x;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let mhat = mn / bc1;
                let vhat = vn / bc2;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *p = x as f32;
            }
        }
        Ok(lrs)
    }
}

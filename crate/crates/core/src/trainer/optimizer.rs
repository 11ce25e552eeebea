use crate::autodiff::{Gradients, ParamStore, Real, Tensor};
use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// `peak * min(s / W, sqrt(W / s))` for 1-indexed step `s`.
pub fn lr_schedule(step: u64, config: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate steps are 1-indexed".into()));
    }
    let (s, w) = (step as f64, config.warmup_steps as f64);
    Ok(config.peak_lr * (s / w).min((w / s).sqrt()))
}

/// Scales `grads` so their global L2 norm is at most `threshold`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, threshold: f64) -> Result<f64> {
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Evaluation(format!(
            "non-finite gradient in parameter #{}",
            id.0
        )));
    }
    let norm = grads.global_norm().as_f64();
    if norm > threshold {
        grads.scale(T::c(threshold / norm));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Decoupled weight decay on decaying parameters, then the bias-corrected
/// adaptive update.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if state.m.len() != store.len() || grads.len() != store.len() {
        return Err(Error::dim(format!(
            "optimizer holds {} moments and {} gradients for {} parameters",
            state.m.len(),
            grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads.get(id);
        let decay = if store.decays(id) {
            opt.weight_decay
        } else {
            0.0
        };
        let p = store.get_mut(id);
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim(format!(
                "parameter #{i} is {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
        let (b1, b2) = (T::c(opt.beta1), T::c(opt.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - opt.beta1), T::c(1.0 - opt.beta2));
        let shrink = T::c(1.0 - lr * decay);
        let (lr_t, c1, c2, eps) = (T::c(lr), T::c(c1), T::c(c2), T::c(opt.eps));
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *pj *= shrink;
            *mj = b1 * *mj + one_b1 * gj;
            *vj = b2 * *vj + one_b2 * gj * gj;
            let mh = *mj / c1;
            let vh = *vj / c2;
            *pj -= lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

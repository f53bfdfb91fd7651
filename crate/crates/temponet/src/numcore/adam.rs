use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array2;
use super::store::{GradStore, ParamStore};
use crate::Result;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Array2>,
    v: BTreeMap<String, Array2>,
    t: u64,
}

/// One Adam update over every parameter that has a gradient entry.
/// Deterministic; parameters without gradients are untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    grads.check_shapes(params)?;
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.rows(), p.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(p.rows(), p.cols()));
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Array2::filled(2, 2, 3.0));
        let grads = GradStore::zeros_like(&params);
        let mut state = AdamState::default();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(*params.get("w").unwrap(), Array2::filled(2, 2, 3.0));
    }

    #[test]
    fn descends_on_quadratic() {
        // f(x) = x^2 from x = 1: |x| must decrease.
        let mut params = ParamStore::new();
        params.insert("x", Array2::filled(1, 1, 1.0));
        let mut state = AdamState::default();
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut grads = GradStore::new();
        let x = params.get("x").unwrap().get(0, 0);
        grads.accumulate("x", &Array2::filled(1, 1, 2.0 * x)).unwrap();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!(params.get("x").unwrap().get(0, 0).abs() < 1.0);
    }

    #[test]
    fn bitwise_deterministic() {
        let run = || {
            let mut params = ParamStore::new();
            params.insert("w", Array2::from_fn(3, 3, |r, c| (r + 2 * c) as f64 * 0.3));
            let mut state = AdamState::default();
            let mut grads = GradStore::new();
            for step in 0..5 {
                grads.zero();
                let snapshot = params.get("w").unwrap().map(|v| v * 0.5 + step as f64 * 0.01);
                grads.accumulate("w", &snapshot).unwrap();
                adam_step(&mut params, &grads, &mut state, &AdamConfig::default()).unwrap();
            }
            params.get("w").unwrap().clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

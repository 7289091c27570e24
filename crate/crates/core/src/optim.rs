//! SGD with classical momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Optimizer settings. The defaults are the training configuration used by
/// every episode: lr 3.5e-3 under SGD with momentum 0.9.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 3.5e-3,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Velocity buffers, retained between steps.
#[derive(Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One update: `v <- momentum * v + g; theta <- theta - lr * v` for every
/// parameter in `names`. A listed parameter without a gradient is an error
/// naming the parameter.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    names: &[String],
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    cfg.validate()?;
    for name in names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let p = store.get_mut(name)?;
        if g.len() != p.data.len() {
            return Err(Error::Config(format!(
                "gradient length {} != parameter length {} for `{name}`",
                g.len(),
                p.data.len()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            v[i] = cfg.momentum * v[i] + g[i];
            p.data[i] -= cfg.learning_rate * v[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", vec![1], vec![theta]);
        s
    }

    #[test]
    fn plain_step_matches_hand_arithmetic() {
        // lr=0.1, momentum=0, theta=1, g=2 -> theta'=0.8
        let mut store = store_with(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![2.0]);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
        };
        let mut st = SgdState::new();
        sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap();
        assert!((store.get("w").unwrap().data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = store_with(1.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        let cfg = SgdConfig::default();
        let mut st = SgdState::new();
        for _ in 0..10 {
            sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap();
        }
        assert_eq!(store.get("w").unwrap().data[0], 1.5);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut store = store_with(1.0);
        let grads = BTreeMap::new();
        let cfg = SgdConfig::default();
        let mut st = SgdState::new();
        let err = sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
    }

    #[test]
    fn quadratic_descends_monotonically_below_curvature_bound() {
        // f(theta) = 0.5 * c * theta^2, grad = c * theta. With momentum 0 and
        // lr < 2/c the iterates are theta_k = (1 - lr*c)^k theta_0, so |theta|
        // and f decrease strictly. The closed form is the oracle.
        let c = 4.0;
        let lr = 0.3; // < 2/c = 0.5
        let cfg = SgdConfig {
            learning_rate: lr,
            momentum: 0.0,
        };
        let mut store = store_with(2.0);
        let mut st = SgdState::new();
        let mut prev_f = 0.5 * c * 4.0;
        let mut expected = 2.0;
        for _ in 0..20 {
            let theta = store.get("w").unwrap().data[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![c * theta]);
            sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap();
            let theta2 = store.get("w").unwrap().data[0];
            expected *= 1.0 - lr * c;
            assert!((theta2 - expected).abs() < 1e-12);
            let f = 0.5 * c * theta2 * theta2;
            assert!(f < prev_f, "f {f} should decrease from {prev_f}");
            prev_f = f;
        }
    }

    #[test]
    fn velocity_carries_between_calls() {
        let mut store = store_with(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        let cfg = SgdConfig {
            learning_rate: 1.0,
            momentum: 0.5,
        };
        let mut st = SgdState::new();
        sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap();
        // v = 1, theta = -1
        sgd_step(&mut store, &grads, &["w".to_string()], &cfg, &mut st).unwrap();
        // v = 1.5, theta = -2.5
        assert!((store.get("w").unwrap().data[0] + 2.5).abs() < 1e-15);
    }
}

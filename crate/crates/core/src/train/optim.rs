use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

use super::TrainConfig;

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let decay = cfg.steps - cfg.warmup_steps;
    if decay == 0 {
        return 0.0;
    }
    cfg.peak_lr * (cfg.steps - step) as f64 / decay as f64
}

/// Adam moments and per-tensor decay flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub decay: IndexMap<String, bool>,
}

impl AdamState {
    pub fn new(params: &Params, decays: impl Fn(&str) -> bool) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamState {
            t: 0,
            m: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            v: params.iter().map(|(k, t)| (k.clone(), zeros(t))).collect(),
            decay: params.names().map(|k| (k.clone(), decays(k))).collect(),
        }
    }
}

/// One Adam update with bias correction, global-norm gradient clipping and
/// decoupled weight decay `p -= lr * wd * p` on decaying tensors. Tensors
/// without a gradient are treated as having a zero gradient. Returns the
/// gradient norm before clipping.
pub fn adam_step(
    params: &mut Params,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };

    state.t += 1;
    let (b1, b2) = cfg.adam_betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no optimizer state for {name}")))?;
        let v = state.v.get_mut(name).expect("moments share keys");
        let wd = if state.decay.get(name).copied().unwrap_or(false) {
            cfg.weight_decay
        } else {
            0.0
        };
        let g = grads.get(name).map(Tensor::data);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g[i] * clip);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.adam_eps);
            pd[i] -= lr * (update + wd * pd[i]);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn scalar_params(x: f64) -> Params {
        let mut p = Params::default();
        p.insert("w", Tensor::scalar(x));
        p
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 1e-3);
        assert_eq!(lr_at(1000, &c), 0.0);
        assert!((lr_at(50, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_at(550, &c) - 5e-4).abs() < 1e-18);
        let max = (0..=1000).map(|s| lr_at(s, &c)).fold(0.0, f64::max);
        assert_eq!(max, lr_at(100, &c));
        for s in 1..=1000 {
            assert!((lr_at(s, &c) - lr_at(s - 1, &c)).abs() <= 1e-3 / 100.0 + 1e-18);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let c = TrainConfig { weight_decay: 0.0, ..cfg() };
        let mut p = scalar_params(0.7);
        let mut state = AdamState::new(&p, |_| true);
        let grads: IndexMap<String, Tensor> = [("w".to_string(), Tensor::scalar(0.0))].into_iter().collect();
        adam_step(&mut p, &grads, &mut state, &c, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(state.m["w"].item(), 0.0);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let c = TrainConfig {
            weight_decay: 0.01,
            clip_norm: 0.0,
            ..cfg()
        };
        let (x, g, lr) = (0.5, 0.3, 1e-2);
        let mut p = scalar_params(x);
        let mut state = AdamState::new(&p, |_| true);
        let grads: IndexMap<String, Tensor> = [("w".to_string(), Tensor::scalar(g))].into_iter().collect();
        adam_step(&mut p, &grads, &mut state, &c, lr).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / 0.1;
        let vhat = v / 0.001;
        let want = x - lr * (mhat / (vhat.sqrt() + 1e-6) + 0.01 * x);
        assert!((p.get("w").unwrap().item() - want).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let c = TrainConfig {
            clip_norm: 1.0,
            weight_decay: 0.0,
            ..cfg()
        };
        let mut p = Params::default();
        p.insert("a", Tensor::vector(vec![0.0, 0.0]).unwrap());
        let mut state = AdamState::new(&p, |_| false);
        let grads: IndexMap<String, Tensor> =
            [("a".to_string(), Tensor::vector(vec![6.0, 8.0]).unwrap())].into_iter().collect();
        let norm = adam_step(&mut p, &grads, &mut state, &c, 1e-3).unwrap();
        assert_eq!(norm, 10.0);
        let m = state.m["a"].data();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-15 && (m[1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = scalar_params(1.0);
        let mut state = AdamState::new(&p, |_| true);
        let grads: IndexMap<String, Tensor> = [("w".to_string(), Tensor::scalar(f64::NAN))].into_iter().collect();
        let err = adam_step(&mut p, &grads, &mut state, &cfg(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
    }

    #[test]
    fn decay_exempt_tensors_do_not_shrink() {
        let c = TrainConfig { weight_decay: 0.5, ..cfg() };
        let mut p = Params::default();
        p.insert("kept", Tensor::scalar(1.0));
        p.insert("decayed", Tensor::scalar(1.0));
        let mut state = AdamState::new(&p, |n| n == "decayed");
        adam_step(&mut p, &IndexMap::new(), &mut state, &c, 0.1).unwrap();
        assert_eq!(p.get("kept").unwrap().item(), 1.0);
        assert!((p.get("decayed").unwrap().item() - 0.95).abs() < 1e-15);
    }
}

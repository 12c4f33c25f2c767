//! AdamW with decoupled weight decay, plus the warmup-cosine schedule.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("adamw_step: parameter '{name}' has no gradient")]
    MissingGrad { name: String },
    #[error("adamw_step: state for '{name}' has {state} elements, parameter has {param}")]
    StateMismatch { name: String, state: usize, param: usize },
}

/// One trainable tensor plus its optimizer policy. Matrices and embedding
/// tables decay; gains, biases and the temperature do not.
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First and second moment estimates, aligned with one parameter list.
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &[NamedParam]) -> AdamWState {
        AdamWState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }
}

/// One optimizer step. The adaptive update uses bias-corrected moments; the
/// decay term `lr * wd * p` is applied separately from the gradient path.
/// Every gradient is consumed and zeroed before returning.
pub fn adamw_step(
    params: &[NamedParam],
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let grad = p.tensor.grad().ok_or_else(|| OptimError::MissingGrad { name: p.name.clone() })?;
        if state.m[i].len() != grad.len() {
            return Err(OptimError::StateMismatch {
                name: p.name.clone(),
                state: state.m[i].len(),
                param: grad.len(),
            });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let wd = if p.decay { weight_decay } else { 0.0 };
        p.tensor.modify_data(|data| {
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + EPS) + wd * data[j]);
            }
        });
        p.tensor.zero_grad();
    }
    Ok(())
}

/// Linear warmup from zero to `base`, then cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

/// Default warmup length: 2% of the run, never below 100 steps (and never
/// beyond the run itself).
pub fn default_warmup(total: u64) -> u64 {
    (total / 50).max(100).min(total)
}

impl LrSchedule {
    pub fn new(base: f64, warmup: u64, total: u64) -> LrSchedule {
        LrSchedule { base, warmup: warmup.min(total), total }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Vec<NamedParam> {
        vec![NamedParam {
            name: "w".into(),
            tensor: Tensor::param(&[1], vec![value]).unwrap(),
            decay: false,
        }]
    }

    fn with_grad(params: &[NamedParam], g: f64) {
        // route a known gradient through a real graph: loss = g * w
        let c = Tensor::from_vec(&[1], vec![g]).unwrap();
        let loss = params[0].tensor.mul(&c).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m=0.1, v=0.001, mhat=1, vhat=1 -> p = 1 - 0.1/(1+1e-8)
        let params = one_param(1.0);
        let mut state = AdamWState::new(&params);
        with_grad(&params, 1.0);
        adamw_step(&params, &mut state, 0.1, 0.0).unwrap();
        let p = params[0].tensor.item();
        assert!((p - 0.9000000010).abs() < 1e-9, "p = {p}");
        assert!(params[0].tensor.grad().is_none(), "grad must be consumed");
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        // zero gradient: adaptive term vanishes, only lr*wd*p applies
        let mut params = one_param(1.0);
        params[0].decay = true;
        let mut state = AdamWState::new(&params);
        with_grad(&params, 0.0);
        adamw_step(&params, &mut state, 0.1, 0.1).unwrap();
        let p = params[0].tensor.item();
        assert!((p - 0.99).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn no_decay_group_ignores_weight_decay() {
        let params = one_param(1.0);
        let mut state = AdamWState::new(&params);
        with_grad(&params, 0.0);
        adamw_step(&params, &mut state, 0.1, 0.1).unwrap();
        assert!((params[0].tensor.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let params = one_param(1.0);
        let mut state = AdamWState::new(&params);
        match adamw_step(&params, &mut state, 0.1, 0.0) {
            Err(OptimError::MissingGrad { name }) => assert_eq!(name, "w"),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let params = one_param(5.0);
        let mut state = AdamWState::new(&params);
        for _ in 0..500 {
            let loss = params[0].tensor.mul(&params[0].tensor).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            adamw_step(&params, &mut state, 0.05, 0.0).unwrap();
        }
        assert!(params[0].tensor.item().abs() < 0.05);
    }

    #[test]
    fn schedule_hand_values() {
        let s = LrSchedule::new(1.0, 10, 110);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(110) < 1e-12);
        assert!(s.lr_at(1000) < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let s = LrSchedule::new(2e-3, 40, 400);
        for step in 1..40 {
            assert!(s.lr_at(step) >= s.lr_at(step - 1));
        }
        for step in 41..400 {
            assert!(s.lr_at(step) <= s.lr_at(step - 1));
        }
    }

    #[test]
    fn default_warmup_floor_and_fraction() {
        assert_eq!(default_warmup(200), 100);
        assert_eq!(default_warmup(30_000), 600);
        assert_eq!(default_warmup(50), 50);
    }
}

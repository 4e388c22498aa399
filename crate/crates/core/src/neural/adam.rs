use super::net::NetworkParams;
use crate::error::{invalid, Error, Result};

/// Moment estimates and hyperparameters of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &NetworkParams, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }
}

/// One bias-corrected Adam update. Fails before touching any parameter if a
/// gradient is not finite.
pub fn adam_step(params: &mut NetworkParams, grads: &[Vec<f64>], state: &mut OptimState) -> Result<()> {
    let tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.first.len() != tensors.len() {
        return invalid("gradient and moment lists must match the parameters");
    }
    for ((name, t), g) in tensors.iter().zip(grads) {
        if g.len() != t.numel() {
            return invalid(format!("gradient of {name} has {} entries, expected {}", g.len(), t.numel()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((_, p), g), (m, v)) in tensors.iter_mut().zip(grads).zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::neural::net::Descriptor;

    fn tiny() -> NetworkParams {
        NetworkParams::init(Descriptor { widths: vec![2], ..Descriptor::default() }, 5).unwrap()
    }

    fn grads_like(p: &NetworkParams, v: f64) -> Vec<Vec<f64>> {
        p.tensors().iter().map(|(_, t)| vec![v; t.numel()]).collect()
    }

    #[test]
    fn scalar_trajectory_matches_scripted_oracle() {
        let mut p = tiny();
        let mut state = OptimState::new(&p, 0.01);
        let g = 0.3;
        let x0 = p.tensors()[0].1.data()[0];
        let (mut x, mut m, mut v) = (x0, 0.0f64, 0.0f64);
        for t in 1..=25 {
            {
                let g_ = grads_like(&p, g);
                adam_step(&mut p, &g_, &mut state)
            }
            .unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors()[0].1.data()[0] - x).abs() < 1e-12);
        }
        assert_eq!(state.step, 25);
    }

    #[test]
    fn no_op_updates() {
        let mut p = tiny();
        let before = p.clone();
        let mut state = OptimState::new(&p, 0.1);
        {
            let g_ = grads_like(&p, 0.0);
            adam_step(&mut p, &g_, &mut state)
        }
        .unwrap();
        assert_eq!(p, before);
        let mut state = OptimState::new(&p, 0.0);
        {
            let g_ = grads_like(&p, 7.0);
            adam_step(&mut p, &g_, &mut state)
        }
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = tiny();
        let before = p.clone();
        let mut grads = grads_like(&p, 1.0);
        grads[3][0] = f64::NAN;
        let mut state = OptimState::new(&p, 0.1);
        match adam_step(&mut p, &grads, &mut state) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains(&p.tensors()[3].0)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
        assert!(adam_step(&mut p, &grads[..2], &mut state).is_err());
    }
}

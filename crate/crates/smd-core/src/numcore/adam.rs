//! Adam with bias correction, one moment pair per parameter array.

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place. The state's step counter advances once per call,
/// so callers must touch every array exactly once per optimizer step.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0, 0.0, 0.0], &mut st, 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // f(th) = th^2 at th = 1: g = 2
        // m1 = 0.2, v1 = 0.004, m_hat = 2, v_hat = 4
        // th' = 1 - 0.1 * 2 / (2 + 1e-8)
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut st, 0.1);
        let want = 1.0 - 0.1 * 2.0 / (2.0 + ADAM_EPS);
        assert_eq!(p[0], want);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn identical_inputs_give_bit_identical_results() {
        let grads = vec![0.3, -1.7, 0.0, 2.5];
        let run = || {
            let mut p = vec![0.1, 0.2, 0.3, 0.4];
            let mut st = AdamState::new(4);
            for _ in 0..5 {
                adam_step(&mut p, &grads, &mut st, 3e-4);
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }
}

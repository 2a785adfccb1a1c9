//! AdaMax, the infinity-norm variant of Adam.

use serde::{Deserialize, Serialize};

use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaMax {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdaMax {
    fn default() -> Self {
        AdaMax {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First moment and infinity-norm accumulator for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBuffers {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
}

impl MomentBuffers {
    pub fn new(len: usize) -> Self {
        MomentBuffers {
            m: vec![0.0; len],
            u: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<MomentBuffers>,
    /// Number of steps taken.
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        OptimizerState {
            buffers: params.slices().iter().map(|s| MomentBuffers::new(s.len())).collect(),
            t: 0,
        }
    }
}

impl AdaMax {
    /// Update one parameter slice at step `t` (1-based).
    pub fn update(&self, t: u64, params: &mut [f64], grads: &[f64], state: &mut MomentBuffers) {
        let step = self.learning_rate / (1.0 - self.beta1.powi(t as i32));
        for (((p, &g), m), u) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.u.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *u = (self.beta2 * *u).max(g.abs());
            *p -= step * *m / (*u + self.epsilon);
        }
    }

    pub fn step(&self, params: &mut Parameters, grads: &Parameters, state: &mut OptimizerState) {
        state.t += 1;
        let t = state.t;
        for ((p, g), buf) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(state.buffers.iter_mut())
        {
            self.update(t, p, g, buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let opt = AdaMax::default();
        let mut p = vec![0.5, -1.0];
        let mut buf = MomentBuffers::new(2);
        opt.update(1, &mut p, &[0.0, 0.0], &mut buf);
        assert_eq!(p, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1, u = 1, step = 0.001 / (1 - 0.9) * 0.1 / (1 + 1e-8)
        let opt = AdaMax::default();
        let mut p = vec![0.0];
        let mut buf = MomentBuffers::new(1);
        opt.update(1, &mut p, &[1.0], &mut buf);
        assert!((buf.m[0] - 0.1).abs() < 1e-15);
        assert_eq!(buf.u[0], 1.0);
        let expected = -0.001 / 0.1 * 0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18, "{}", p[0]);
    }

    #[test]
    fn step_never_exceeds_learning_rate() {
        let opt = AdaMax::default();
        let mut p = vec![0.0; 3];
        let mut buf = MomentBuffers::new(3);
        let mut state = 99u64;
        for t in 1..=500 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let g: Vec<f64> = (0..3)
                .map(|k| ((state >> (10 + 7 * k)) % 2001) as f64 / 100.0 - 10.0)
                .collect();
            let before = p.clone();
            opt.update(t, &mut p, &g, &mut buf);
            let bound = opt.learning_rate / (1.0 - opt.beta1.powi(t as i32));
            for (a, b) in before.iter().zip(&p) {
                assert!((a - b).abs() <= opt.learning_rate * (1.0 + 1e-12));
                assert!((a - b).abs() <= bound);
            }
            assert!(buf.u.iter().all(|&u| u >= 0.0));
        }
    }
}

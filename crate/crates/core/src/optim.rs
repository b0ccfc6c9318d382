//! Gradient-descent optimizers over a [`Parameters`] traversal.
//!
//! State buffers are kept in traversal order, which is fixed for a given
//! model type.

use crate::nn::Parameters;
use crate::tensor::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut impl Parameters<T>, lr: f64) {
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        let velocity = &mut self.velocity;
        let mut i = 0;
        model.visit_mut("", &mut |_, p| {
            if velocity.len() <= i {
                velocity.push(vec![T::zero(); p.len()]);
            }
            let v = &mut velocity[i];
            for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
            i += 1;
        });
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn step(&mut self, model: &mut impl Parameters<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (T::from_f64(self.beta1), T::from_f64(self.beta2), T::from_f64(self.eps));
        let step = T::from_f64(lr / c1);
        let c2 = T::from_f64(c2);
        let one = T::one();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut("", &mut |_, p| {
            if ms.len() <= i {
                ms.push(vec![T::zero(); p.len()]);
                vs.push(vec![T::zero(); p.len()]);
            }
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(ms[i].iter_mut()).zip(vs[i].iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / ((*v / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Parameters};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_matches_closed_form_two_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(1, 1, 1.0, &mut rng);
        lin.weight.value[0] = 1.0;
        lin.bias.value[0] = 0.0;
        let mut opt = Sgd::new(0.8, 0.05);
        for _ in 0..2 {
            lin.zero_grad();
            lin.weight.grad[0] = 0.5;
            opt.step(&mut lin, 0.1);
        }
        // v1 = 0.5 + 0.05 = 0.55, w1 = 0.945
        // v2 = 0.8*0.55 + 0.5 + 0.05*0.945 = 0.98725, w2 = 0.945 - 0.098725
        assert!((lin.weight.value[0] - (0.945 - 0.098725)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(2, 1, 1.0, &mut rng);
        let before = lin.weight.value.clone();
        lin.weight.grad = vec![3.0, -0.2];
        let mut opt = Adam::default();
        opt.step(&mut lin, 1e-3);
        assert!((before[0] - lin.weight.value[0] - 1e-3).abs() < 1e-9);
        assert!((lin.weight.value[1] - before[1] - 1e-3).abs() < 1e-9);
    }
}

use crate::model::{Params, Scalar};

const ADAM_EPS: f64 = 1e-8;

/// Global L2 norm over every gradient entry, accumulated in `f64`.
pub fn global_norm<T: Scalar>(grads: &Params<T>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        grads.scale(T::from_f64(max_norm / norm));
    }
    norm
}

pub fn sgd_step<T: Scalar>(params: &mut Params<T>, grads: &Params<T>, lr: f64) {
    let lr = T::from_f64(lr);
    let gs = grads.named_tensors();
    for (p, (_, g)) in params.tensors_mut().into_iter().zip(gs) {
        for (w, &d) in p.iter_mut().zip(g) {
            *w = *w - lr * d;
        }
    }
}

pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    step: i32,
    m: Params<T>,
    v: Params<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(like: &Params<T>, betas: (f64, f64)) -> Self {
        Self { beta1: betas.0, beta2: betas.1, step: 0, m: Params::zeros(&like.config), v: Params::zeros(&like.config) }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::from_f64(1.0 - self.beta1.powi(self.step));
        let bias2 = T::from_f64(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(ADAM_EPS));
        let gs = grads.named_tensors();
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, g)), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig::custom(1, 1, 2, Some(2)).with_context(4)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Params::<f64>::zeros(&cfg());
        let mut g = Params::<f64>::zeros(&cfg());
        g.b_out[0] = 0.5;
        g.b_out[1] = -3.0;
        let mut opt = Adam::new(&p, (0.9, 0.999));
        opt.step(&mut p, &g, 0.01);
        assert!((p.b_out[0] + 0.01).abs() < 1e-9);
        assert!((p.b_out[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.b_out[2], 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = Params::<f64>::zeros(&cfg());
        g.b_out[0] = 3.0;
        g.b_out[1] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let before = g.clone();
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }

    #[test]
    fn sgd_descends() {
        let mut p = Params::<f64>::zeros(&cfg());
        let mut g = Params::<f64>::zeros(&cfg());
        g.b_out[3] = 2.0;
        sgd_step(&mut p, &g, 0.5);
        assert_eq!(p.b_out[3], -1.0);
    }
}

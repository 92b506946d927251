use crate::scalar::Scalar;

/// Adam with bias correction. Moments are kept per parameter tensor, in
/// [`crate::crosscoder::CrosscoderModel::param_slices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: [&mut [S]; 7], grads: [&[S]; 7], lr: f64) {
        self.t += 1;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one = S::one();
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        // lr * (m / bc1) / (sqrt(v / bc2) + eps), with the corrections folded
        // into two per-step constants
        let step = S::of(lr / bc1);
        let inv_sqrt_bc2 = S::of(1.0 / bc2.sqrt());
        let eps = S::of(self.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                *pj -= step * *mj / (vj.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step1(p: &mut Vec<f64>, g: &[f64], adam: &mut Adam<f64>, lr: f64) {
        let mut e: [Vec<f64>; 6] = Default::default();
        let [e0, e1, e2, e3, e4, e5] = &mut e;
        adam.step(
            [p.as_mut_slice(), e0, e1, e2, e3, e4, e5],
            [g, &[], &[], &[], &[], &[], &[]],
            lr,
        );
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::<f64>::new(&[3, 0, 0, 0, 0, 0, 0], 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, 1.0, 1.0];
        step1(&mut p, &[0.5, -2.0, 0.0], &mut adam, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut adam = Adam::<f64>::new(&[2, 0, 0, 0, 0, 0, 0], 0.9, 0.999, 1e-8);
        let mut p = vec![0.3, -0.7];
        step1(&mut p, &[1.0, 1.0], &mut adam, 0.0);
        assert_eq!(p, vec![0.3, -0.7]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::<f64>::new(&[1, 0, 0, 0, 0, 0, 0], 0.9, 0.999, 1e-8);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            step1(&mut p, &g, &mut adam, 0.05);
        }
        assert!((p[0] - 2.0).abs() < 1e-2);
    }
}

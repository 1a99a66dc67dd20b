use super::{Param, Real};

/// Adagrad: `accum += g²; value −= lr·g / (√accum + ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub epsilon: f64,
}

impl Adagrad {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(learning_rate: f64) -> Self {
        Adagrad {
            learning_rate,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn step<T: Real>(&self, param: &mut Param<T>) {
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        for ((v, &g), acc) in param.value.iter_mut().zip(&param.grad).zip(param.accum.iter_mut()) {
            *acc += g * g;
            *v -= lr * g / (acc.sqrt() + eps);
        }
    }
}

/// One Adagrad update of a parameter tensor.
pub fn adagrad_step<T: Real>(param: &mut Param<T>, learning_rate: f64) {
    Adagrad::new(learning_rate).step(param)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Param::new(vec![3], vec![0.5f64, -1.0, 2.0]);
        let before = p.value.clone();
        adagrad_step(&mut p, 0.01);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_is_normalised() {
        for g in [3.0f64, -0.002, 250.0] {
            let mut p = Param::new(vec![1], vec![1.0f64]);
            p.grad[0] = g;
            adagrad_step(&mut p, 0.01);
            assert_abs_diff_eq!(p.value[0] - 1.0, -0.01 * g.signum(), epsilon = 1e-7);
            assert_eq!(p.accum[0], g * g);
        }
    }

    #[test]
    fn second_step_shrinks_by_sqrt2() {
        let mut p = Param::new(vec![1], vec![0.0f64]);
        p.grad[0] = 1.0;
        adagrad_step(&mut p, 0.01);
        let after_first = p.value[0];
        adagrad_step(&mut p, 0.01);
        assert_abs_diff_eq!(after_first - p.value[0], 0.007_071, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn accumulator_nonnegative_and_nondecreasing(grads in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut p = Param::new(vec![1], vec![0.0f64]);
            let mut last = 0.0;
            for g in grads {
                p.grad[0] = g;
                adagrad_step(&mut p, 0.01);
                prop_assert!(p.accum[0] >= last && p.accum[0] >= 0.0);
                last = p.accum[0];
            }
        }
    }
}

use std::collections::BTreeMap;

use crate::model::ParameterSet;
use crate::numerics::Tensor;

use super::HarnessError;

/// Momentum SGD: `v <- momentum * v + grad; p <- p - lr * v` for every
/// trainable parameter. A trainable parameter without an entry in `grads`
/// gets a zero gradient; frozen parameters are left alone.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
) -> Result<(), HarnessError> {
    for name in grads.keys() {
        if params.get(name).is_none() {
            return Err(HarnessError::UnknownGradient(name.clone()));
        }
    }
    for p in params.iter_mut().filter(|p| p.trainable) {
        if let Some(g) = grads.get(&p.name) {
            if g.shape() != p.value.shape() {
                return Err(HarnessError::GradientShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
    }
    for p in params.iter_mut().filter(|p| p.trainable) {
        let g = grads.get(&p.name);
        for (k, v) in p.velocity.data_mut().iter_mut().enumerate() {
            *v = momentum * *v + g.map_or(0.0, |g| g.data()[k]);
        }
        for (x, v) in p.value.data_mut().iter_mut().zip(p.velocity.data()) {
            *x -= lr * v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet {
        let mut ps = ParameterSet::default();
        ps.insert("p", Tensor::vector(vec![value]));
        ps
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn plain_step() {
        let mut ps = single(0.0);
        sgd_step(&mut ps, &grad(1.0), 0.1, 0.0).unwrap();
        assert!((ps.get("p").unwrap().value.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut ps = single(2.0);
        ps.get_mut("p").unwrap().velocity = Tensor::vector(vec![0.0]);
        sgd_step(&mut ps, &grad(0.0), 0.1, 0.9).unwrap();
        assert_eq!(ps.get("p").unwrap().value.data(), &[2.0]);

        ps.get_mut("p").unwrap().velocity = Tensor::vector(vec![1.0]);
        sgd_step(&mut ps, &grad(0.0), 0.1, 0.9).unwrap();
        assert!((ps.get("p").unwrap().velocity.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = g, v2 = 0.9 g + g: total displacement lr * g * (1 + 1.9)
        let (lr, g) = (0.05, 0.7);
        let mut ps = single(0.0);
        sgd_step(&mut ps, &grad(g), lr, 0.9).unwrap();
        sgd_step(&mut ps, &grad(g), lr, 0.9).unwrap();
        let moved = -ps.get("p").unwrap().value.data()[0];
        assert!((moved - lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched_and_shapes_checked() {
        let mut ps = single(1.0);
        ps.set_trainable("p", false).unwrap();
        sgd_step(&mut ps, &grad(5.0), 0.1, 0.9).unwrap();
        assert_eq!(ps.get("p").unwrap().value.data(), &[1.0]);

        let mut ps = single(1.0);
        let bad = BTreeMap::from([("p".to_string(), Tensor::vector(vec![1.0, 2.0]))]);
        assert!(matches!(sgd_step(&mut ps, &bad, 0.1, 0.9), Err(HarnessError::GradientShape { .. })));
        let unknown = BTreeMap::from([("q".to_string(), Tensor::vector(vec![1.0]))]);
        assert!(matches!(sgd_step(&mut ps, &unknown, 0.1, 0.9), Err(HarnessError::UnknownGradient(_))));
    }
}

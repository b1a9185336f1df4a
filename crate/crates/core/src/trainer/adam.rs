use crate::error::{Error, Result};
use crate::params::{ParamKind, Parameters};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per learnable tensor, in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: Parameters + ?Sized>(model: &P) -> Self {
        let mut sizes = Vec::new();
        model.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Learnable {
                sizes.push(t.len());
            }
        });
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to the `i`-th learnable
/// tensor; `None` counts as a zero gradient.
pub fn adam_step<P: Parameters + ?Sized>(
    model: &mut P,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} learnable tensors",
            grads.len(),
            state.m.len()
        )));
    }
    let mut checked = Ok(());
    let mut i = 0;
    model.visit("", &mut |name, t, kind| {
        if kind != ParamKind::Learnable || checked.is_err() {
            return;
        }
        if let Some(g) = &grads[i] {
            if g.len() != t.len() {
                checked = Err(Error::shape(format!(
                    "gradient of {name} has {} entries for {}",
                    g.len(),
                    t.len()
                )));
            } else if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                checked = Err(Error::numeric(
                    "adam",
                    format!("gradient of {name}[{bad}] is not finite"),
                ));
            }
        }
        i += 1;
    });
    checked?;

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut i = 0;
    model.visit_mut("", &mut |_, tensor, kind| {
        if kind != ParamKind::Learnable {
            return;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].as_deref();
        for (j, w) in tensor.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
        i += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{join, Linear};
    use crate::tensor::Tensor;

    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
            f(join(prefix, "w"), &self.0, ParamKind::Learnable);
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
            f(join(prefix, "w"), &mut self.0, ParamKind::Learnable);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut l = Linear::identity(3);
        let before = l.clone();
        let mut st = OptimizerState::new(&l);
        adam_step(&mut l, &[Some(vec![0.0; 9]), None], &mut st, 0.1).unwrap();
        assert_eq!(l, before);
        assert!(st.m.iter().chain(&st.v).flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_descends() {
        let mut p = Scalar(Tensor::scalar(1.0));
        let mut st = OptimizerState::new(&p);
        // Scalar Adam written out directly; it overshoots past zero before
        // settling, so the bound is on the end point only.
        let (mut w_ref, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let w = p.0.data()[0];
            adam_step(&mut p, &[Some(vec![2.0 * w])], &mut st, 0.1).unwrap();
            let g = 2.0 * w_ref;
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let (mh, vh) = (m / (1.0 - BETA1.powi(t)), v / (1.0 - BETA2.powi(t)));
            w_ref -= 0.1 * mh / (vh.sqrt() + EPSILON);
            assert!((p.0.data()[0] - w_ref).abs() < 1e-12, "step {t}");
        }
        let w = p.0.data()[0];
        assert!(w.abs() < 0.1, "|w| = {w}");
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Scalar(Tensor::scalar(0.5));
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &[Some(vec![0.3])], &mut st, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let expect = 0.5 - 0.01 * 0.3 / (0.3 + EPSILON);
        assert!((p.0.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Scalar(Tensor::scalar(1.0));
            let mut st = OptimizerState::new(&p);
            for k in 0..10 {
                adam_step(&mut p, &[Some(vec![(k as f64).sin()])], &mut st, 0.05).unwrap();
            }
            p.0.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut l = Linear::identity(2);
        let mut st = OptimizerState::new(&l);
        let err = adam_step(&mut l, &[None, Some(vec![0.0, f64::NAN])], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("bias[1]"), "{err}");
        assert_eq!(st.step, 0);
    }
}

use super::Tensor;
use crate::error::{contract_err, Error, Result};

/// Moment estimates for Adam, one slot per parameter in registration order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on `params`.
///
/// Parameters without a gradient are treated as having a zero gradient. No
/// parameter is touched if any gradient contains a NaN.
pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return contract_err(format!(
            "adam_step: {} parameters but optimizer state for {}",
            params.len(),
            state.m.len()
        ));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, p)| p.grad()).collect();
    for ((name, p), g) in params.iter().zip(&grads) {
        if let Some(g) = g {
            if g.len() != p.numel() {
                return contract_err(format!("adam_step: gradient length mismatch for {name}"));
            }
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::Training(format!("NaN gradient in parameter {name}")));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, ((_, p), g)) in params.iter().zip(&grads).enumerate() {
        let mut data = p.data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..data.len() {
            let gj = g.as_ref().map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: &Tensor) -> Vec<(String, Tensor)> {
        vec![("w".to_string(), t.clone())]
    }

    #[test]
    fn zero_grad_leaves_params() {
        let w = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let ps = named(&w);
        let mut st = AdamState::new(&ps);
        w.data_mut(); // no grad recorded
        for _ in 0..5 {
            adam_step(&ps, &mut st, 0.1).unwrap();
        }
        assert_eq!(w.to_vec(), vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        let ps = named(&w);
        let mut st = AdamState::new(&ps);
        w.sum().backward().unwrap();
        adam_step(&ps, &mut st, 0.001).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −lr / (1 + eps)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((w.item() - expected).abs() < 1e-18);
    }

    #[test]
    fn minimizes_quadratic() {
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        let ps = named(&w);
        let mut st = AdamState::new(&ps);
        let three = Tensor::new(&[1], vec![-3.0]).unwrap();
        for _ in 0..500 {
            w.zero_grad();
            let d = w.add(&three).unwrap();
            d.mul(&d).unwrap().sum().backward().unwrap();
            adam_step(&ps, &mut st, 0.1).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 0.01, "w = {}", w.item());
    }

    #[test]
    fn nan_grad_names_parameter() {
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        let ps = vec![("layer.weight".to_string(), w.clone())];
        let mut st = AdamState::new(&ps);
        w.scale(f64::NAN).sum().backward().unwrap();
        let err = adam_step(&ps, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        assert_eq!(w.item(), 0.0);
        assert_eq!(st.step, 0);
    }
}

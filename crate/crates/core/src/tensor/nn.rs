//! Linear and batch-normalization layers.

use rand::Rng;

use super::{rows_cols, Tensor};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone)]
pub struct LinearParams {
    /// `[in_dim, out_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

impl LinearParams {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-a..=a)).collect();
        LinearParams {
            weight: Tensor::param(&[in_dim, out_dim], w).expect("shape"),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("shape"),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::param(&[in_dim, out_dim], vec![0.0; in_dim * out_dim]).expect("shape"),
            bias: Tensor::param(&[out_dim], vec![0.0; out_dim]).expect("shape"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `y[..., j] = Σ_i x[..., i]·weight[i, j] + bias[j]`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    let (rows, cols) = rows_cols(x.shape());
    if x.rank() == 0 || cols != in_dim {
        return dim_err(format!(
            "linear: input shape {:?} does not end in {in_dim} (weight shape {:?})",
            x.shape(),
            p.weight.shape()
        ));
    }
    if p.bias.shape() != [out_dim] {
        return dim_err(format!("linear: bias shape {:?} vs weight shape {:?}", p.bias.shape(), p.weight.shape()));
    }
    let mut y = vec![0.0; rows * out_dim];
    {
        let (xd, w, b) = (x.data(), p.weight.data(), p.bias.data());
        for r in 0..rows {
            let yr = &mut y[r * out_dim..(r + 1) * out_dim];
            yr.copy_from_slice(&b);
            for i in 0..in_dim {
                let xi = xd[r * in_dim + i];
                if xi == 0.0 {
                    continue;
                }
                let wi = &w[i * out_dim..(i + 1) * out_dim];
                yr.iter_mut().zip(wi).for_each(|(y, w)| *y += xi * w);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank > 0") = out_dim;
    let (xt, wt) = (x.clone(), p.weight.clone());
    Ok(Tensor::from_op(shape, y, "linear", vec![x.clone(), p.weight.clone(), p.bias.clone()], move |g| {
        let (xd, w) = (xt.data(), wt.data());
        let gx = xt.requires_grad().then(|| {
            let mut gx = vec![0.0; rows * in_dim];
            for r in 0..rows {
                let gr = &g[r * out_dim..(r + 1) * out_dim];
                for i in 0..in_dim {
                    let wi = &w[i * out_dim..(i + 1) * out_dim];
                    gx[r * in_dim + i] = gr.iter().zip(wi).map(|(a, b)| a * b).sum();
                }
            }
            gx
        });
        let gw = wt.requires_grad().then(|| {
            let mut gw = vec![0.0; in_dim * out_dim];
            for r in 0..rows {
                let gr = &g[r * out_dim..(r + 1) * out_dim];
                for i in 0..in_dim {
                    let xi = xd[r * in_dim + i];
                    if xi == 0.0 {
                        continue;
                    }
                    gw[i * out_dim..(i + 1) * out_dim].iter_mut().zip(gr).for_each(|(a, g)| *a += xi * g);
                }
            }
            gw
        });
        let mut gb = vec![0.0; out_dim];
        for r in 0..rows {
            gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]).for_each(|(a, g)| *a += g);
        }
        vec![gx, gw, Some(gb)]
    }))
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Running statistics live in non-trainable tensors so they can be
    /// updated through a shared reference and checkpointed like parameters.
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub training: bool,
}

impl BatchNormParams {
    pub fn new(dim: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::param(&[dim], vec![1.0; dim]).expect("shape"),
            beta: Tensor::param(&[dim], vec![0.0; dim]).expect("shape"),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            training: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.numel()
    }
}

/// Batch normalization over the rows of an `[N, dim]` tensor.
///
/// In training mode the batch statistics normalize the input and the running
/// statistics are updated (unbiased variance when `N > 1`); in eval mode the
/// running statistics are used.
pub fn batch_norm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let dim = p.dim();
    let [n, d] = *x.shape() else {
        return dim_err(format!("batch_norm expects [N, {dim}], got {:?}", x.shape()));
    };
    if d != dim || n == 0 {
        return dim_err(format!("batch_norm expects [N>=1, {dim}], got {:?}", x.shape()));
    }
    let xd = x.data();
    let (mean, var) = if p.training {
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(&xd[r * d..(r + 1) * d]).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                let dv = xd[r * d + c] - mean[c];
                var[c] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);

        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let mom = p.momentum;
        p.running_mean.data_mut().iter_mut().zip(&mean).for_each(|(r, m)| *r = (1.0 - mom) * *r + mom * m);
        p.running_var.data_mut().iter_mut().zip(&var).for_each(|(r, v)| *r = (1.0 - mom) * *r + mom * v * unbias);
        (mean, var)
    } else {
        (p.running_mean.to_vec(), p.running_var.to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut xhat = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    {
        let (gm, bt) = (p.gamma.data(), p.beta.data());
        for r in 0..n {
            for c in 0..d {
                let h = (xd[r * d + c] - mean[c]) * inv_std[c];
                xhat[r * d + c] = h;
                y[r * d + c] = gm[c] * h + bt[c];
            }
        }
    }
    drop(xd);
    let training = p.training;
    let gamma = p.gamma.clone();
    Ok(Tensor::from_op(vec![n, d], y, "batch_norm", vec![x.clone(), p.gamma.clone(), p.beta.clone()], move |g| {
        let gm = gamma.data();
        let mut ggamma = vec![0.0; d];
        let mut gbeta = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                ggamma[c] += g[r * d + c] * xhat[r * d + c];
                gbeta[c] += g[r * d + c];
            }
        }
        let mut gx = vec![0.0; n * d];
        if training {
            // dx = inv_std/N · (N·dxhat − Σ dxhat − xhat·Σ(dxhat·xhat)), dxhat = g·gamma
            let nf = n as f64;
            for c in 0..d {
                let sum_dh = gbeta[c] * gm[c];
                let sum_dh_h = ggamma[c] * gm[c];
                for r in 0..n {
                    let dh = g[r * d + c] * gm[c];
                    gx[r * d + c] = inv_std[c] / nf * (nf * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                }
            }
        } else {
            for r in 0..n {
                for c in 0..d {
                    gx[r * d + c] = g[r * d + c] * gm[c] * inv_std[c];
                }
            }
        }
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_passes_input() {
        let p = LinearParams::zeros(2, 2);
        p.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_input_passes_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LinearParams::glorot(2, 2, &mut rng);
        p.bias.data_mut().copy_from_slice(&[3.0, -1.0]);
        let x = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let p = LinearParams::zeros(3, 2);
        let x = Tensor::new(&[4, 2], vec![0.0; 8]).unwrap();
        let msg = linear(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("[4, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LinearParams::glorot(10, 6, &mut rng);
        let a = (6.0f64 / 16.0).sqrt();
        assert!(p.weight.data().iter().all(|w| w.abs() <= a));
        assert!(p.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn standardized_input_is_nearly_unchanged() {
        let x = Tensor::new(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let p = BatchNormParams::new(1);
        let y = batch_norm(&x, &p).unwrap().to_vec();
        for (a, b) in y.iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        // running stats moved toward batch stats (mean 0, unbiased var 4/3)
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let p = BatchNormParams::new(2);
        p.gamma.data_mut().fill(0.0);
        p.beta.data_mut().copy_from_slice(&[0.5, -2.0]);
        let x = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap();
        assert_eq!(batch_norm(&x, &p).unwrap().to_vec(), vec![0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn single_row_batch_is_legal() {
        let p = BatchNormParams::new(3);
        let x = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(batch_norm(&x, &p).unwrap().to_vec(), vec![0.0; 3]);
        assert!(p.running_var.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut p = BatchNormParams::new(1);
        p.training = false;
        p.running_mean.data_mut()[0] = 2.0;
        p.running_var.data_mut()[0] = 4.0 - 1e-5;
        let x = Tensor::new(&[2, 1], vec![2.0, 6.0]).unwrap();
        let y = batch_norm(&x, &p).unwrap().to_vec();
        assert!((y[0]).abs() < 1e-12 && (y[1] - 2.0).abs() < 1e-12);
    }
}

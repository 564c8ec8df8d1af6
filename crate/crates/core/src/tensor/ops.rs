//! Elementwise, reduction and structural operations.

use super::{rows_cols, Tensor};
use crate::error::{contract_err, dim_err, Result};

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!("{op}: shapes {:?} and {:?} differ", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, "add", vec![self.clone(), other.clone()], |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, "mul", vec![self.clone(), other.clone()], move |g| {
            let (ad, bd) = (a.data(), b.data());
            let ga = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
            let gb = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, "scale", vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], "sum", vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// `Σ_i self[i]·weights[i]` with constant weights.
    pub fn dot_const(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return dim_err(format!("dot_const: {} weights for tensor of shape {:?}", weights.len(), self.shape()));
        }
        let s = self.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let w = weights.to_vec();
        Ok(Tensor::from_op(vec![], vec![s], "dot_const", vec![self.clone()], move |g| {
            vec![Some(w.iter().map(|w| w * g[0]).collect())]
        }))
    }

    pub fn relu(&self) -> Tensor {
        let x = self.to_vec();
        let data = x.iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(self.shape().to_vec(), data, "relu", vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())]
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let y: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let saved = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, "sigmoid", vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(&saved).map(|(g, s)| g * s * (1.0 - s)).collect())]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let (rows, cols) = rows_cols(self.shape());
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut y[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        }
        drop(x);
        let saved = y.clone();
        Tensor::from_op(self.shape().to_vec(), y, "softmax", vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let s = &saved[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                for c in 0..cols {
                    gx[r * cols + c] = s[c] * (gr[c] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return dim_err(format!("reshape {:?} -> {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), "reshape", vec![self.clone()], |g| vec![Some(g.to_vec())]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = xs.first() else {
            return contract_err("concat of an empty list");
        };
        let rank = first.rank();
        if axis >= rank {
            return dim_err(format!("concat axis {axis} out of range for rank {rank}"));
        }
        for x in xs {
            let ok = x.rank() == rank
                && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return dim_err(format!(
                    "concat on axis {axis}: shapes {:?} and {:?} disagree",
                    first.shape(),
                    x.shape()
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|x| x.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();

        let mut data = vec![0.0; outer * total];
        let mut off = 0;
        for (x, &w) in xs.iter().zip(&widths) {
            let d = x.data();
            for o in 0..outer {
                data[o * total + off..o * total + off + w].copy_from_slice(&d[o * w..(o + 1) * w]);
            }
            off += w;
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = xs.iter().map(|x| x.shape()[axis]).sum();
        Ok(Tensor::from_op(shape, data, "concat", xs.to_vec(), move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut gx = vec![0.0; outer * w];
                    for o in 0..outer {
                        gx[o * w..(o + 1) * w].copy_from_slice(&g[o * total + off..o * total + off + w]);
                    }
                    off += w;
                    Some(gx)
                })
                .collect()
        }))
    }

    /// Selects entries along the first axis; repeated indices are allowed and
    /// their gradients summed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.shape().first().copied().unwrap_or(0);
        let row: usize = self.shape()[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return contract_err(format!("gather_rows: index {bad} out of range for {n} rows"));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(shape, data, "gather_rows", vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * row];
            for (k, &i) in idx.iter().enumerate() {
                for (a, b) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                    *a += b;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Max over axis 1 of a `[N, K, C]` tensor. Ties go to the lowest k.
    pub fn max_axis1(&self) -> Result<Tensor> {
        let [n, k, c] = *self.shape() else {
            return dim_err(format!("max_axis1 expects rank 3, got {:?}", self.shape()));
        };
        if k == 0 {
            return dim_err("max_axis1 over an empty axis");
        }
        let x = self.data();
        let mut out = vec![0.0; n * c];
        let mut arg = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let mut best = x[i * k * c + ch];
                let mut bi = 0;
                for j in 1..k {
                    let v = x[(i * k + j) * c + ch];
                    if v > best {
                        best = v;
                        bi = j;
                    }
                }
                out[i * c + ch] = best;
                arg[i * c + ch] = bi;
            }
        }
        drop(x);
        Ok(Tensor::from_op(vec![n, c], out, "max_axis1", vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n * k * c];
            for i in 0..n {
                for ch in 0..c {
                    gx[(i * k + arg[i * c + ch]) * c + ch] += g[i * c + ch];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `out[n, :] = Σ_k weights[n, k] · values[n, k, :]`.
    pub fn weighted_sum_k(weights: &Tensor, values: &Tensor) -> Result<Tensor> {
        let [n, k, m] = *values.shape() else {
            return dim_err(format!("weighted_sum_k: values must be [N,K,M], got {:?}", values.shape()));
        };
        if weights.shape() != [n, k] {
            return dim_err(format!(
                "weighted_sum_k: weights {:?} do not match values {:?}",
                weights.shape(),
                values.shape()
            ));
        }
        let (w, v) = (weights.data(), values.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for j in 0..k {
                let wij = w[i * k + j];
                let row = &v[(i * k + j) * m..(i * k + j + 1) * m];
                o.iter_mut().zip(row).for_each(|(o, v)| *o += wij * v);
            }
        }
        drop((w, v));
        let (wt, vt) = (weights.clone(), values.clone());
        Ok(Tensor::from_op(vec![n, m], out, "weighted_sum_k", vec![weights.clone(), values.clone()], move |g| {
            let (w, v) = (wt.data(), vt.data());
            let gw = wt.requires_grad().then(|| {
                let mut gw = vec![0.0; n * k];
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for j in 0..k {
                        let row = &v[(i * k + j) * m..(i * k + j + 1) * m];
                        gw[i * k + j] = gi.iter().zip(row).map(|(a, b)| a * b).sum();
                    }
                }
                gw
            });
            let gv = vt.requires_grad().then(|| {
                let mut gv = vec![0.0; n * k * m];
                for i in 0..n {
                    let gi = &g[i * m..(i + 1) * m];
                    for j in 0..k {
                        let wij = w[i * k + j];
                        gv[(i * k + j) * m..(i * k + j + 1) * m].iter_mut().zip(gi).for_each(|(o, g)| *o = wij * g);
                    }
                }
                gv
            });
            vec![gw, gv]
        }))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(t(&[1], vec![0.0]).sigmoid().to_vec(), vec![0.5]);
    }

    #[test]
    fn concat_columns() {
        let a = t(&[2, 1], vec![1.0, 2.0]);
        let b = t(&[2, 1], vec![3.0, 4.0]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_rows_and_bad_axis() {
        let a = t(&[1, 2], vec![1.0, 2.0]);
        let b = t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(matches!(Tensor::concat(&[a.clone(), b.clone()], 2), Err(crate::Error::Dimension(_))));
        assert!(Tensor::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn concat_backward_splits() {
        let a = t(&[2, 1], vec![1.0, 2.0]);
        let b = t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        c.dot_const(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_repeated_rows_sum_grad() {
        let x = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(x.gather_rows(&[3]).is_err());
    }

    #[test]
    fn max_axis1_routes_grad_to_argmax() {
        let x = t(&[1, 3, 2], vec![1.0, 9.0, 5.0, 2.0, 5.0, 3.0]);
        let y = x.max_axis1().unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 9.0]);
        y.sum().backward().unwrap();
        // tie between k=1 and k=2 on channel 0 goes to the lower index
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1000.0]);
        let y = x.softmax_last().to_vec();
        assert!((y[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((y[5] - 1.0).abs() < 1e-15);
    }
}

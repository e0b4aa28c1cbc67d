use super::{ParamBlock, Tensor};
use crate::error::{Error, Result};

/// Variance guard inside group normalization.
pub const GN_EPS: f64 = 1e-5;

fn finite_or_err(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numerical(format!("{what} produced a non-finite value")))
    }
}

fn weight_dims(weights: &Tensor) -> Result<(usize, usize)> {
    match weights.shape() {
        [i, o] => Ok((*i, *o)),
        s => Err(Error::dim(format!("weights must be 2-D, got shape {s:?}"))),
    }
}

/// `y = x W` for every sample. A 1-D input yields a 1-D output.
pub fn linear_forward(weights: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (in_dim, out_dim) = weight_dims(weights)?;
    let (batch, features) = input.batch_dims()?;
    if features != in_dim {
        return Err(Error::dim(format!(
            "input has {features} features, weights expect {in_dim}"
        )));
    }
    let w = weights.data();
    let x = input.data();
    let mut out = vec![0.0; batch * out_dim];
    for b in 0..batch {
        let row = &mut out[b * out_dim..(b + 1) * out_dim];
        for (i, &xi) in x[b * in_dim..(b + 1) * in_dim].iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (r, &wio) in row.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
                *r += xi * wio;
            }
        }
    }
    let shape = if input.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![batch, out_dim]
    };
    finite_or_err(Tensor::new(shape, out)?, "linear_forward")
}

/// Returns `(dL/dW, dL/dx)` for `y = x W` given `dL/dy`.
pub fn linear_backward(
    weights: &Tensor,
    input: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (in_dim, out_dim) = weight_dims(weights)?;
    let (batch, features) = input.batch_dims()?;
    let (ub, uf) = upstream.batch_dims()?;
    if features != in_dim || ub != batch || uf != out_dim {
        return Err(Error::dim(format!(
            "upstream {:?} does not match forward output of input {:?} through weights {:?}",
            upstream.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let w = weights.data();
    let x = input.data();
    let g = upstream.data();
    let mut gw = vec![0.0; in_dim * out_dim];
    let mut gx = vec![0.0; batch * in_dim];
    for b in 0..batch {
        let gb = &g[b * out_dim..(b + 1) * out_dim];
        for i in 0..in_dim {
            let xi = x[b * in_dim + i];
            let wrow = &w[i * out_dim..(i + 1) * out_dim];
            let gwrow = &mut gw[i * out_dim..(i + 1) * out_dim];
            let mut acc = 0.0;
            for o in 0..out_dim {
                gwrow[o] += xi * gb[o];
                acc += wrow[o] * gb[o];
            }
            gx[b * in_dim + i] = acc;
        }
    }
    let gw = finite_or_err(Tensor::new(vec![in_dim, out_dim], gw)?, "linear_backward")?;
    let gx = finite_or_err(Tensor::new(input.shape().to_vec(), gx)?, "linear_backward")?;
    Ok((gw, gx))
}

/// Values kept from a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    batch: usize,
    channels: usize,
    groups: usize,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl GroupNormCache {
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "{groups} groups do not divide {channels} channels"
        )));
    }
    Ok(())
}

/// Standardizes each contiguous group of channels per sample (no affine).
pub fn group_norm_forward(input: &Tensor, groups: usize, eps: f64) -> Result<(Tensor, GroupNormCache)> {
    let (batch, channels) = input.batch_dims()?;
    check_groups(channels, groups)?;
    let gs = channels / groups;
    let x = input.data();
    let mut normalized = vec![0.0; batch * channels];
    let mut inv_std = vec![0.0; batch * groups];
    for b in 0..batch {
        for g in 0..groups {
            let start = b * channels + g * gs;
            let seg = &x[start..start + gs];
            let mean = seg.iter().sum::<f64>() / gs as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b * groups + g] = is;
            for (n, v) in normalized[start..start + gs].iter_mut().zip(seg) {
                *n = (v - mean) * is;
            }
        }
    }
    let out = finite_or_err(
        Tensor::new(input.shape().to_vec(), normalized.clone())?,
        "group_norm_forward",
    )?;
    Ok((
        out,
        GroupNormCache {
            batch,
            channels,
            groups,
            normalized,
            inv_std,
            shape: input.shape().to_vec(),
        },
    ))
}

pub fn group_norm_backward(cache: &GroupNormCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::dim(format!(
            "upstream {:?} does not match group-norm output {:?}",
            upstream.shape(),
            cache.shape
        )));
    }
    let gs = cache.channels / cache.groups;
    let dy = upstream.data();
    let mut dx = vec![0.0; dy.len()];
    for b in 0..cache.batch {
        for g in 0..cache.groups {
            let start = b * cache.channels + g * gs;
            let n = &cache.normalized[start..start + gs];
            let d = &dy[start..start + gs];
            let mean_d = d.iter().sum::<f64>() / gs as f64;
            let mean_dn = d.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / gs as f64;
            let is = cache.inv_std[b * cache.groups + g];
            for k in 0..gs {
                dx[start + k] = is * (d[k] - mean_d - n[k] * mean_dn);
            }
        }
    }
    finite_or_err(Tensor::new(cache.shape.clone(), dx)?, "group_norm_backward")
}

/// Group normalization with `eps = GN_EPS`, returning the output and the
/// gradient with respect to the input for the given upstream gradient.
pub fn group_norm_forward_backward(
    input: &Tensor,
    groups: usize,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (out, cache) = group_norm_forward(input, groups, GN_EPS)?;
    let grad = group_norm_backward(&cache, upstream)?;
    Ok((out, grad))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.batch_dims()?;
    if labels.is_empty() || batch == 0 {
        return Err(Error::arg("cross-entropy over an empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::dim(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::arg(format!("label {bad} outside [0, {classes})")));
    }
    let z = logits.data();
    let mut grad = vec![0.0; z.len()];
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for b in 0..batch {
        let row = &z[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[labels[b]];
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            let onehot = if c == labels[b] { 1.0 } else { 0.0 };
            grad[b * classes + c] = (p - onehot) * inv_b;
        }
    }
    let grad = finite_or_err(Tensor::new(logits.shape().to_vec(), grad)?, "cross_entropy_loss")?;
    Ok((loss * inv_b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub lr: f64,
    pub weight_decay: f64,
    /// Maximum global L2 norm of the gradient before the step.
    pub clip_norm: f64,
}

impl SgdOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!(
                "clip norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

/// Plain SGD without momentum: `w <- w - lr * (c * g + weight_decay * w)`
/// where `c = min(1, clip_norm / ||g||)` over all gradients jointly.
pub fn sgd_step(params: &mut [ParamBlock], grads: &[Tensor], opts: &SgdOptions) -> Result<()> {
    opts.validate()?;
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameter blocks but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let mut sq = 0.0;
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::dim(format!(
                "layer {} gradient shape {:?} vs parameter shape {:?}",
                p.layer_id,
                g.shape(),
                p.tensor.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Training {
                layer_id: p.layer_id,
            });
        }
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = if norm > opts.clip_norm {
        opts.clip_norm / norm
    } else {
        1.0
    };
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gv) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= opts.lr * (scale * gv + opts.weight_decay * *w);
        }
        if !p.tensor.is_finite() {
            return Err(Error::Training {
                layer_id: p.layer_id,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ParamKind;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(x: &Tensor, w: &Tensor) -> Vec<f64> {
        let (b, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[1];
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            for c in 0..o {
                let mut s = 0.0;
                for k in 0..i {
                    s += x.data()[r * i + k] * w.data()[k * o + c];
                }
                out[r * o + c] = s;
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_diagonal() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(vec![3.0, 5.0]).unwrap();
        assert_eq!(linear_forward(&eye, &x).unwrap().data(), &[3.0, 5.0]);
        let diag = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let ones = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let y = linear_forward(&diag, &ones).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let b = rng.random_range(1..6);
            let i = rng.random_range(1..9);
            let o = rng.random_range(1..7);
            let x = rand_tensor(&mut rng, vec![b, i]);
            let w = rand_tensor(&mut rng, vec![i, o]);
            let y = linear_forward(&w, &x).unwrap();
            for (a, e) in y.data().iter().zip(naive_matmul(&x, &w)) {
                assert_abs_diff_eq!(*a, e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_errors() {
        let w = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            linear_forward(&w, &Tensor::zeros(vec![4])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            linear_backward(&w, &Tensor::zeros(vec![1, 3]), &Tensor::zeros(vec![1, 3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn linear_backward_zero_and_scalar() {
        let w = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let x = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let (gw, gx) = linear_backward(&w, &x, &Tensor::zeros(vec![1, 1])).unwrap();
        assert_eq!(gw.data(), &[0.0]);
        assert_eq!(gx.data(), &[0.0]);
        let (gw, gx) = linear_backward(&w, &x, &Tensor::matrix(1, 1, vec![-3.0]).unwrap()).unwrap();
        assert_eq!(gw.data(), &[-6.0]);
        assert_abs_diff_eq!(gx.data()[0], -2.1, epsilon = 1e-15);
    }

    #[test]
    fn group_norm_degenerate_cases() {
        let x = Tensor::matrix(1, 4, vec![2.0, 2.0, -1.0, -1.0]).unwrap();
        let (y, _) = group_norm_forward(&x, 2, GN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 4.0, -1.0, 0.5, 3.0]).unwrap();
        let (y, _) = group_norm_forward(&x, 1, GN_EPS).unwrap();
        for b in 0..2 {
            let row = &x.data()[b * 3..b * 3 + 3];
            let m = row.iter().sum::<f64>() / 3.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 3.0;
            for c in 0..3 {
                assert_abs_diff_eq!(
                    y.data()[b * 3 + c],
                    (row[c] - m) / (v + GN_EPS).sqrt(),
                    epsilon = 1e-14
                );
            }
        }
        assert!(matches!(
            group_norm_forward(&Tensor::zeros(vec![1, 6]), 4, GN_EPS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let (loss, _) = cross_entropy_loss(&Tensor::zeros(vec![2, 5]), &[0, 3]).unwrap();
        assert_abs_diff_eq!(loss, 5f64.ln(), epsilon = 1e-14);
        let logits = Tensor::matrix(1, 3, vec![0.0, 1e6, 0.0]).unwrap();
        let (loss, grad) = cross_entropy_loss(&logits, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
        assert!(matches!(
            cross_entropy_loss(&Tensor::zeros(vec![0, 3]), &[]),
            Err(Error::Argument(_))
        ));
        assert!(cross_entropy_loss(&Tensor::zeros(vec![1, 3]), &[3]).is_err());
    }

    fn block(v: Vec<f64>) -> ParamBlock {
        ParamBlock::new(1, ParamKind::Bias, Tensor::vector(v).unwrap())
    }

    #[test]
    fn sgd_scalar_step_and_fixed_point() {
        let opts = SgdOptions {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: 10.0,
        };
        let mut p = vec![block(vec![1.0])];
        sgd_step(&mut p, &[Tensor::vector(vec![1.0]).unwrap()], &opts).unwrap();
        assert_abs_diff_eq!(p[0].tensor.data()[0], 0.9, epsilon = 1e-15);

        let mut p = vec![block(vec![0.3, -2.0])];
        sgd_step(&mut p, &[Tensor::zeros(vec![2])], &opts).unwrap();
        assert_eq!(p[0].tensor.data(), &[0.3, -2.0]);
    }

    #[test]
    fn sgd_clips_global_norm() {
        let opts = SgdOptions {
            lr: 1.0,
            weight_decay: 0.0,
            clip_norm: 10.0,
        };
        let mut p = vec![block(vec![0.0, 0.0]), block(vec![0.0])];
        let g = vec![
            Tensor::vector(vec![60.0, 0.0]).unwrap(),
            Tensor::vector(vec![80.0]).unwrap(),
        ];
        sgd_step(&mut p, &g, &opts).unwrap();
        assert_abs_diff_eq!(p[0].tensor.data()[0], -6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1].tensor.data()[0], -8.0, epsilon = 1e-12);
    }

    #[test]
    fn sgd_reports_bad_layer() {
        let opts = SgdOptions {
            lr: 0.1,
            weight_decay: 0.0,
            clip_norm: 1.0,
        };
        let mut p = vec![ParamBlock::new(3, ParamKind::Weight, Tensor::zeros(vec![1, 1]))];
        let g = vec![Tensor {
            shape: vec![1, 1],
            data: vec![f64::INFINITY],
        }];
        assert!(matches!(
            sgd_step(&mut p, &g, &opts),
            Err(Error::Training { layer_id: 3 })
        ));
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let opts = SgdOptions {
            lr: 0.0,
            weight_decay: 0.5,
            clip_norm: 1.0,
        };
        let mut p = vec![block(vec![1.5, -0.25])];
        sgd_step(&mut p, &[Tensor::vector(vec![3.0, 4.0]).unwrap()], &opts).unwrap();
        assert_eq!(p[0].tensor.data(), &[1.5, -0.25]);
    }
}

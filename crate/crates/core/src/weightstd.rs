//! Weight standardization as a pair of projections.
//!
//! Each weight vector `w` (one column of a `(input_dim, output_dim)` weight
//! matrix, i.e. the weights feeding one output neuron) is replaced in the
//! forward pass by
//!
//! ```text
//! w_std = (rho / sigma(w)) * (I - P_1) w
//! ```
//!
//! where `P_1` projects onto the all-ones direction and `sigma` is the
//! population standard deviation. The gradient with respect to the stored
//! (pre-standardized) vector is the upstream gradient passed through two
//! projections, first removing the component along `w_std` and then the mean:
//!
//! ```text
//! dL/dw = (rho / sigma) * (I - P_1) (I - P_{w_std}) dL/dw_std
//! ```
//!
//! Neither projection matrix is ever materialized.

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const DEFAULT_RHO: f64 = 0.001;
pub const DEFAULT_SIGMA_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsConfig {
    /// Normalization scale: standardized vectors have standard deviation `rho`.
    pub rho: f64,
    /// Vectors with `sigma <= sigma_eps` standardize to the zero vector.
    pub sigma_eps: f64,
}

impl Default for WsConfig {
    fn default() -> Self {
        WsConfig {
            rho: DEFAULT_RHO,
            sigma_eps: DEFAULT_SIGMA_EPS,
        }
    }
}

impl WsConfig {
    pub fn new(rho: f64) -> Result<Self> {
        let cfg = WsConfig {
            rho,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::config(format!(
                "sigma_eps must be positive, got {}",
                self.sigma_eps
            )));
        }
        Ok(())
    }
}

/// Forward-pass values cached for the backward projection.
#[derive(Debug, Clone, PartialEq)]
pub struct WsContext {
    pub centered: Vec<f64>,
    pub sigma: f64,
    pub standardized: Vec<f64>,
}

impl WsContext {
    /// True when the vector was constant (up to `sigma_eps`) and was mapped to zero.
    pub fn is_degenerate(&self, cfg: &WsConfig) -> bool {
        self.sigma <= cfg.sigma_eps
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean subtraction, i.e. `(I - P_1) v`.
pub fn center(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let m = mean(v);
    v.iter().map(|x| x - m).collect()
}

/// Population standard deviation.
pub fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Rescales an already-centered vector to standard deviation `rho` using its
/// Euclidean norm: `rho * sqrt(d) / ||c|| * c`. Zero vectors stay zero.
pub fn normalize_centered(centered: &[f64], rho: f64) -> Vec<f64> {
    let norm = dot(centered, centered).sqrt();
    if norm == 0.0 {
        return vec![0.0; centered.len()];
    }
    let k = rho * (centered.len() as f64).sqrt() / norm;
    centered.iter().map(|x| k * x).collect()
}

/// `(I - P_direction) v`: removes the component of `v` along `direction`.
pub fn project_out(v: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    if v.len() != direction.len() {
        return Err(Error::dim(format!(
            "vector length {} vs direction length {}",
            v.len(),
            direction.len()
        )));
    }
    let dd = dot(direction, direction);
    if dd == 0.0 || !dd.is_finite() {
        return Err(Error::arg("projection direction must be a nonzero finite vector"));
    }
    let k = dot(v, direction) / dd;
    Ok(v.iter().zip(direction).map(|(x, d)| x - k * d).collect())
}

pub fn ws_forward(w: &[f64], cfg: &WsConfig) -> Result<(Vec<f64>, WsContext)> {
    if w.len() < 2 {
        return Err(Error::arg(format!(
            "weight standardization needs at least 2 elements, got {}",
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|x| !x.is_finite()) {
        return Err(Error::arg(format!("non-finite weight at index {i}")));
    }
    let centered = center(w);
    let sigma = (dot(&centered, &centered) / w.len() as f64).sqrt();
    let standardized = if sigma <= cfg.sigma_eps {
        vec![0.0; w.len()]
    } else {
        let k = cfg.rho / sigma;
        centered.iter().map(|c| k * c).collect()
    };
    let ctx = WsContext {
        centered,
        sigma,
        standardized: standardized.clone(),
    };
    Ok((standardized, ctx))
}

/// Gradient with respect to the pre-standardized vector, given the gradient
/// with respect to the standardized one.
pub fn ws_backward(upstream: &[f64], ctx: &WsContext, cfg: &WsConfig) -> Result<Vec<f64>> {
    if upstream.len() != ctx.standardized.len() {
        return Err(Error::dim(format!(
            "upstream length {} vs context length {}",
            upstream.len(),
            ctx.standardized.len()
        )));
    }
    if ctx.is_degenerate(cfg) {
        return Ok(vec![0.0; upstream.len()]);
    }
    let k = cfg.rho / ctx.sigma;
    let mut g = project_out(upstream, &ctx.standardized)?;
    let m = mean(&g);
    for x in g.iter_mut() {
        *x = k * (*x - m);
    }
    Ok(g)
}

/// Dense Jacobian-transpose of the filter, `(rho/sigma)(I - P_1)(I - P_{w_std})`.
/// Quadratic in the vector length; intended for checking small cases.
pub fn ws_filter_matrix(ctx: &WsContext, cfg: &WsConfig) -> Vec<Vec<f64>> {
    let d = ctx.standardized.len();
    if ctx.is_degenerate(cfg) {
        return vec![vec![0.0; d]; d];
    }
    let k = cfg.rho / ctx.sigma;
    let s = &ctx.standardized;
    let ss = dot(s, s);
    let inv_d = 1.0 / d as f64;
    // (I - J/d)(I - s s^T/ss) = I - J/d - s s^T/ss, since J s = 0.
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    k * (id - inv_d - s[i] * s[j] / ss)
                })
                .collect()
        })
        .collect()
}

/// Standardizes every column of a `(input_dim, output_dim)` weight matrix.
pub fn standardize_columns(w: &Tensor, cfg: &WsConfig) -> Result<(Tensor, Vec<WsContext>)> {
    let (rows, cols) = matrix_dims(w)?;
    let mut out = vec![0.0; rows * cols];
    let mut ctxs = Vec::with_capacity(cols);
    let data = w.data();
    let mut column = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        let (std, ctx) = ws_forward(&column, cfg)?;
        for r in 0..rows {
            out[r * cols + c] = std[r];
        }
        ctxs.push(ctx);
    }
    Ok((Tensor::new(vec![rows, cols], out)?, ctxs))
}

/// Applies [`ws_backward`] column by column.
pub fn filter_column_grads(grad: &Tensor, ctxs: &[WsContext], cfg: &WsConfig) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(grad)?;
    if ctxs.len() != cols {
        return Err(Error::dim(format!(
            "{} column contexts for a matrix with {cols} columns",
            ctxs.len()
        )));
    }
    let data = grad.data();
    let mut out = vec![0.0; rows * cols];
    let mut column = vec![0.0; rows];
    for (c, ctx) in ctxs.iter().enumerate() {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        let g = ws_backward(&column, ctx, cfg)?;
        for r in 0..rows {
            out[r * cols + c] = g[r];
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("expected a 2-D weight matrix, got shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_rho() -> WsConfig {
        WsConfig::new(1.0).unwrap()
    }

    #[test]
    fn forward_on_small_vector() {
        let (s, ctx) = ws_forward(&[1.0, 2.0, 3.0], &unit_rho()).unwrap();
        assert_eq!(ctx.centered, vec![-1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(ctx.sigma, (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        let e = 1.5f64.sqrt();
        assert_abs_diff_eq!(s[0], -e, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[2], e, epsilon = 1e-12);
    }

    #[test]
    fn constant_vector_maps_to_zero() {
        let cfg = WsConfig::default();
        let (s, ctx) = ws_forward(&[4.2, 4.2, 4.2], &cfg).unwrap();
        assert_eq!(s, vec![0.0; 3]);
        assert!(ctx.is_degenerate(&cfg));
        assert_eq!(ws_backward(&[1.0, -2.0, 0.5], &ctx, &cfg).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn short_vector_rejected() {
        assert!(matches!(
            ws_forward(&[1.0], &WsConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn backward_hand_projection() {
        // w = [1, 2, 3] with rho chosen so that rho / sigma = 1.
        let cfg = WsConfig::new((2.0f64 / 3.0).sqrt()).unwrap();
        let (_, ctx) = ws_forward(&[1.0, 2.0, 3.0], &cfg).unwrap();
        let g = ws_backward(&[1.0, 0.0, 0.0], &ctx, &cfg).unwrap();
        assert_abs_diff_eq!(g[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], -1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_kills_standardized_and_constant_directions() {
        let cfg = WsConfig::default();
        let (s, ctx) = ws_forward(&[0.3, -1.2, 2.5, 0.1], &cfg).unwrap();
        let along: Vec<f64> = s.iter().map(|x| 7.0 * x).collect();
        for v in ws_backward(&along, &ctx, &cfg).unwrap() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
        for v in ws_backward(&[2.0; 4], &ctx, &cfg).unwrap() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn project_out_cases() {
        assert_eq!(project_out(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(project_out(&[0.0, 3.0], &[2.0, 0.0]).unwrap(), vec![0.0, 3.0]);
        let z = project_out(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(z[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-15);
        assert!(matches!(project_out(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::Argument(_))));
        assert!(matches!(project_out(&[1.0], &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_subtraction_is_projection_onto_ones_complement() {
        let v = [0.5, -2.0, 3.25, 1.0, 0.0];
        let p = project_out(&v, &[1.0; 5]).unwrap();
        for (a, b) in center(&v).iter().zip(&p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn filter_matrix_matches_sequential_projections() {
        let cfg = WsConfig::new(0.7).unwrap();
        let (_, ctx) = ws_forward(&[0.2, -0.4, 1.1, 0.9, -1.5], &cfg).unwrap();
        let m = ws_filter_matrix(&ctx, &cfg);
        let up = [0.3, -0.1, 0.8, 2.0, -0.6];
        let seq = ws_backward(&up, &ctx, &cfg).unwrap();
        for i in 0..5 {
            let dense: f64 = (0..5).map(|j| m[i][j] * up[j]).sum();
            assert_abs_diff_eq!(dense, seq[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn columns_are_standardized_independently() {
        let w = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let (s, ctxs) = standardize_columns(&w, &unit_rho()).unwrap();
        assert_eq!(ctxs.len(), 2);
        assert!(ctxs[1].sigma == 0.0);
        let d = s.data();
        assert_abs_diff_eq!(d[0], -(1.5f64.sqrt()), epsilon = 1e-12);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[5], 0.0);
    }
}

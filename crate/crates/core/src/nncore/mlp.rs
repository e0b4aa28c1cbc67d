use std::collections::BTreeSet;

use rand::Rng;

use super::layers::{
    cross_entropy_loss, group_norm_backward, group_norm_forward, linear_backward, linear_forward,
    GroupNormCache, GN_EPS,
};
use super::{ParamBlock, ParamKind, Tensor};
use crate::error::{Error, Result};
use crate::weightstd::{filter_column_grads, standardize_columns, WsConfig, WsContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Fully connected classifier: linear layers `1..=L`, hidden layers followed
/// by optional group norm (with per-channel scale and shift) and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub use_group_norm: bool,
    pub groups: usize,
    /// Layer ids whose weights are standardized in the forward pass.
    pub ws_layers: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSlots {
    weight: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
}

struct LayerTape {
    input: Tensor,
    effective_weight: Tensor,
    ws: Option<Vec<WsContext>>,
    gn: Option<GroupNormCache>,
    output: Tensor,
}

impl ModelSpec {
    /// relu MLP with group norm (8 groups) and WS on every hidden layer.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(classes);
        ModelSpec {
            layer_sizes,
            activation: Activation::Relu,
            use_group_norm: true,
            groups: 8,
            ws_layers: (1..=hidden.len()).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::config(format!(
                "layer sizes must list at least input and output widths, all positive: {:?}",
                self.layer_sizes
            )));
        }
        let last = self.num_layers();
        for &l in &self.ws_layers {
            if l == 0 || l > last {
                return Err(Error::config(format!("ws layer {l} outside 1..={last}")));
            }
            if l == last {
                return Err(Error::config("the classifier layer cannot use weight standardization"));
            }
            if self.layer_sizes[l - 1] < 2 {
                return Err(Error::config(format!(
                    "ws layer {l} has fan-in {}, needs at least 2",
                    self.layer_sizes[l - 1]
                )));
            }
        }
        if self.use_group_norm {
            for &w in &self.layer_sizes[1..last] {
                if self.groups == 0 || w % self.groups != 0 {
                    return Err(Error::config(format!(
                        "{} groups do not divide hidden width {w}",
                        self.groups
                    )));
                }
            }
        }
        Ok(())
    }

    fn slots(&self) -> Vec<LayerSlots> {
        let last = self.num_layers();
        let mut next = 0;
        (1..=last)
            .map(|l| {
                let weight = next;
                next += 1;
                let normed = self.use_group_norm && l < last;
                let bias = (!normed).then(|| {
                    next += 1;
                    next - 1
                });
                let norm = normed.then(|| {
                    next += 2;
                    (next - 2, next - 1)
                });
                LayerSlots { weight, bias, norm }
            })
            .collect()
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, unit norm scale.
    /// Layers followed by group norm carry no bias: the norm shift takes its
    /// place, and a bias would dwarf standardized weights of scale `rho`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<ParamBlock>> {
        self.validate()?;
        let last = self.num_layers();
        let mut params = Vec::new();
        for l in 1..=last {
            let (fan_in, fan_out) = (self.layer_sizes[l - 1], self.layer_sizes[l]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(ParamBlock::new(l, ParamKind::Weight, Tensor::matrix(fan_in, fan_out, w)?));
            if self.use_group_norm && l < last {
                params.push(ParamBlock::new(l, ParamKind::Norm, Tensor::vector(vec![1.0; fan_out])?));
                params.push(ParamBlock::new(l, ParamKind::Norm, Tensor::zeros(vec![fan_out])));
            } else {
                params.push(ParamBlock::new(l, ParamKind::Bias, Tensor::zeros(vec![fan_out])));
            }
        }
        Ok(params)
    }

    fn check_params(&self, params: &[ParamBlock]) -> Result<Vec<LayerSlots>> {
        let slots = self.slots();
        let expected = slots
            .iter()
            .map(|s| 1 + usize::from(s.bias.is_some()) + 2 * usize::from(s.norm.is_some()))
            .sum::<usize>();
        if params.len() != expected {
            return Err(Error::dim(format!(
                "model expects {expected} parameter blocks, got {}",
                params.len()
            )));
        }
        for (l, s) in slots.iter().enumerate() {
            let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let bias_ok = s.bias.is_none_or(|b| params[b].tensor.shape() == [o]);
            if params[s.weight].tensor.shape() != [i, o] || !bias_ok {
                return Err(Error::dim(format!("layer {} parameter shapes do not match spec", l + 1)));
            }
        }
        Ok(slots)
    }

    fn run_forward(
        &self,
        params: &[ParamBlock],
        input: &Tensor,
        ws: &WsConfig,
    ) -> Result<(Tensor, Vec<LayerTape>)> {
        let slots = self.check_params(params)?;
        let last = self.num_layers();
        let (batch, features) = input.batch_dims()?;
        if features != self.layer_sizes[0] {
            return Err(Error::dim(format!(
                "input has {features} features, model expects {}",
                self.layer_sizes[0]
            )));
        }
        let mut x = Tensor::new(vec![batch, features], input.data().to_vec())?;
        let mut tape = Vec::with_capacity(last);
        for (idx, s) in slots.iter().enumerate() {
            let l = idx + 1;
            let weight = &params[s.weight].tensor;
            let (effective_weight, ctxs) = if self.ws_layers.contains(&l) {
                let (w, c) = standardize_columns(weight, ws)?;
                (w, Some(c))
            } else {
                (weight.clone(), None)
            };
            let mut z = linear_forward(&effective_weight, &x)?;
            let out_dim = self.layer_sizes[l];
            if let Some(bi) = s.bias {
                for row in z.data_mut().chunks_mut(out_dim) {
                    for (v, b) in row.iter_mut().zip(params[bi].tensor.data()) {
                        *v += b;
                    }
                }
            }
            let mut gn = None;
            if l < last {
                if let Some((gi, bi)) = s.norm {
                    let (n, cache) = group_norm_forward(&z, self.groups, GN_EPS)?;
                    let gamma = params[gi].tensor.data();
                    let beta = params[bi].tensor.data();
                    z = n;
                    for row in z.data_mut().chunks_mut(out_dim) {
                        for c in 0..out_dim {
                            row[c] = row[c] * gamma[c] + beta[c];
                        }
                    }
                    gn = Some(cache);
                }
                for v in z.data_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            tape.push(LayerTape {
                input: x,
                effective_weight,
                ws: ctxs,
                gn,
                output: z.clone(),
            });
            x = z;
        }
        Ok((x, tape))
    }

    /// Logits for a `(batch, input)` matrix or a single feature vector.
    pub fn forward(&self, params: &[ParamBlock], input: &Tensor, ws: &WsConfig) -> Result<Tensor> {
        Ok(self.run_forward(params, input, ws)?.0)
    }

    /// Mean cross-entropy on the batch and one gradient per parameter block,
    /// in the same order as `params`.
    pub fn loss_and_grads(
        &self,
        params: &[ParamBlock],
        input: &Tensor,
        labels: &[usize],
        ws: &WsConfig,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (logits, tape) = self.run_forward(params, input, ws)?;
        let (loss, mut upstream) = cross_entropy_loss(&logits, labels)?;
        let slots = self.slots();
        let last = self.num_layers();
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        for l in (1..=last).rev() {
            let t = &tape[l - 1];
            let s = slots[l - 1];
            let out_dim = self.layer_sizes[l];
            if l < last {
                for (g, &y) in upstream.data_mut().iter_mut().zip(t.output.data()) {
                    *g *= self.activation.derivative_from_output(y);
                }
                if let (Some((gi, bi)), Some(cache)) = (s.norm, t.gn.as_ref()) {
                    let gamma = params[gi].tensor.data().to_vec();
                    let normalized = cache.normalized();
                    let mut dgamma = vec![0.0; out_dim];
                    let mut dbeta = vec![0.0; out_dim];
                    for (row, nrow) in upstream
                        .data_mut()
                        .chunks_mut(out_dim)
                        .zip(normalized.chunks(out_dim))
                    {
                        for c in 0..out_dim {
                            dgamma[c] += row[c] * nrow[c];
                            dbeta[c] += row[c];
                            row[c] *= gamma[c];
                        }
                    }
                    grads[gi] = Tensor::vector(dgamma)?;
                    grads[bi] = Tensor::vector(dbeta)?;
                    upstream = group_norm_backward(cache, &upstream)?;
                }
            }
            if let Some(bi) = s.bias {
                let mut dbias = vec![0.0; out_dim];
                for row in upstream.data().chunks(out_dim) {
                    for (d, g) in dbias.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                grads[bi] = Tensor::vector(dbias)?;
            }
            let (gw, gx) = linear_backward(&t.effective_weight, &t.input, &upstream)?;
            grads[s.weight] = match &t.ws {
                Some(ctxs) => filter_column_grads(&gw, ctxs, ws)?,
                None => gw,
            };
            upstream = gx;
        }
        Ok((loss, grads))
    }
}

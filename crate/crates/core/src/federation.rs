//! Server and client sides of a federated round with quantized uplink.
//!
//! Per round `t` the server samples clients, broadcasts `(W_g, s_g)` at full
//! precision, and every sampled client trains locally with (optionally
//! weight-standardized) SGD, then sends its update `dW = W_local - W_g`:
//! weight matrices are divided by the global layer scale `s_g[l]` and
//! quantized, biases and norm parameters travel as `f32`, and the layer-wise
//! standard deviations `s_i` of the raw update ride along. The server
//! dequantizes, averages with weights proportional to sample counts, applies
//! the result, and mixes the scales:
//!
//! ```text
//! s_g <- (1 - beta) * s_g + beta * mean_i(s_i)
//! ```
//!
//! Quantized payloads are serialized for byte accounting only; aggregation
//! consumes the in-memory `f64` values, so full-precision runs stay exact.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::danuq::{
    dequantize, optimize_levels, quantize, uniform_quantize_absmax, QuantLevels, QuantizedBlock,
    SUPPORTED_BITS,
};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nncore::{sgd_step, ModelSpec, ParamBlock, ParamKind, SgdOptions, Tensor};
use crate::weightstd::{population_std, WsConfig};

/// Bit-widths that mixed allocation draws from.
pub const BIT_PALETTE: [u8; 3] = [1, 2, 4];

/// Per-layer standard deviations of weight updates, indexed by `layer_id - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector(pub Vec<f64>);

impl ScalingVector {
    pub fn zeros(layers: usize) -> Self {
        ScalingVector(vec![0.0; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Updates travel as `f32` and are aggregated in `f64` without loss.
    FullPrecision,
    Danuq,
    /// Absmax scaling with stochastic rounding onto evenly spaced levels.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitAllocation {
    Constant(u8),
    /// Fixed per client: `BIT_PALETTE[client_id % 3]`.
    Fba,
    /// Fresh uniform draw from the palette for every `(round, client)`.
    Dba,
}

/// Scale used to reconstruct DANUQ codes on the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequantScale {
    /// The client's own layer std `s_i[l]`.
    Local,
    /// The scale the client divided by before encoding (normally `s_g[l]`).
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// `sum_i h_i dW_i` with `h_i = n_i / sum_j n_j` over participants.
    Weighted,
    /// Plain sum of participant updates.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub model: ModelSpec,
    pub ws: WsConfig,
    pub participation_rate: f64,
    pub local_epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta: f64,
    pub quant: QuantMode,
    pub alloc: BitAllocation,
    pub dequant_scale: DequantScale,
    pub aggregate: Aggregation,
    pub seed: u64,
    /// Cap on concurrently trained clients; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ws.validate()?;
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.iterations_per_epoch == 0 {
            return Err(Error::config("iterations per epoch must be positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config(format!("lr decay must be positive, got {}", self.lr_decay)));
        }
        SgdOptions {
            lr: self.lr0,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
        .validate()?;
        if let BitAllocation::Constant(b) = self.alloc {
            if !SUPPORTED_BITS.contains(&b) {
                return Err(Error::config(format!("unsupported constant bit-width {b}")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::config("thread cap must be positive"));
        }
        Ok(())
    }

    pub fn local_steps(&self) -> usize {
        self.local_epochs * self.iterations_per_epoch
    }
}

/// Level tables for each bit-width, built once per run.
#[derive(Debug, Clone)]
pub struct LevelBank {
    tables: Vec<QuantLevels>,
}

impl LevelBank {
    /// Optimized tables for 1, 2 and 4 bits.
    pub fn optimized(pin_zero: bool) -> Result<Self> {
        Ok(LevelBank {
            tables: SUPPORTED_BITS
                .iter()
                .map(|&b| optimize_levels(b, pin_zero))
                .collect::<Result<_>>()?,
        })
    }

    /// Replaces (or adds) the table for `table.bits()`.
    pub fn insert(&mut self, table: QuantLevels) {
        self.tables.retain(|t| t.bits() != table.bits());
        self.tables.push(table);
    }

    pub fn get(&self, bits: u8) -> Result<&QuantLevels> {
        self.tables
            .iter()
            .find(|t| t.bits() == bits)
            .ok_or_else(|| Error::config(format!("no level table for {bits} bits")))
    }
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub params: Vec<ParamBlock>,
    pub scales: ScalingVector,
    /// False until the first round has produced client scales.
    pub scales_initialized: bool,
    pub lr0: f64,
    pub lr_decay: f64,
    /// `lr0 * lr_decay^round`, used by the next round's clients.
    pub lr: f64,
    pub seed: u64,
}

impl GlobalState {
    pub fn new(params: Vec<ParamBlock>, lr0: f64, lr_decay: f64, seed: u64) -> Self {
        let layers = params.iter().filter(|p| p.kind == ParamKind::Weight).count();
        GlobalState {
            round: 0,
            params,
            scales: ScalingVector::zeros(layers),
            scales_initialized: false,
            lr0,
            lr_decay,
            lr: lr0,
            seed,
        }
    }

    /// Starts from known global scales instead of bootstrapping them.
    pub fn with_scales(mut self, scales: ScalingVector) -> Self {
        self.scales = scales;
        self.scales_initialized = true;
        self
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(round as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: Dataset,
}

/// Everything a client sends back for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub bits: u8,
    pub quant: QuantMode,
    /// One block per weight matrix (empty in full-precision mode).
    pub quantized_update: Vec<QuantizedBlock>,
    pub local_scales: ScalingVector,
    /// Updates of every block that is not quantized, in model order.
    pub full_precision_blocks: Vec<ParamBlock>,
    pub sample_count: usize,
    pub uplink_bytes: usize,
    /// Layers encoded with the client's own scale because `s_g` was unavailable.
    pub scale_fallback_layers: Vec<usize>,
    pub train_loss: f64,
}

impl ClientReport {
    /// Whether the scaling vector is part of the uplink (DANUQ only).
    pub fn transmits_scales(&self) -> bool {
        self.quant == QuantMode::Danuq
    }

    /// Uplink byte stream: quantized blocks in the wire format, then the
    /// scaling vector as `f32` LE (DANUQ only), then every full-precision
    /// block as raw `f32` LE values.
    pub fn to_wire(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for b in &self.quantized_update {
            b.write_to(&mut out)?;
        }
        if self.transmits_scales() {
            for s in &self.local_scales.0 {
                out.extend_from_slice(&(*s as f32).to_le_bytes());
            }
        }
        for p in &self.full_precision_blocks {
            for v in p.tensor.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Bytes spent on weight-matrix values alone.
    pub fn weight_payload_bytes(&self) -> usize {
        let quantized: usize = self.quantized_update.iter().map(|b| b.payload_bytes()).sum();
        let fp_weights: usize = self
            .full_precision_blocks
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.len() * 4)
            .sum();
        quantized + fp_weights
    }
}

/// Uplink size from the layout alone: per quantized layer an 11-byte header
/// plus `ceil(count * bits / 8)` code bytes, `4 * L` for the scaling vector
/// when sent, and `4` bytes per full-precision value.
pub fn account_bytes(report: &ClientReport) -> usize {
    let quantized: usize = report
        .quantized_update
        .iter()
        .map(|b| crate::danuq::WIRE_HEADER_BYTES + (b.count * b.bits as usize).div_ceil(8))
        .sum();
    let scales = if report.transmits_scales() {
        report.local_scales.len() * 4
    } else {
        0
    };
    let fp: usize = report.full_precision_blocks.iter().map(|p| p.len() * 4).sum();
    quantized + scales + fp
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SAMPLING: u64 = 1;
const STREAM_CLIENT: u64 = 2;
const STREAM_BITS: u64 = 3;
const STREAM_INIT: u64 = 4;

/// Independent seed for a `(purpose, round, id)` triple of one run.
fn stream_seed(seed: u64, stream: u64, round: usize, id: usize) -> u64 {
    let mut h = splitmix64(seed ^ stream.wrapping_mul(0xA076_1D64_78BD_642F));
    h = splitmix64(h ^ round as u64);
    splitmix64(h ^ (id as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

/// Private RNG of client `client_id` in `round`.
pub fn client_rng(seed: u64, round: usize, client_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_CLIENT, round, client_id))
}

/// RNG used to initialize the global model of a run.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_INIT, 0, 0))
}

pub fn assign_bits(alloc: BitAllocation, round: usize, client_id: usize, seed: u64) -> u8 {
    match alloc {
        BitAllocation::Constant(b) => b,
        BitAllocation::Fba => BIT_PALETTE[client_id % BIT_PALETTE.len()],
        BitAllocation::Dba => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_BITS, round, client_id));
            BIT_PALETTE[rng.random_range(0..BIT_PALETTE.len())]
        }
    }
}

/// `max(1, round(rate * N))` distinct client ids, ascending.
pub fn sample_clients(num_clients: usize, rate: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::config("empty client pool"));
    }
    let m = ((rate * num_clients as f64).round() as usize).clamp(1, num_clients);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_SAMPLING, round, 0));
    let mut ids = index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Mini-batch index lists for local training: every epoch reshuffles the
/// shard and cuts `iterations_per_epoch` batches of `ceil(n / iterations)`
/// samples, wrapping around the permutation when needed.
pub fn local_batches<R: Rng + ?Sized>(
    n: usize,
    epochs: usize,
    iterations_per_epoch: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let bs = n.div_ceil(iterations_per_epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut batches = Vec::with_capacity(epochs * iterations_per_epoch);
    for _ in 0..epochs {
        perm.shuffle(rng);
        for it in 0..iterations_per_epoch {
            batches.push((0..bs).map(|j| perm[(it * bs + j) % n]).collect());
        }
    }
    batches
}

/// `(1 - beta) * s_g + beta * mean(client_scales)`, elementwise; the mean
/// is summed in the given order (callers pass clients sorted by id).
pub fn update_global_scales(
    s_g: &ScalingVector,
    client_scales: &[&ScalingVector],
    beta: f64,
) -> Result<ScalingVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta must be in [0, 1], got {beta}")));
    }
    if client_scales.is_empty() {
        return Ok(s_g.clone());
    }
    let l = s_g.len();
    if let Some(bad) = client_scales.iter().find(|s| s.len() != l) {
        return Err(Error::dim(format!(
            "client scaling vector of length {} vs global {l}",
            bad.len()
        )));
    }
    let m = client_scales.len() as f64;
    Ok(ScalingVector(
        (0..l)
            .map(|k| {
                let sum: f64 = client_scales.iter().map(|s| s.0[k]).sum();
                (1.0 - beta) * s_g.0[k] + beta * (sum / m)
            })
            .collect(),
    ))
}

/// `sum_i weights[i] * updates[i]` block by block.
pub fn aggregate_updates(updates: &[Vec<Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::config("no updates to aggregate"))?;
    if updates.len() != weights.len() {
        return Err(Error::dim("one weight per update required"));
    }
    let mut acc: Vec<Vec<f64>> = first.iter().map(|t| vec![0.0; t.len()]).collect();
    for (u, &h) in updates.iter().zip(weights) {
        if u.len() != acc.len() {
            return Err(Error::dim("updates have different block counts"));
        }
        for (a, t) in acc.iter_mut().zip(u) {
            if a.len() != t.len() {
                return Err(Error::dim("updates have different block sizes"));
            }
            for (x, v) in a.iter_mut().zip(t.data()) {
                *x += h * v;
            }
        }
    }
    first
        .iter()
        .zip(acc)
        .map(|(t, a)| Tensor::new(t.shape().to_vec(), a))
        .collect()
}

/// Runs local training on one client and packages its update.
#[allow(clippy::too_many_arguments)]
pub fn client_local_training<R: Rng + ?Sized>(
    global_params: &[ParamBlock],
    global_scales: Option<&ScalingVector>,
    client: &Client,
    bits: u8,
    lr: f64,
    cfg: &FedConfig,
    levels: &LevelBank,
    rng: &mut R,
) -> Result<ClientReport> {
    if client.data.is_empty() {
        return Err(Error::config(format!("client {} has no data", client.id)));
    }
    if cfg.quant != QuantMode::FullPrecision && !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::config(format!("unsupported bit-width {bits}")));
    }
    let opts = SgdOptions {
        lr,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
    };
    let mut params = global_params.to_vec();
    let mut loss_sum = 0.0;
    let batches = local_batches(client.data.len(), cfg.local_epochs, cfg.iterations_per_epoch, rng);
    for batch in &batches {
        let x = client.data.features.gather_rows(batch)?;
        let y: Vec<usize> = batch.iter().map(|&i| client.data.labels[i]).collect();
        let (loss, grads) = cfg.model.loss_and_grads(&params, &x, &y, &cfg.ws)?;
        loss_sum += loss;
        sgd_step(&mut params, &grads, &opts)?;
    }
    let train_loss = if batches.is_empty() {
        0.0
    } else {
        loss_sum / batches.len() as f64
    };

    let deltas: Vec<ParamBlock> = params
        .iter()
        .zip(global_params)
        .map(|(p, g)| {
            let d = p.tensor.data().iter().zip(g.tensor.data()).map(|(a, b)| a - b).collect();
            Ok(ParamBlock::new(p.layer_id, p.kind, Tensor::new(p.tensor.shape().to_vec(), d)?))
        })
        .collect::<Result<_>>()?;

    let local_scales = ScalingVector(
        deltas
            .iter()
            .filter(|d| d.kind == ParamKind::Weight)
            .map(|d| population_std(d.tensor.data()))
            .collect(),
    );

    let mut quantized_update = Vec::new();
    let mut full_precision_blocks = Vec::new();
    let mut scale_fallback_layers = Vec::new();
    for d in deltas {
        if d.kind != ParamKind::Weight || cfg.quant == QuantMode::FullPrecision {
            full_precision_blocks.push(d);
            continue;
        }
        let values = d.tensor.data();
        let mut block = match cfg.quant {
            QuantMode::Danuq => {
                let table = levels.get(bits)?;
                let s_i = local_scales.0[d.layer_id - 1];
                let s_g = global_scales.map_or(0.0, |s| s.0[d.layer_id - 1]);
                if s_g > 0.0 {
                    quantize(values, s_g, table)?
                } else if s_i > 0.0 {
                    scale_fallback_layers.push(d.layer_id);
                    quantize(values, s_i, table)?
                } else {
                    // Nothing to scale by: the update is all zeros.
                    scale_fallback_layers.push(d.layer_id);
                    let mut b = quantize(values, 1.0, table)?;
                    b.scale_used = 0.0;
                    b
                }
            }
            QuantMode::Uniform => uniform_quantize_absmax(values, bits, rng)?.0,
            QuantMode::FullPrecision => unreachable!(),
        };
        block.layer_id = d.layer_id;
        quantized_update.push(block);
    }

    let mut report = ClientReport {
        client_id: client.id,
        bits,
        quant: cfg.quant,
        quantized_update,
        local_scales,
        full_precision_blocks,
        sample_count: client.data.len(),
        uplink_bytes: 0,
        scale_fallback_layers,
        train_loss,
    };
    report.uplink_bytes = report.to_wire()?.len();
    Ok(report)
}

/// Server-side reconstruction of a report into one update tensor per model
/// block. Returns the update and the number of layers zeroed because their
/// reconstruction scale was not positive.
pub fn reconstruct_update(
    report: &ClientReport,
    template: &[ParamBlock],
    levels: &LevelBank,
    rule: DequantScale,
) -> Result<(Vec<Tensor>, usize)> {
    let mut q = report.quantized_update.iter();
    let mut fp = report.full_precision_blocks.iter();
    let mut out = Vec::with_capacity(template.len());
    let mut degenerate = 0;
    for block in template {
        let shape = block.tensor.shape().to_vec();
        if block.kind == ParamKind::Weight && report.quant != QuantMode::FullPrecision {
            let qb = q
                .next()
                .ok_or_else(|| Error::Decoding(format!("client {} sent too few blocks", report.client_id)))?;
            if qb.layer_id != block.layer_id || qb.count != block.len() {
                return Err(Error::Decoding(format!(
                    "client {} block for layer {} does not match the model",
                    report.client_id, qb.layer_id
                )));
            }
            let (scale, table) = match report.quant {
                QuantMode::Danuq => {
                    let s = match rule {
                        DequantScale::Local => report.local_scales.0[block.layer_id - 1],
                        DequantScale::Global => qb.scale_used,
                    };
                    (s, levels.get(qb.bits)?.clone())
                }
                _ => (qb.scale_used, QuantLevels::uniform(qb.bits)?),
            };
            if !(scale > 0.0) {
                if qb.decode_codes()?.iter().any(|&c| table.levels()[c as usize] != 0.0) || scale < 0.0 {
                    log::warn!(
                        "client {} layer {}: reconstruction scale {scale} is not positive; update treated as zero",
                        report.client_id,
                        block.layer_id
                    );
                }
                degenerate += 1;
                out.push(Tensor::zeros(shape));
                continue;
            }
            out.push(Tensor::new(shape, dequantize(qb, scale, &table)?)?);
        } else {
            let p = fp
                .next()
                .ok_or_else(|| Error::Decoding(format!("client {} sent too few blocks", report.client_id)))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Decoding(format!(
                    "client {} full-precision block shape mismatch",
                    report.client_id
                )));
            }
            out.push(p.tensor.clone());
        }
    }
    Ok((out, degenerate))
}

/// Round summary produced by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Mean local training loss over participants.
    pub train_loss: f64,
    pub uplink_bytes: usize,
    pub weight_payload_bytes: usize,
    /// Participants that used 1, 2 and 4 bits.
    pub bits_histogram: [usize; 3],
    pub scale_fallbacks: usize,
    pub degenerate_scales: usize,
}

/// Server: client pool, configuration and level tables for one run.
pub struct Simulator {
    cfg: FedConfig,
    clients: Vec<Client>,
    levels: LevelBank,
    pool: Option<rayon::ThreadPool>,
}

impl Simulator {
    pub fn new(cfg: FedConfig, clients: Vec<Client>, levels: LevelBank) -> Result<Self> {
        cfg.validate()?;
        if clients.is_empty() {
            return Err(Error::config("empty client pool"));
        }
        if let Some(c) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
            return Err(Error::config(format!("client ids must be 0..N in order, found {} at {}", c.1.id, c.0)));
        }
        let pool = match cfg.threads {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Simulator {
            cfg,
            clients,
            levels,
            pool,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn levels(&self) -> &LevelBank {
        &self.levels
    }

    /// Fresh global state with seeded initial parameters.
    pub fn init_state(&self) -> Result<GlobalState> {
        let params = self.cfg.model.init_params(&mut init_rng(self.cfg.seed))?;
        Ok(GlobalState::new(params, self.cfg.lr0, self.cfg.lr_decay, self.cfg.seed))
    }

    /// Executes round `state.round + 1`.
    pub fn run_round(&self, state: &GlobalState) -> Result<(GlobalState, RoundStats)> {
        let round = state.round + 1;
        let participants = sample_clients(
            self.clients.len(),
            self.cfg.participation_rate,
            state.seed,
            round,
        )?;
        if participants.is_empty() {
            return Err(Error::config("no clients sampled"));
        }
        let global_scales = state.scales_initialized.then_some(&state.scales);
        let train = |&id: &usize| -> Result<ClientReport> {
            let bits = assign_bits(self.cfg.alloc, round, id, state.seed);
            let mut rng = client_rng(state.seed, round, id);
            client_local_training(
                &state.params,
                global_scales,
                &self.clients[id],
                bits,
                state.lr,
                &self.cfg,
                &self.levels,
                &mut rng,
            )
        };
        let reports: Vec<ClientReport> = match &self.pool {
            Some(pool) => pool.install(|| participants.par_iter().map(train).collect::<Result<_>>())?,
            None => participants.par_iter().map(train).collect::<Result<_>>()?,
        };

        let mut updates = Vec::with_capacity(reports.len());
        let mut degenerate_scales = 0;
        for r in &reports {
            let (u, d) = reconstruct_update(r, &state.params, &self.levels, self.cfg.dequant_scale)?;
            degenerate_scales += d;
            updates.push(u);
        }
        let weights: Vec<f64> = match self.cfg.aggregate {
            Aggregation::Weighted => {
                let total: usize = reports.iter().map(|r| r.sample_count).sum();
                reports
                    .iter()
                    .map(|r| r.sample_count as f64 / total as f64)
                    .collect()
            }
            Aggregation::Sum => vec![1.0; reports.len()],
        };
        let delta = aggregate_updates(&updates, &weights)?;
        let params = state
            .params
            .iter()
            .zip(&delta)
            .map(|(p, d)| {
                let v = p.tensor.data().iter().zip(d.data()).map(|(w, dv)| w + dv).collect();
                Ok(ParamBlock::new(p.layer_id, p.kind, Tensor::new(p.tensor.shape().to_vec(), v)?))
            })
            .collect::<Result<Vec<_>>>()?;

        let client_scales: Vec<&ScalingVector> = reports.iter().map(|r| &r.local_scales).collect();
        let beta = if state.scales_initialized { self.cfg.beta } else { 1.0 };
        let scales = update_global_scales(&state.scales, &client_scales, beta)?;

        let mut bits_histogram = [0; 3];
        for r in &reports {
            if let Some(k) = BIT_PALETTE.iter().position(|&b| b == r.bits) {
                bits_histogram[k] += 1;
            }
        }
        let stats = RoundStats {
            round,
            participants,
            train_loss: reports.iter().map(|r| r.train_loss).sum::<f64>() / reports.len() as f64,
            uplink_bytes: reports.iter().map(|r| r.uplink_bytes).sum(),
            weight_payload_bytes: reports.iter().map(|r| r.weight_payload_bytes()).sum(),
            bits_histogram,
            scale_fallbacks: reports.iter().map(|r| r.scale_fallback_layers.len()).sum(),
            degenerate_scales,
        };
        let next = GlobalState {
            round,
            params,
            scales,
            scales_initialized: true,
            lr0: state.lr0,
            lr_decay: state.lr_decay,
            lr: state.lr_at(round),
            seed: state.seed,
        };
        Ok((next, stats))
    }
}

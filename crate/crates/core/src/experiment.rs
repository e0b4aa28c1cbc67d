//! Experiment driver: data preparation, per-round evaluation with EMA
//! smoothing, metrics files, the ablation grid and level-table export.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::danuq::{expected_error, optimize_levels, reference_levels, QuantLevels, SUPPORTED_BITS};
use crate::datagen::{dirichlet_partition, iid_partition, load_idx, synth_classification, Dataset, Partition};
use crate::error::{Error, Result};
use crate::federation::{BitAllocation, Client, GlobalState, LevelBank, QuantMode, Simulator, BIT_PALETTE};
use crate::nncore::{ModelSpec, ParamBlock, Tensor};
use crate::weightstd::WsConfig;

pub const METRICS_HEADER: &str =
    "round,train_loss,acc_raw,acc_ema,uplink_bytes,bits_1,bits_2,bits_4,wallclock_ms";

/// Fraction of rows whose largest logit matches the label; ties resolve to
/// the lowest class index.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.batch_dims()?;
    if n == 0 || n != labels.len() {
        return Err(Error::dim(format!("{} labels for {n} logit rows", labels.len())));
    }
    let correct = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / n as f64)
}

pub fn evaluate(model: &ModelSpec, params: &[ParamBlock], test: &Dataset, ws: &WsConfig) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    accuracy_from_logits(&model.forward(params, &test.features, ws)?, &test.labels)
}

/// Exponential moving average seeded with its first observation.
#[derive(Debug, Clone, Copy)]
pub struct Ema {
    smoothing: f64,
    gain: f64,
    value: Option<f64>,
}

impl Ema {
    /// The new-sample weight is `1 - smoothing` rounded to 12 decimals, so a
    /// smoothing of 0.9 weighs samples by exactly `0.1` rather than
    /// `1.0 - 0.9`.
    pub fn new(smoothing: f64) -> Self {
        Ema {
            smoothing,
            gain: ((1.0 - smoothing) * 1e12).round() / 1e12,
            value: None,
        }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => self.smoothing * prev + self.gain * x,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub train_loss: f64,
    pub acc_raw: f64,
    pub acc_ema: f64,
    pub uplink_bytes: usize,
    pub bits_histogram: [usize; 3],
    pub wallclock_ms: u128,
    /// Weight-matrix bytes only; not part of the CSV.
    pub weight_payload_bytes: usize,
}

impl RoundRow {
    /// CSV line; floats use the shortest text that parses back exactly.
    pub fn csv_line(&self) -> String {
        let [b1, b2, b4] = self.bits_histogram;
        format!(
            "{},{},{},{},{},{b1},{b2},{b4},{}",
            self.round, self.train_loss, self.acc_raw, self.acc_ema, self.uplink_bytes, self.wallclock_ms
        )
    }
}

/// Train/test data and the client split for one configuration.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
}

impl PreparedData {
    pub fn clients(&self) -> Result<Vec<Client>> {
        self.partition
            .client_shards
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                Ok(Client {
                    id,
                    data: self.train.subset(shard)?,
                })
            })
            .collect()
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train, test) = match cfg.dataset {
        DataSource::Synthetic => {
            synth_classification(cfg.classes, cfg.dim, cfg.per_class, cfg.spread, cfg.data_seed)?
                .split_stratified(cfg.test_fraction, cfg.data_seed)?
        }
        DataSource::Idx => {
            let full = load_idx(&cfg.train_images, &cfg.train_labels)?;
            if cfg.test_images.as_os_str().is_empty() {
                full.split_stratified(cfg.test_fraction, cfg.data_seed)?
            } else {
                (full, load_idx(&cfg.test_images, &cfg.test_labels)?)
            }
        }
    };
    if train.num_classes != cfg.classes || test.num_classes != cfg.classes {
        return Err(Error::config(format!(
            "key `classes`: configured {} but data has {}",
            cfg.classes, train.num_classes
        )));
    }
    let partition = match cfg.alpha {
        Some(alpha) => dirichlet_partition(&train.labels, cfg.num_clients, alpha, cfg.seed)?,
        None => iid_partition(train.len(), cfg.num_clients, cfg.seed)?,
    };
    Ok(PreparedData { train, test, partition })
}

/// Hex SHA-256 of the shard lists, for checking that runs share a split.
pub fn partition_hash(p: &Partition) -> String {
    let mut h = Sha256::new();
    for shard in &p.client_shards {
        h.update((shard.len() as u64).to_le_bytes());
        for &i in shard {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Level tables for a run: optimized tables under the configured zero pin.
pub fn level_bank(cfg: &RunConfig) -> Result<LevelBank> {
    LevelBank::optimized(cfg.pin_zero)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<RoundRow>,
    pub final_state: GlobalState,
    pub partition_hash: String,
}

impl RunOutcome {
    pub fn final_acc_ema(&self) -> Option<f64> {
        self.rows.last().map(|r| r.acc_ema)
    }
}

/// Runs all configured rounds, handing each row to `sink` as it is produced.
pub fn run_rounds(
    cfg: &RunConfig,
    data: &PreparedData,
    mut sink: impl FnMut(&RoundRow) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let fed = cfg.fed_config(data.train.dim());
    let model = fed.model.clone();
    let ws = fed.ws;
    let sim = Simulator::new(fed, data.clients()?, level_bank(cfg)?)?;
    let mut state = sim.init_state()?;
    let mut ema = Ema::new(cfg.ema_smoothing);
    let mut acc_raw = None;
    let mut rows = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let round = state.round + 1;
        let started = Instant::now();
        let (next, stats) = sim.run_round(&state).map_err(|e| e.in_round(round))?;
        if !stats.train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {}", stats.train_loss)).in_round(round));
        }
        if let Some(p) = next.params.iter().find(|p| !p.tensor.is_finite()) {
            return Err(Error::Numerical(format!("layer {} parameters are not finite", p.layer_id)).in_round(round));
        }
        state = next;
        if acc_raw.is_none() || round % cfg.eval_every == 0 || round == cfg.rounds {
            acc_raw = Some(evaluate(&model, &state.params, &data.test, &ws).map_err(|e| e.in_round(round))?);
        }
        let raw = acc_raw.expect("evaluated at least once");
        let row = RoundRow {
            round,
            train_loss: stats.train_loss,
            acc_raw: raw,
            acc_ema: ema.update(raw),
            uplink_bytes: stats.uplink_bytes,
            bits_histogram: stats.bits_histogram,
            wallclock_ms: if cfg.wallclock { started.elapsed().as_millis() } else { 0 },
            weight_payload_bytes: stats.weight_payload_bytes,
        };
        sink(&row)?;
        rows.push(row);
    }
    Ok(RunOutcome {
        rows,
        final_state: state,
        partition_hash: partition_hash(&data.partition),
    })
}

/// `run` subcommand: writes `metrics.csv` (streamed) and `summary.txt`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    fs::create_dir_all(out_dir)?;
    let mut csv = BufWriter::new(fs::File::create(out_dir.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    csv.flush()?;
    let outcome = run_rounds(cfg, &data, |row| {
        writeln!(csv, "{}", row.csv_line())?;
        csv.flush()?;
        Ok(())
    })?;
    fs::write(out_dir.join("summary.txt"), summary_text(cfg, &outcome))?;
    Ok(outcome)
}

fn summary_text(cfg: &RunConfig, outcome: &RunOutcome) -> String {
    let mut s = String::new();
    let last = outcome.rows.last();
    let _ = writeln!(s, "rounds_completed = {}", outcome.rows.len());
    let _ = writeln!(s, "final_train_loss = {}", last.map_or(f64::NAN, |r| r.train_loss));
    let _ = writeln!(s, "final_acc_raw = {}", last.map_or(f64::NAN, |r| r.acc_raw));
    let _ = writeln!(s, "final_acc_ema = {}", last.map_or(f64::NAN, |r| r.acc_ema));
    let _ = writeln!(
        s,
        "total_uplink_bytes = {}",
        outcome.rows.iter().map(|r| r.uplink_bytes).sum::<usize>()
    );
    let _ = writeln!(
        s,
        "total_weight_payload_bytes = {}",
        outcome.rows.iter().map(|r| r.weight_payload_bytes).sum::<usize>()
    );
    let _ = writeln!(s, "partition_hash = {}", outcome.partition_hash);
    let _ = writeln!(s, "\n# effective configuration");
    s.push_str(&cfg.serialize());
    s
}

/// One arm of the ablation grid.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub name: &'static str,
    pub ws: bool,
    pub quant: QuantMode,
    pub bits: u8,
    pub outcome: RunOutcome,
}

impl ArmResult {
    pub fn uplink_bytes(&self) -> usize {
        self.outcome.rows.iter().map(|r| r.uplink_bytes).sum()
    }

    pub fn weight_payload_bytes(&self) -> usize {
        self.outcome.rows.iter().map(|r| r.weight_payload_bytes).sum()
    }
}

/// Arms of the grid: `{WS, no WS} x {DANUQ, UQ}` at `bits`, then the
/// full-precision control with WS as configured.
pub fn compare_arms(base: &RunConfig, bits: u8) -> Vec<(&'static str, RunConfig)> {
    let arm = |ws: bool, quant: QuantMode| {
        let mut c = base.clone();
        c.ws = ws;
        c.quant = quant;
        c.alloc = BitAllocation::Constant(bits);
        c
    };
    vec![
        ("ws_danuq", arm(true, QuantMode::Danuq)),
        ("ws_uq", arm(true, QuantMode::Uniform)),
        ("nows_danuq", arm(false, QuantMode::Danuq)),
        ("nows_uq", arm(false, QuantMode::Uniform)),
        ("full_precision", arm(base.ws, QuantMode::FullPrecision)),
    ]
}

/// Runs every arm on one shared data split. With `out_dir`, writes each
/// arm's `metrics.csv` under `<out>/<arm>/` and a side-by-side `compare.csv`.
pub fn compare(base: &RunConfig, bits: u8, out_dir: Option<&Path>) -> Result<Vec<ArmResult>> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::config(format!("key `bits`: unsupported bit-width {bits}")));
    }
    base.validate()?;
    let data = prepare_data(base)?;
    let mut results = Vec::new();
    for (name, cfg) in compare_arms(base, bits) {
        let outcome = match out_dir {
            Some(dir) => run_experiment_with(&cfg, &data, &dir.join(name))?,
            None => run_rounds(&cfg, &data, |_| Ok(()))?,
        };
        log::info!("arm {name}: final EMA accuracy {:?}", outcome.final_acc_ema());
        results.push(ArmResult {
            name,
            ws: cfg.ws,
            quant: cfg.quant,
            bits,
            outcome,
        });
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join("compare.csv"), compare_csv(&results))?;
    }
    Ok(results)
}

fn run_experiment_with(cfg: &RunConfig, data: &PreparedData, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let outcome = run_rounds(cfg, data, |row| {
        csv.push_str(&row.csv_line());
        csv.push('\n');
        Ok(())
    })?;
    fs::write(dir.join("metrics.csv"), csv)?;
    fs::write(dir.join("summary.txt"), summary_text(cfg, &outcome))?;
    Ok(outcome)
}

pub const COMPARE_HEADER: &str =
    "arm,ws,quant,bits,partition_hash,final_acc_raw,final_acc_ema,uplink_bytes,weight_payload_bytes";

pub fn compare_csv(results: &[ArmResult]) -> String {
    let mut s = String::from(COMPARE_HEADER);
    s.push('\n');
    for r in results {
        let last = r.outcome.rows.last();
        let quant = match r.quant {
            QuantMode::Danuq => "danuq",
            QuantMode::Uniform => "uniform",
            QuantMode::FullPrecision => "none",
        };
        let bits = if r.quant == QuantMode::FullPrecision { 32 } else { r.bits };
        let _ = writeln!(
            s,
            "{},{},{quant},{bits},{},{},{},{},{}",
            r.name,
            r.ws,
            r.outcome.partition_hash,
            last.map_or(f64::NAN, |x| x.acc_raw),
            last.map_or(f64::NAN, |x| x.acc_ema),
            r.uplink_bytes(),
            r.weight_payload_bytes(),
        );
    }
    s
}

/// Optimized table for one bit-width with its error and the distance to the
/// built-in reference table.
#[derive(Debug, Clone)]
pub struct LevelsReport {
    pub table: QuantLevels,
    pub expected_error: f64,
    pub reference_max_deviation: Option<f64>,
}

impl LevelsReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bits = {}", self.table.bits());
        let _ = writeln!(s, "zero_pinned = {}", self.table.is_zero_pinned());
        let _ = writeln!(s, "expected_error = {:.6}", self.expected_error);
        let _ = writeln!(s, "# index level");
        for (i, q) in self.table.levels().iter().enumerate() {
            let _ = writeln!(s, "{i} {q:.6}");
        }
        if let (Some(reference), Some(dev)) = (reference_levels(self.table.bits()), self.reference_max_deviation) {
            let _ = writeln!(s, "# reference {:?}", reference);
            let _ = writeln!(s, "reference_max_deviation = {dev:.6}");
        }
        s
    }
}

pub fn levels_report(bits: u8, pin_zero: bool) -> Result<LevelsReport> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::config(format!("key `bits`: unsupported bit-width {bits}")));
    }
    let table = optimize_levels(bits, pin_zero)?;
    let reference_max_deviation = reference_levels(bits)
        .filter(|r| r.len() == table.len())
        .map(|r| {
            r.iter()
                .zip(table.levels())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
    Ok(LevelsReport {
        expected_error: expected_error(&table),
        table,
        reference_max_deviation,
    })
}

/// `levels` subcommand: writes `levels_<B>bit.txt` and returns the report.
pub fn write_levels(bits: u8, pin_zero: bool, out_dir: &Path) -> Result<LevelsReport> {
    let report = levels_report(bits, pin_zero)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(format!("levels_{bits}bit.txt")), report.render())?;
    Ok(report)
}

/// Column of the bits histogram used for `bits`.
pub fn bits_column(bits: u8) -> Option<usize> {
    BIT_PALETTE.iter().position(|&b| b == bits)
}

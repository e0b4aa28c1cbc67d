//! End-to-end properties of the federated pipeline and the experiment driver.

#![allow(clippy::field_reassign_with_default)]

use fedwsq::config::RunConfig;
use fedwsq::danuq::optimize_levels;
use fedwsq::experiment::{prepare_data, run_experiment, run_rounds, METRICS_HEADER};
use fedwsq::federation::{
    client_local_training, client_rng, init_rng, update_global_scales, BitAllocation, Client, FedConfig,
    LevelBank, QuantMode, ScalingVector, Simulator,
};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.num_clients = 8;
    c.participation_rate = 0.5;
    c.rounds = 4;
    c.per_class = 30;
    c.dim = 16;
    c.hidden = vec![16];
    c.local_epochs = 1;
    c.iterations_per_epoch = 3;
    c
}

fn simulator(cfg: &RunConfig, threads: Option<usize>) -> (Simulator, FedConfig) {
    let data = prepare_data(cfg).unwrap();
    let mut fed = cfg.fed_config(data.train.dim());
    fed.threads = threads;
    let sim = Simulator::new(fed.clone(), data.clients().unwrap(), LevelBank::optimized(cfg.pin_zero).unwrap()).unwrap();
    (sim, fed)
}

#[test]
fn rounds_do_not_depend_on_thread_count() {
    let mut cfg = small_config();
    cfg.alloc = BitAllocation::Dba;
    for quant in [QuantMode::Danuq, QuantMode::Uniform] {
        cfg.quant = quant;
        let (one, _) = simulator(&cfg, Some(1));
        let (four, _) = simulator(&cfg, Some(4));
        let (mut a, mut b) = (one.init_state().unwrap(), four.init_state().unwrap());
        for _ in 0..3 {
            let (na, sa) = one.run_round(&a).unwrap();
            let (nb, sb) = four.run_round(&b).unwrap();
            assert_eq!(sa, sb);
            assert_eq!(na.params, nb.params);
            assert_eq!(na.scales, nb.scales);
            (a, b) = (na, nb);
        }
    }
}

#[test]
fn scale_momentum_is_affine_in_client_scales() {
    let s_g = ScalingVector(vec![0.4, 1.5, 0.0]);
    let c1 = ScalingVector(vec![0.2, 0.9, 0.3]);
    let c2 = ScalingVector(vec![0.6, 0.1, 0.7]);
    let base = update_global_scales(&s_g, &[&c1, &c2], 0.1).unwrap();
    let k = 3.0;
    let scaled = |s: &ScalingVector| ScalingVector(s.0.iter().map(|v| v * k).collect());
    let moved = update_global_scales(&s_g, &[&scaled(&c1), &scaled(&c2)], 0.1).unwrap();
    for l in 0..3 {
        let inc = base.0[l] - 0.9 * s_g.0[l];
        let inc_k = moved.0[l] - 0.9 * s_g.0[l];
        assert!((inc_k - k * inc).abs() < 1e-14);
    }
}

#[test]
fn uplink_bytes_equal_serialized_length() {
    let cfg = small_config();
    let (sim, fed) = simulator(&cfg, Some(1));
    let state = sim.init_state().unwrap();
    for bits in [1, 2, 4] {
        let r = client_local_training(
            &state.params,
            None,
            &sim.clients()[0],
            bits,
            0.1,
            &fed,
            sim.levels(),
            &mut client_rng(0, 1, 0),
        )
        .unwrap();
        assert_eq!(r.uplink_bytes, r.to_wire().unwrap().len());
        assert_eq!(r.uplink_bytes, fedwsq::federation::account_bytes(&r));
        assert_eq!(r.scale_fallback_layers.len(), r.quantized_update.len());
    }
}

#[test]
fn wire_blocks_parse_back() {
    let cfg = small_config();
    let (sim, fed) = simulator(&cfg, Some(1));
    let state = sim.init_state().unwrap();
    let r = client_local_training(&state.params, None, &sim.clients()[1], 4, 0.1, &fed, sim.levels(), &mut client_rng(0, 1, 1))
        .unwrap();
    let wire = r.to_wire().unwrap();
    let mut at = 0;
    for block in &r.quantized_update {
        let (parsed, used) = fedwsq::danuq::QuantizedBlock::read_from(&wire[at..]).unwrap();
        assert_eq!(parsed.codes, block.codes);
        assert_eq!(parsed.layer_id, block.layer_id);
        assert_eq!(parsed.scale_used, block.scale_used as f32 as f64);
        at += used;
    }
}

#[test]
fn custom_level_table_is_used() {
    let mut bank = LevelBank::optimized(true).unwrap();
    let unpinned = optimize_levels(2, false).unwrap();
    bank.insert(unpinned.clone());
    assert_eq!(bank.get(2).unwrap(), &unpinned);
    assert!(bank.get(3).is_err());
}

#[test]
fn zero_rounds_write_header_only() {
    let mut cfg = small_config();
    cfg.rounds = 0;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{METRICS_HEADER}\n"));
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn csv_rows_satisfy_ema_recurrence() {
    let mut cfg = small_config();
    cfg.rounds = 8;
    cfg.eval_every = 3;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let mut prev: Option<f64> = None;
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 9);
        let raw: f64 = f[2].parse().unwrap();
        let ema: f64 = f[3].parse().unwrap();
        let expected = prev.map_or(raw, |p| 0.9 * p + 0.1 * raw);
        assert_eq!(ema, expected);
        assert_eq!(f[8], "0");
        prev = Some(ema);
        n += 1;
    }
    assert_eq!(n, 8);
}

#[test]
fn aggregation_weights_are_proportional_to_samples() {
    let cfg = small_config();
    let data = prepare_data(&cfg).unwrap();
    let counts: Vec<usize> = data.partition.client_shards.iter().map(Vec::len).collect();
    let total: usize = counts.iter().sum();
    let h: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for (a, b) in h.iter().zip(&counts) {
        assert!((a * total as f64 - *b as f64).abs() < 1e-12);
    }
}

#[test]
fn convergence_smoke() {
    let mut cfg = RunConfig::default();
    cfg.num_clients = 20;
    cfg.participation_rate = 0.25;
    cfg.rounds = 200;
    cfg.per_class = 200;
    let data = prepare_data(&cfg).unwrap();
    let out = run_rounds(&cfg, &data, |_| Ok(())).unwrap();
    let mut smoothed = Vec::new();
    let mut v: Option<f64> = None;
    for r in &out.rows {
        let x = v.map_or(r.train_loss, |p| 0.98 * p + 0.02 * r.train_loss);
        smoothed.push(x);
        v = Some(x);
    }
    let tail = &smoothed[smoothed.len() - 50..];
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{tail:?}");
    assert!(out.rows.last().unwrap().acc_raw > 0.5);
}

#[test]
fn bootstrap_round_then_global_scales() {
    let cfg = small_config();
    let (sim, _) = simulator(&cfg, None);
    let s0 = sim.init_state().unwrap();
    assert!(!s0.scales_initialized);
    let (s1, st1) = sim.run_round(&s0).unwrap();
    assert!(st1.scale_fallbacks > 0);
    let (_, st2) = sim.run_round(&s1).unwrap();
    assert_eq!(st2.scale_fallbacks, 0);
    let _ = init_rng(0);
    let _ = Client { id: 0, data: prepare_data(&cfg).unwrap().test };
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_round_trips(
        rounds in 0usize..500,
        lr in 1e-4f64..1.0,
        rate in 0.01f64..1.0,
        alpha in prop::option::of(0.01f64..100.0),
        bits in prop::sample::select(vec!["1", "2", "4", "fba", "dba"]),
        seed in any::<u64>(),
    ) {
        let mut c = RunConfig::default();
        c.rounds = rounds;
        c.lr_0 = lr;
        c.participation_rate = rate;
        c.alpha = alpha;
        c.seed = seed;
        c.set("bits", bits).unwrap();
        prop_assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }
}

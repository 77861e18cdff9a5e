mod common;

use common::chains::{random_chain, shared, with_sync};
use edgeseg::pipeline::{
    bottleneck_period, calibrate, compare, simulate, sweep, ticks, with_param, Metric,
    PipelineConfig, Processor, ScenarioFile, Stage, SyncMode, TransferEdge, TransferMode,
};

const CHAINS: u64 = 1000;
const SCENARIO: &str = include_str!("../../../scenarios/m1_vs_m4.json");

fn proc(name: &str, active: f64, idle: f64) -> Processor {
    Processor {
        name: name.into(),
        active_power: active,
        idle_power: idle,
    }
}

fn stage(name: &str, p: &str, t: f64) -> Stage {
    Stage {
        name: name.into(),
        processor: p.into(),
        compute_time: t,
    }
}

fn chain(
    processors: Vec<Processor>,
    stages: Vec<Stage>,
    modes: &[TransferMode],
    sync: SyncMode,
    n: usize,
) -> PipelineConfig {
    let edges = stages
        .windows(2)
        .zip(modes)
        .map(|(w, &mode)| TransferEdge {
            from: w[0].name.clone(),
            to: w[1].name.clone(),
            mode,
        })
        .collect();
    PipelineConfig {
        processors,
        stages,
        edges,
        sync_mode: sync,
        n_frames: n,
    }
}

fn two_stage(mode: TransferMode, sync: SyncMode) -> PipelineConfig {
    chain(
        vec![proc("gpu", 2.0, 0.2), proc("npu", 1.0, 0.05)],
        vec![stage("a", "gpu", 10.0), stage("b", "npu", 5.0)],
        &[mode],
        sync,
        50,
    )
}

#[test]
fn hand_traced_examples() {
    let r = simulate(&two_stage(
        TransferMode::Copy { cost_ms: 2.0 },
        SyncMode::Blocking,
    ))
    .unwrap();
    assert_eq!(r.e2e_latency_ms, 17.0);
    assert_eq!(r.throughput_fps, 1000.0 / 17.0);
    let r = simulate(&two_stage(TransferMode::Shared, SyncMode::FenceAsync)).unwrap();
    assert_eq!(r.e2e_latency_ms, 15.0);
    assert_eq!(r.throughput_fps, 100.0);
    // frame k runs a in [10k, 10k+10) and b in [10k+10, 10k+15)
    for t in r.tasks.iter().filter(|t| t.frame < 5) {
        let base = 10_000 * t.frame as u64;
        let want = if t.stage == 0 {
            (base, base + 10_000)
        } else {
            (base + 10_000, base + 15_000)
        };
        assert_eq!((t.start, t.end), want);
    }
}

#[test]
fn single_stage() {
    let c = chain(
        vec![proc("cpu", 1.0, 0.1)],
        vec![stage("only", "cpu", 10.0)],
        &[],
        SyncMode::FenceAsync,
        20,
    );
    for sync in [SyncMode::Blocking, SyncMode::FenceAsync] {
        let r = simulate(&with_sync(&c, sync)).unwrap();
        assert_eq!((r.e2e_latency_ms, r.throughput_fps), (10.0, 100.0));
        assert_eq!(r.energy_per_frame_mj, 10.0);
    }
}

#[test]
fn async_throughput_dominates_blocking() {
    for seed in 0..CHAINS {
        for distinct in [true, false] {
            let c = random_chain(seed, distinct, SyncMode::Blocking, 40);
            for c in [c.clone(), shared(&c)] {
                let b = simulate(&c).unwrap().throughput_fps;
                let a = simulate(&with_sync(&c, SyncMode::FenceAsync))
                    .unwrap()
                    .throughput_fps;
                assert!(
                    a >= b * (1.0 - 1e-12),
                    "seed {seed}: async {a} < blocking {b}"
                );
            }
        }
    }
}

#[test]
fn shared_latency_never_exceeds_copy_latency() {
    for seed in 0..CHAINS {
        let c = random_chain(seed, false, SyncMode::Blocking, 40);
        let (rc, rs) = (simulate(&c).unwrap(), simulate(&shared(&c)).unwrap());
        assert!(
            rs.e2e_latency_ms <= rc.e2e_latency_ms,
            "blocking seed {seed}"
        );
        assert!(
            rs.energy_per_frame_mj <= rc.energy_per_frame_mj + 1e-9,
            "blocking seed {seed}"
        );

        let c = random_chain(seed, true, SyncMode::FenceAsync, 40);
        let (rc, rs) = (simulate(&c).unwrap(), simulate(&shared(&c)).unwrap());
        assert!(rs.e2e_latency_ms <= rc.e2e_latency_ms, "async seed {seed}");
        assert!(
            rs.energy_per_frame_mj <= rc.energy_per_frame_mj + 1e-9,
            "async seed {seed}"
        );
    }
}

/// Two stages on one processor around a stage on another. Without copies the
/// second frame's first stage becomes ready just before the first frame's
/// last stage and takes the shared processor, delaying every later frame.
#[test]
fn shared_processor_anomaly_is_real() {
    let c = chain(
        vec![proc("p0", 2.6, 0.2), proc("p1", 1.4, 0.3)],
        vec![
            stage("s0", "p0", 2.6),
            stage("s1", "p1", 6.9),
            stage("s2", "p0", 6.9),
        ],
        &[
            TransferMode::Copy { cost_ms: 1.1 },
            TransferMode::Copy { cost_ms: 1.4 },
        ],
        SyncMode::FenceAsync,
        40,
    );
    let (rc, rs) = (simulate(&c).unwrap(), simulate(&shared(&c)).unwrap());
    assert!(
        rs.e2e_latency_ms > rc.e2e_latency_ms,
        "{} vs {}",
        rs.e2e_latency_ms,
        rc.e2e_latency_ms
    );
    // the blocking schedule of the same chain has no such effect
    let (bc, bs) = (
        simulate(&with_sync(&c, SyncMode::Blocking)).unwrap(),
        simulate(&with_sync(&shared(&c), SyncMode::Blocking)).unwrap(),
    );
    assert!(bs.e2e_latency_ms <= bc.e2e_latency_ms);
}

#[test]
fn work_is_conserved_and_schedules_are_feasible() {
    for seed in 0..CHAINS {
        let sync = if seed % 2 == 0 {
            SyncMode::Blocking
        } else {
            SyncMode::FenceAsync
        };
        let c = random_chain(seed, seed % 3 == 0, sync, 30);
        let r = simulate(&c).unwrap();
        for (p, usage) in c.processors.iter().zip(&r.processors) {
            let load: u64 = c
                .stages
                .iter()
                .filter(|s| s.processor == p.name)
                .map(|s| ticks(s.compute_time))
                .sum();
            assert_eq!(
                ticks(usage.busy_ms),
                load * c.n_frames as u64,
                "seed {seed}"
            );
            let mut spans: Vec<_> = r
                .tasks
                .iter()
                .filter(|t| c.processors[t.processor].name == p.name)
                .map(|t| (t.start, t.end))
                .collect();
            spans.sort();
            assert!(
                spans.windows(2).all(|w| w[0].1 <= w[1].0),
                "overlap on {} seed {seed}",
                p.name
            );
        }
        let end = |k: usize, i: usize| {
            r.tasks
                .iter()
                .find(|t| t.frame == k && t.stage == i)
                .unwrap()
        };
        for t in &r.tasks {
            if t.stage > 0 {
                let copy = ticks(c.edges[t.stage - 1].mode.cost_ms());
                assert!(t.start >= end(t.frame, t.stage - 1).end + copy);
            }
            if t.frame > 0 {
                assert!(t.start >= end(t.frame - 1, t.stage).end);
            }
        }
        let energy: f64 = c
            .processors
            .iter()
            .zip(&r.processors)
            .map(|(p, u)| u.busy_ms * p.active_power + u.idle_ms * p.idle_power)
            .sum();
        assert!((energy / c.n_frames as f64 - r.energy_per_frame_mj).abs() < 1e-9);
    }
}

#[test]
fn blocking_latency_is_the_chain_sum() {
    for seed in 0..CHAINS {
        let c = random_chain(seed, false, SyncMode::Blocking, 10);
        let sum: u64 = c.stages.iter().map(|s| ticks(s.compute_time)).sum::<u64>()
            + c.edges.iter().map(|e| ticks(e.mode.cost_ms())).sum::<u64>();
        let r = simulate(&c).unwrap();
        assert_eq!(ticks(r.e2e_latency_ms), sum);
        assert!((r.throughput_fps - 1e6 / sum as f64).abs() < 1e-6);
    }
}

#[test]
fn async_throughput_follows_the_bottleneck() {
    for seed in 0..CHAINS {
        let c = random_chain(seed, true, SyncMode::FenceAsync, 100);
        for c in [c.clone(), shared(&c)] {
            let want = 1e6 / bottleneck_period(&c).unwrap() as f64;
            let got = simulate(&c).unwrap().throughput_fps;
            assert!(
                (got - want).abs() <= 0.01 * want,
                "seed {seed}: {got} vs {want}"
            );
        }
    }
}

/// Shared processors start with a transient whose effect on the measured
/// rate fades as 1/n, so these chains run long enough to reach steady state.
#[test]
fn async_throughput_follows_the_bottleneck_with_shared_processors() {
    for seed in 0..CHAINS {
        let c = random_chain(seed, false, SyncMode::FenceAsync, 1000);
        for c in [c.clone(), shared(&c)] {
            let want = 1e6 / bottleneck_period(&c).unwrap() as f64;
            let got = simulate(&c).unwrap().throughput_fps;
            assert!(
                (got - want).abs() <= 0.01 * want,
                "seed {seed}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn throughput_never_beats_the_slowest_stage() {
    for seed in 0..CHAINS {
        for sync in [SyncMode::Blocking, SyncMode::FenceAsync] {
            let c = random_chain(seed, true, sync, 40);
            let slowest = c
                .stages
                .iter()
                .map(|s| ticks(s.compute_time))
                .max()
                .unwrap();
            let r = simulate(&c).unwrap();
            assert!(
                r.throughput_fps <= 1e6 / slowest as f64 * (1.0 + 1e-12),
                "seed {seed}"
            );

            let c = random_chain(seed, false, sync, 1000);
            let slowest = c
                .stages
                .iter()
                .map(|s| ticks(s.compute_time))
                .max()
                .unwrap();
            let r = simulate(&c).unwrap();
            assert!(
                r.throughput_fps <= 1e6 / slowest as f64 * 1.005,
                "seed {seed}"
            );
        }
    }
}

#[test]
fn copy_cost_sweep_adds_latency_exactly() {
    let c = chain(
        vec![proc("cpu", 1.0, 0.1), proc("gpu", 2.0, 0.2)],
        vec![
            stage("a", "cpu", 3.0),
            stage("b", "gpu", 8.0),
            stage("c", "cpu", 2.0),
        ],
        &[TransferMode::Shared, TransferMode::Shared],
        SyncMode::Blocking,
        20,
    );
    let values: Vec<String> = ["0", "2", "4"].map(String::from).to_vec();
    let rows = sweep(&c, "copy_cost", &values).unwrap();
    let lat: Vec<f64> = rows.iter().map(|(_, r)| r.e2e_latency_ms).collect();
    // two edges, so each unit of copy cost adds two
    assert_eq!(lat, vec![13.0, 17.0, 21.0]);
    let modes = sweep(&c, "sync_mode", &["blocking".into(), "fence_async".into()]).unwrap();
    assert!(modes[1].1.throughput_fps >= modes[0].1.throughput_fps);
    assert!(sweep(&c, "voltage", &values).is_err());
}

#[test]
fn identical_configs_compare_to_one() {
    let c = two_stage(TransferMode::Shared, SyncMode::FenceAsync);
    let t = compare(&[("x".into(), c.clone()), ("y".into(), c)]).unwrap();
    for r in &t.rows {
        assert_eq!(
            (r.latency_ratio, r.throughput_ratio, r.energy_ratio),
            (1.0, 1.0, 1.0)
        );
    }
}

#[test]
fn scenario_reproduces_its_targets() {
    let f = ScenarioFile::from_json(SCENARIO).unwrap();
    let t = f.compare().unwrap();
    let m4 = t.row("m4_final").unwrap();
    assert!(
        (m4.throughput_ratio - 1.81).abs() <= 0.02,
        "{}",
        m4.throughput_ratio
    );
    assert!(
        (m4.throughput_fps - 42.7).abs() <= 0.5,
        "{}",
        m4.throughput_fps
    );
    assert!(
        (m4.energy_ratio - 0.74).abs() <= 0.03,
        "{}",
        m4.energy_ratio
    );
    assert!(m4.latency_ratio < 1.0);
    let m1 = f.get("m1_baseline").unwrap();
    assert_eq!(t.rows[0].label, "m1_baseline");
    assert_eq!(m1.sync_mode, SyncMode::Blocking);
    assert_eq!(f.get("m4_final").unwrap().sync_mode, SyncMode::FenceAsync);
}

#[test]
fn scenario_values_are_bisection_results() {
    let f = ScenarioFile::from_json(SCENARIO).unwrap();
    let m1 = f.get("m1_baseline").unwrap();
    let m4 = f.get("m4_final").unwrap();
    let t4 = calibrate(
        m4,
        "stage_time:inference",
        Metric::Throughput,
        42.7,
        10.0,
        40.0,
    )
    .unwrap();
    assert!((t4 - m4.stages[2].compute_time).abs() < 5e-3, "{t4}");
    let t1 = calibrate(
        m1,
        "stage_time:inference",
        Metric::Throughput,
        42.7 / 1.81,
        10.0,
        60.0,
    )
    .unwrap();
    assert!((t1 - m1.stages[2].compute_time).abs() < 5e-3, "{t1}");
    let e1 = simulate(m1).unwrap().energy_per_frame_mj;
    let p = calibrate(
        m4,
        "active_power:npu",
        Metric::EnergyPerFrame,
        0.74 * e1,
        0.1,
        5.0,
    )
    .unwrap();
    let npu = m4.processors.iter().find(|p| p.name == "npu").unwrap();
    assert!((p - npu.active_power).abs() < 5e-3, "{p}");
}

#[test]
fn throughput_is_stable_in_frame_count() {
    let f = ScenarioFile::from_json(SCENARIO).unwrap();
    for s in &f.scenarios {
        let at = |n: usize| {
            simulate(&with_param(&s.config, "n_frames", &n.to_string()).unwrap())
                .unwrap()
                .throughput_fps
        };
        let (a, b) = (at(10), at(1000));
        assert!((a - b).abs() <= 0.01 * b, "{}: {a} vs {b}", s.label);
    }
}

#[test]
fn simulation_is_deterministic() {
    let c = random_chain(5, false, SyncMode::FenceAsync, 50);
    let (a, b) = (simulate(&c).unwrap(), simulate(&c).unwrap());
    assert_eq!(a.tasks, b.tasks);
    assert_eq!(
        a.energy_per_frame_mj.to_bits(),
        b.energy_per_frame_mj.to_bits()
    );
}

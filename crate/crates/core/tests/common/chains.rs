//! Random chain pipelines.

use edgeseg::pipeline::{PipelineConfig, Processor, Stage, SyncMode, TransferEdge, TransferMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A chain of 1..=6 stages. With `distinct` every stage has its own processor,
/// otherwise stages draw from a pool of up to four.
pub fn random_chain(seed: u64, distinct: bool, sync: SyncMode, n_frames: usize) -> PipelineConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=6);
    let np = if distinct { k } else { rng.gen_range(1..=4) };
    let processors = (0..np)
        .map(|i| {
            let idle = rng.gen_range(0.0..0.5);
            Processor {
                name: format!("p{i}"),
                active_power: idle + rng.gen_range(0.1..3.0),
                idle_power: idle,
            }
        })
        .collect();
    let stages: Vec<Stage> = (0..k)
        .map(|i| Stage {
            name: format!("s{i}"),
            processor: format!("p{}", if distinct { i } else { rng.gen_range(0..np) }),
            compute_time: (rng.gen_range(0.5..20.0f64) * 10.0).round() / 10.0,
        })
        .collect();
    let edges = stages
        .windows(2)
        .map(|w| TransferEdge {
            from: w[0].name.clone(),
            to: w[1].name.clone(),
            mode: TransferMode::Copy {
                cost_ms: (rng.gen_range(0.0..5.0f64) * 10.0).round() / 10.0,
            },
        })
        .collect();
    PipelineConfig {
        processors,
        stages,
        edges,
        sync_mode: sync,
        n_frames,
    }
}

pub fn shared(cfg: &PipelineConfig) -> PipelineConfig {
    let mut c = cfg.clone();
    c.edges
        .iter_mut()
        .for_each(|e| e.mode = TransferMode::Shared);
    c
}

pub fn with_sync(cfg: &PipelineConfig, sync: SyncMode) -> PipelineConfig {
    PipelineConfig {
        sync_mode: sync,
        ..cfg.clone()
    }
}

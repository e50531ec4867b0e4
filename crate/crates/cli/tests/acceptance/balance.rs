//! Criterion 5: one epoch of balanced training on a 10:1 set feeds the
//! generator uniformly distributed labels.

use bagan::data::preprocess;
use bagan::losses::{LossConfig, LossVariant};
use bagan::nets::ArchitectureConfig;
use bagan::synthetic::similar_shapes;
use bagan::trainer::{steps_per_epoch, train, InitMode, TrainConfig, TrainData};

use crate::Verdict;

/// 10:1 between the majority and each minority class; 16 900 images give
/// 132 steps of 6 batches of 128, just over 100k generator-side draws.
const COUNTS: [usize; 4] = [13000, 1300, 1300, 1300];
const MIN_DRAWS: u64 = 100_000;
const TOL: f64 = 0.01;

pub fn criterion() -> bagan::Result<Verdict> {
    let (raw, labels) = similar_shapes(&COUNTS, 1, 5)?;
    let images = preprocess(&raw)?;
    drop(raw);
    let data = TrainData::new(&images, &labels)?;
    drop(images);
    let arch = ArchitectureConfig {
        latent_dim: 8,
        channels: 1,
        widths: [4, 8, 8, 16],
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 1,
        seed: 5,
        loss: LossConfig {
            variant: LossVariant::BaganGp,
            ..Default::default()
        },
        // label sampling does not depend on the starting weights
        init_mode: InitMode::None,
        checkpoint_every: 0,
        ..Default::default()
    };
    let run_dir = tempfile::tempdir()?;
    let outcome = train(&data, None, &arch, &cfg, run_dir.path(), false, "")?;
    let counts = &outcome.state.fake_label_counts;
    let draws: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let worst = freqs.iter().map(|f| (f - 1.0 / k).abs()).fold(0.0, f64::max);
    let real_share = COUNTS[0] as f64 / COUNTS.iter().sum::<usize>() as f64;
    let steps = steps_per_epoch(data.len(), cfg.batch_size);
    let pass = draws >= MIN_DRAWS && worst <= TOL && outcome.state.epoch == 1;
    let freqs: Vec<String> = freqs.iter().map(|f| format!("{f:.4}")).collect();
    Ok(Verdict::new(
        pass,
        format!(
            "{steps} steps, {draws} draws, frequencies [{}], max deviation {worst:.4} (tol {TOL}); real stream majority share {real_share:.3}",
            freqs.join(", ")
        ),
    ))
}

//! One seed of the desk-scale experiment: 40 synthetic scenes (2 labeled,
//! 30 unlabeled, 8 validation) on an 8x16x16 grid, trained in each mode.
//!
//! Usage: `cargo run --release -p repl-core --example desk_scale -- [seed] [steps]`

use std::time::Instant;

use repl_core::grid::GridShape;
use repl_core::pipeline::{metrics_csv, train, Mode, TrainConfig, TrainData};
use repl_core::scenegen::{generate_dataset, DatasetSpec, SceneConfig, FEATURE_CHANNELS};

fn main() -> repl_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let spec = DatasetSpec {
        scene: SceneConfig::default(),
        shape: GridShape::new(5, FEATURE_CHANNELS, 8, 16, 16)?,
        n_scenes: 40,
        labeled_ratio: 2.0 / 32.0,
        n_val: 8,
        seed,
    };
    let (ds, scenes) = generate_dataset(&spec, None)?;
    let data = TrainData::new(ds, scenes)?;
    for mode in [Mode::SupOnly, Mode::SemiNoRefine, Mode::SemiRepl] {
        let cfg = TrainConfig {
            mode,
            steps,
            eval_interval: (steps / 10).max(1),
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let out = train(&cfg, &data)?;
        println!("# {mode}: {:.1} s", t.elapsed().as_secs_f64());
        print!("{}", metrics_csv(&out.metrics));
    }
    Ok(())
}

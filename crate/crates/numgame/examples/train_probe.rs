//! Calibration probe: criterion-5 shaped run with per-epoch progress.

use numgame::game::{train, Condition, GameConfig, SplitSelector};
use numgame::stimuli::{Dataset, DatasetSpec};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);

    let spec = DatasetSpec {
        classes: vec![1, 2, 3, 4, 5],
        counts: vec![140; 5],
        canvas_side: 64,
        area_range: (0.05, 0.10),
        train_fraction: 0.8,
        seed: 1,
    };
    let t0 = Instant::now();
    let data = Dataset::build(&spec).unwrap();
    eprintln!("dataset built in {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = GameConfig::default_discrete();
    cfg.condition = Condition::Diff;
    cfg.vocab = 3;
    cfg.max_len = 5;
    cfg.variable_length = false;
    cfg.lambda = 0.0;
    cfg.epochs = epochs;
    cfg.steps_per_epoch = 25;
    cfg.batch = 32;
    cfg.eval_episodes = 200;
    cfg.eval_split = SplitSelector::Test;
    cfg.seed = seed;

    // Reuse train() but watch progress via the returned rows printed at end;
    // for live progress, run один epoch at a time by chaining short trains is
    // not possible (fresh init). Instead print after: train() is silent.
    let t1 = Instant::now();
    let (_agents, result) = train(&cfg, &data, None).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    for (row, loss) in result.epochs.iter().zip(&result.mean_train_loss) {
        println!(
            "epoch {:2}  loss {:.4}  acc {:.3}  H(N|M) {:.3}  len {:.2}",
            row.epoch, loss, row.accuracy, row.cond_entropy, row.mean_len
        );
    }
    println!(
        "total {:.1}s ({:.1}s/epoch), episodes/s {:.1}",
        dt,
        dt / epochs as f64,
        (epochs * 25 * 32) as f64 / dt
    );
}

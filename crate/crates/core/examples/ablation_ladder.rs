//! Every regularizer on the default corpus, median final Dice over seeds.
//!
//! `cargo run --release --example ablation_ladder -- <iters> <seeds>`

use xald::data::generate_dataset;
use xald::error::Result;
use xald::trainer::{run_ladder, Regularizer, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>().ok());
    let iters = args.next().flatten().unwrap_or(200) as usize;
    let n_seeds = args.next().flatten().unwrap_or(1);
    let seeds: Vec<u64> = (0..n_seeds).collect();
    let ds = generate_dataset(32, 32, 40, 16, 0)?;
    let base = TrainConfig {
        total_iters: iters,
        ..TrainConfig::default()
    };
    let rows = run_ladder(&base, &Regularizer::ALL, &seeds, &ds)?;
    for reg in Regularizer::ALL {
        let mut dice: Vec<f64> = rows
            .iter()
            .filter(|r| r.regularizer == reg)
            .map(|r| r.final_metrics.dice_pct)
            .collect();
        dice.sort_by(f64::total_cmp);
        println!("{:<18} median dice {:.2}  runs {:?}", reg.name(), dice[dice.len() / 2], dice);
    }
    Ok(())
}

//! Short training runs of the supervised baseline, VAT and Cross-ALD on the
//! same labeled split. Pass the iteration count as the first argument.

use xald::data::generate_dataset;
use xald::error::Result;
use xald::trainer::{run_ladder, Regularizer, TrainConfig};

fn main() -> Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let ds = generate_dataset(32, 32, 40, 16, 7)?;
    let base = TrainConfig {
        total_iters: iters,
        ..TrainConfig::default()
    };
    let regs = [Regularizer::None, Regularizer::Vat, Regularizer::CrossAld];
    for row in run_ladder(&base, &regs, &[0], &ds)? {
        let m = row.final_metrics;
        println!("{:<10} dice {:.2}  jaccard {:.2}  hd95 {:.2}  asd {:.2}", row.regularizer.name(), m.dice_pct, m.jaccard_pct, m.hd95_px, m.asd_px);
    }
    Ok(())
}

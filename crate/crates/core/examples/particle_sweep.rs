//! Cross-ALD with one, two and three particles per image; writes the sweep
//! CSV next to the system temp directory.

use xald::data::generate_dataset;
use xald::error::Result;
use xald::trainer::{particle_count_sweep, TrainConfig};

fn main() -> Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let ds = generate_dataset(32, 32, 40, 16, 7)?;
    let base = TrainConfig {
        total_iters: iters,
        ..TrainConfig::default()
    };
    let path = std::env::temp_dir().join("xald-particle-sweep.csv");
    for row in particle_count_sweep(&base, &[1, 2, 3], &[0], &ds, &path)? {
        println!("N={} dice {:.2}", row.n_particles, row.dice);
    }
    println!("written to {}", path.display());
    Ok(())
}

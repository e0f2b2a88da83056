//! Mean pairwise SSE of VAT restarts, pixel-kernel SVGD and feature-kernel
//! SVGD around three synthetic images.

use xald::data::generate_dataset;
use xald::error::Result;
use xald::sampler::{diversity_table, mean_diversity, SamplerConfig, SamplerMethod};
use xald::segnet::{Arch, SegModel};

fn main() -> Result<()> {
    let ds = generate_dataset(32, 32, 8, 1, 7)?;
    let images: Vec<_> = (0..3).map(|i| (i, &ds.train[i].image)).collect();
    let model = SegModel::init(Arch::default(), 0)?;
    let counts = [4, 8];
    let rows = diversity_table(&model, &images, &SamplerMethod::ALL, &counts, &SamplerConfig::default())?;
    for n in counts {
        let line: Vec<String> = SamplerMethod::ALL
            .iter()
            .map(|&m| format!("{m} {:.5}", mean_diversity(&rows, m, n).unwrap()))
            .collect();
        println!("N={n}: {}", line.join("  "));
    }
    Ok(())
}

//! Runs an untrained network on one synthetic image and scores its argmax
//! prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xald::data::generate_sample;
use xald::error::Result;
use xald::metrics::seg_metrics;
use xald::segnet::{Arch, SegModel};

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (sample, shapes) = generate_sample(&mut rng, 32, 32).expect("a valid sample within the retry budget");
    println!("shapes: {shapes:?}");

    let model = SegModel::init(Arch::default(), 0)?;
    println!("{} parameters", model.num_params());
    let pred = model.forward(&sample.image)?;
    let mask = pred.argmax();
    let report = seg_metrics(&mask, &sample.mask, 32, 32, 3)?;
    println!("untrained: {report:?}");
    Ok(())
}

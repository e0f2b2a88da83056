//! Generates a small corpus, writes it to a temporary directory and reads it
//! back.

use xald::data::{generate_dataset, load_dataset, write_dataset};
use xald::error::Result;

fn main() -> Result<()> {
    let ds = generate_dataset(32, 32, 40, 16, 7)?;
    let dir = std::env::temp_dir().join("xald-example-dataset");
    write_dataset(&dir, &ds)?;
    let back = load_dataset(&dir)?;
    assert_eq!(back, ds);
    let m = &ds.manifest;
    println!("{}x{}, {} train / {} eval, labeled {:?}", m.h, m.w, m.n_train, m.n_eval, m.labeled_indices);
    let counts = ds.train.iter().fold([0usize; 3], |mut c, s| {
        s.mask.iter().for_each(|&k| c[k as usize] += 1);
        c
    });
    println!("class pixel counts over the training split: {counts:?}");
    println!("written to {}", dir.display());
    Ok(())
}

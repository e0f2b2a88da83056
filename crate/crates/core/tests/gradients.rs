mod common;

use common::gradsuite::{run_all, PROBES, TOLERANCE};

#[test]
fn every_primitive_and_pipeline_matches_finite_differences() {
    let results = run_all(2024).unwrap();
    for r in &results {
        println!("{:<40} probes {:>3}  worst rel err {:.2e}", r.name, r.probes, r.worst);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    assert!(failed.is_empty(), "{failed:?} exceed {TOLERANCE} over {PROBES} probes");
}

#[test]
fn detach_blocks_one_path_only() {
    use xald::autodiff::{Graph, Tensor};
    // f = stop(x) * x + x, so df/dx = x + 1 although the function is x^2 + x
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3], vec![-1.5, 0.0, 2.0]).unwrap()).unwrap();
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    let y = g.add(y, x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-0.5, 1.0, 3.0]);
}

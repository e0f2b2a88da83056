//! Reverse-mode gradients of a small convolutional pipeline against central
//! differences, in double precision.

use xald::autodiff::{finite_difference_check, Graph, Tensor, Var};
use xald::error::Result;

fn main() -> Result<()> {
    let x = Tensor::<f64>::from_fn(&[1, 6, 6], |k| ((k * 37) % 11) as f64 / 11.0 - 0.4);
    let w = Tensor::<f64>::from_fn(&[2, 1, 3, 3], |k| ((k * 13) % 7) as f64 / 7.0 - 0.5);

    let pipeline = |g: &mut Graph<f64>, x: Var| {
        let w = g.constant(w.clone())?;
        let h = g.conv2d(x, w, None)?;
        let h = g.leaky_relu(h, 0.01)?;
        let h = g.avg_pool2(h)?;
        let p = g.softmax(h)?;
        let sq = g.mul(p, p)?;
        g.mean(sq)
    };

    let err = finite_difference_check(pipeline, &x, 1e-6)?;
    println!("max relative error over {} inputs: {err:.3e}", x.len());
    Ok(())
}

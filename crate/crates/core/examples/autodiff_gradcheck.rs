//! Builds a small two-layer network on the tape in f64 and compares the
//! reverse-mode gradient of every parameter with central differences.
//!
//!     cargo run --release --example autodiff_gradcheck

use mimforge::numerics::{Element, Tape, Tensor};
use mimforge::rng::{normal, substream};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "example", 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(&mut rng) * 0.5).collect()).unwrap()
}

fn loss(params: &[Tensor<f64>], x: &Tensor<f64>, targets: &[usize]) -> mimforge::Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let x = tape.constant_ref(x);
    let h = tape.linear(x, vars[0], vars[1])?;
    let h = tape.gelu(h);
    let g = tape.param_owned(Tensor::ones([8]));
    let b = tape.constant(Tensor::zeros([8]));
    let h = tape.layer_norm(h, g, b, 1e-5)?;
    let logits = tape.linear(h, vars[2], vars[3])?;
    let l = tape.cross_entropy(logits, targets)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn main() -> mimforge::Result<()> {
    let x = randn(&[5, 6], 1);
    let targets = [0, 2, 1, 3, 2];
    let mut params = vec![randn(&[6, 8], 2), randn(&[8], 3), randn(&[8, 4], 4), randn(&[4], 5)];
    let names = ["w1", "b1", "w2", "b2"];
    let (value, grads) = loss(&params, &x, &targets)?;
    println!("loss {value:.6}");

    let h = 1e-5;
    for (k, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..params[k].numel() {
            let orig = params[k].data()[i];
            params[k].data_mut()[i] = orig + h;
            let up = loss(&params, &x, &targets)?.0;
            params[k].data_mut()[i] = orig - h;
            let down = loss(&params, &x, &targets)?.0;
            params[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[k].data()[i].as_f64();
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        println!("{name:>3} {:?}  max relative error {worst:.2e}", params[k].shape());
    }
    Ok(())
}

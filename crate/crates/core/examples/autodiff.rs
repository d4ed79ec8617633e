//! Reverse-mode autodiff on the tape: a two-layer network learns XOR with
//! Adam, and its gradients are checked against central differences.

use pointview::numcore::{grad_check_many, OptimizerKind, OptimizerState, Tape, Tensor, Var};
use pointview::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forward(t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
    let h = t.matmul(x, p[0])?;
    let h = t.add_bias(h, p[1], 1)?;
    let h = t.relu(h);
    let y = t.matmul(h, p[2])?;
    t.add_bias(y, p[3], 1)
}

fn loss(t: &mut Tape, p: &[Var], x: &Tensor, y: &Tensor) -> Result<Var> {
    let xv = t.constant(x.clone());
    let out = forward(t, p, xv)?;
    let target = t.constant(y.clone());
    let d = t.sub(out, target)?;
    let sq = t.mul(d, d)?;
    Ok(t.mean(sq))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let mut params = vec![init(&[2, 8])?, init(&[8])?, init(&[8, 1])?, init(&[1])?];
    let x = Tensor::new([4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let y = Tensor::new([4, 1], vec![0.0, 1.0, 1.0, 0.0])?;

    let worst = grad_check_many(|t, p| loss(t, p, &x, &y), &params, 1e-5, None)?;
    println!("gradient check before training: max relative error {worst:.2e}");

    let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.05);
    for step in 0..=400 {
        let mut tape = Tape::new();
        let p: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
        let l = loss(&mut tape, &p, &x, &y)?;
        let value = tape.value(l).item()?;
        let mut grads = tape.backward(l)?;
        let g: Vec<Option<Tensor>> = p.iter().map(|&v| grads.take(v)).collect();
        opt.step(&mut params, &g)?;
        if step % 100 == 0 {
            println!("step {step:>3}  mse {value:.6}");
        }
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let xv = tape.constant(x);
    let out = forward(&mut tape, &p, xv)?;
    println!("predictions for 00 01 10 11: {:.3?}", tape.value(out).data());
    Ok(())
}

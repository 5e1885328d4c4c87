//! Check the reverse-mode tape against central finite differences on a
//! little graph that exercises matmul, softmax, layernorm, and silu.

use battn::tape::{finite_difference, max_rel_err, Tape};
use battn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let x0 = Tensor::from_fn(&[5, 6], |_| rng.gen_range(-1.0..1.0));
    let w0 = Tensor::from_fn(&[6, 6], |_| rng.gen_range(-0.5..0.5));
    let g0 = Tensor::filled(&[6], 1.0);
    let b0 = Tensor::zeros(&[6]);

    let run = |x: &Tensor, w: &Tensor, grad: bool| {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone(), true);
        let wn = tape.leaf(w.clone(), true);
        let gn = tape.leaf(g0.clone(), false);
        let bn = tape.leaf(b0.clone(), false);
        let h = tape.matmul(xn, wn).unwrap();
        let ln = tape.layernorm(h, gn, bn);
        let sm = tape.softmax(ln);
        let sl = tape.silu(sm);
        let loss = tape.sum(sl);
        let v = tape.value(loss).unwrap().data()[0];
        if grad {
            let grads = tape.backward(loss).unwrap();
            (v, Some((grads.get(xn).unwrap(), grads.get(wn).unwrap())))
        } else {
            (v, None)
        }
    };

    let (value, grads) = run(&x0, &w0, true);
    let (gx, gw) = grads.unwrap();
    println!("loss = {value:.6}");
    println!("tape nodes carry values forward and one backward sweep fills every gradient\n");

    let fd_x = finite_difference(|x| run(x, &w0, false).0, &x0, 1e-5);
    let fd_w = finite_difference(|w| run(&x0, w, false).0, &w0, 1e-5);
    println!("max relative error vs. central differences (step 1e-5):");
    println!("  d loss / d x: {:.3e}", max_rel_err(&gx, &fd_x));
    println!("  d loss / d w: {:.3e}", max_rel_err(&gw, &fd_w));

    println!("\nfirst row of d loss / d x:");
    for j in 0..6 {
        print!("  {:+.6}", gx.at(0, j));
    }
    println!();
}

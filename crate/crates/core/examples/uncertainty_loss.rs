//! Tabulates the uncertainty-guided loss `l/u + ln u` and shows that its
//! minimiser over `u` is `min(l, 1)`.
//!
//! cargo run --release --example uncertainty_loss

use selection_gan::losses::uncertainty_guided;
use sg_autodiff::Tensor;

const EPS: f64 = 1e-3;

fn value(l: f64, u: f64) -> f64 {
    let one = |v| Tensor::full(&[1, 1, 1, 1], v);
    uncertainty_guided(&one(l), &one(u), EPS).expect("valid inputs")
}

fn main() {
    let us = [0.05, 0.1, 0.25, 0.5, 1.0];
    print!("{:>6}", "l \\ u");
    for u in us {
        print!("{u:>10}");
    }
    println!("{:>10}", "argmin");
    for l in [0.02, 0.1, 0.3, 0.6, 1.0, 2.0] {
        print!("{l:>6}");
        for u in us {
            print!("{:>10.4}", value(l, u));
        }
        let steps = 10_000;
        let best = (0..steps)
            .map(|i| EPS + (1.0 - EPS) * i as f64 / (steps - 1) as f64)
            .min_by(|a, b| value(l, *a).total_cmp(&value(l, *b)))
            .unwrap();
        println!("{best:>10.4}");
    }

    let map = Tensor::from_vec(&[1, 1, 1, 4], vec![0.0, 0.2, 0.5, 1.5]);
    let ones = Tensor::full(&[1, 1, 1, 4], 1.0);
    println!("u = 1 gives the plain mean: {} == {}", value_map(&map, &ones), map.mean());
}

fn value_map(map: &Tensor, u: &Tensor) -> f64 {
    uncertainty_guided(map, u, EPS).expect("valid inputs")
}

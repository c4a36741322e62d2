use std::time::Instant;

fn main() {
    // tanh / exp throughput
    let xs: Vec<f32> = (0..200_000).map(|i| (i as f32 * 0.001).sin()).collect();
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..10 {
        for &x in &xs { acc += x.tanh(); }
    }
    println!("tanh: {:.1} ns/op (acc {acc})", t.elapsed().as_nanos() as f64 / 2e6);
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..10 {
        for &x in &xs { acc += x.exp(); }
    }
    println!("exp: {:.1} ns/op (acc {acc})", t.elapsed().as_nanos() as f64 / 2e6);

    // allocation + zero cost at tape scale: 900 allocs of 16KB
    let t = Instant::now();
    for _ in 0..100 {
        let mut v: Vec<Vec<f32>> = Vec::new();
        for i in 0..900 {
            v.push(vec![0.0f32; 4160 + (i % 7) * 64]);
        }
        std::hint::black_box(&v);
    }
    println!("900x16KB alloc+zero: {:.2} ms", t.elapsed().as_secs_f64() * 10.0);
}

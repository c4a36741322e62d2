use grounder::tensor::{mm_nn_append, mm_nt_append};
use std::time::Instant;

fn main() {
    let (tq, tk, dh, heads) = (65usize, 65usize, 16usize, 4usize);
    let q: Vec<f32> = (0..tq * dh).map(|i| (i as f32 * 0.013).sin()).collect();
    let iters = 2000;

    // scores: [65,16] x [65,16]^T
    let t = Instant::now();
    for _ in 0..iters {
        let mut out = Vec::with_capacity(tq * tk);
        for _ in 0..heads {
            out.clear();
            mm_nt_append(&q, &q, &mut out, tq, dh, tk);
        }
        std::hint::black_box(&out);
    }
    println!("scores x4: {:.1} us", t.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // softmax over 4x65x65
    let mut probs: Vec<f32> = (0..heads * tq * tk).map(|i| (i as f32 * 0.001).sin()).collect();
    let t = Instant::now();
    for _ in 0..iters {
        for row in probs.chunks_exact_mut(tk) {
            let mut mx = row[0];
            for &x in row.iter().skip(1) { mx = mx.max(x); }
            let mut denom = 0.0f32;
            for x in row.iter_mut() { *x = (*x - mx).exp(); denom += *x; }
            for x in row.iter_mut() { *x /= denom; }
        }
        std::hint::black_box(&probs);
    }
    println!("softmax 4x65x65: {:.1} us", t.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // out: [65,65] x [65,16]
    let p: Vec<f32> = (0..tq * tk).map(|i| (i as f32 * 0.002).cos()).collect();
    let v: Vec<f32> = (0..tk * dh).map(|i| (i as f32 * 0.004).sin()).collect();
    let t = Instant::now();
    for _ in 0..iters {
        let mut out = Vec::with_capacity(heads * tq * dh);
        for _ in 0..heads {
            mm_nn_append(&p, &v, &mut out, tq, tk, dh);
        }
        std::hint::black_box(&out);
    }
    println!("attnV x4: {:.1} us", t.elapsed().as_secs_f64() / iters as f64 * 1e6);
}

use grounder::params::{Graph, ParamStore};
use grounder::tensor::Tape;
use std::time::Instant;

fn main() {
    // single affine [65,64]x[64,64] through the tape, amortized
    let mut store: ParamStore<f32> = ParamStore::new();
    let w = store.add("w", &[64, 64], (0..4096).map(|i| (i as f32 * 0.01).sin()).collect());
    let b = store.add("b", &[64], vec![0.1; 64]);
    let x: Vec<f32> = (0..65 * 64).map(|i| (i as f32 * 0.02).cos()).collect();

    let t = Instant::now();
    let iters = 2000;
    for _ in 0..iters {
        let mut g = Graph::new(&store);
        let xid = g.tape.leaf(x.clone(), &[65, 64], false);
        let wid = g.param(w);
        let bid = g.param(b);
        let y = g.tape.affine(xid, wid, bid);
        std::hint::black_box(g.tape.value(y)[0]);
    }
    let per = t.elapsed().as_secs_f64() / iters as f64 * 1e6;
    println!("affine via tape: {per:.1} us (266K madds -> {:.1} G/s)", 0.266 / per * 1000.0);

    // raw attention core [65,64] heads 4
    let q: Vec<f32> = (0..65 * 64).map(|i| (i as f32 * 0.013).sin()).collect();
    let t = Instant::now();
    for _ in 0..iters {
        let mut tape: Tape<f32> = Tape::new();
        let qid = tape.leaf(q.clone(), &[65, 64], false);
        let o = tape.attn_core(qid, qid, qid, 4, None);
        std::hint::black_box(tape.value(o)[0]);
    }
    let per = t.elapsed().as_secs_f64() / iters as f64 * 1e6;
    println!("attn_core via tape: {per:.1} us (540K madds -> {:.1} G/s)", 0.54 / per * 1000.0);

    // gelu on [65,128]
    let h: Vec<f32> = (0..65 * 128).map(|i| (i as f32 * 0.017).sin()).collect();
    let t = Instant::now();
    for _ in 0..iters {
        let mut tape: Tape<f32> = Tape::new();
        let hid = tape.leaf(h.clone(), &[65, 128], false);
        let o = tape.gelu(hid);
        std::hint::black_box(tape.value(o)[0]);
    }
    println!("gelu [65,128] via tape: {:.1} us", t.elapsed().as_secs_f64() / iters as f64 * 1e6);

    // layer_norm [65,64]
    let t = Instant::now();
    for _ in 0..iters {
        let mut tape: Tape<f32> = Tape::new();
        let xid = tape.leaf(x.clone(), &[65, 64], false);
        let gn = tape.leaf(vec![1.0; 64], &[64], false);
        let bn = tape.leaf(vec![0.0; 64], &[64], false);
        let o = tape.layer_norm(xid, gn, bn, 1e-5);
        std::hint::black_box(tape.value(o)[0]);
    }
    println!("layer_norm via tape: {:.1} us", t.elapsed().as_secs_f64() / iters as f64 * 1e6);
}

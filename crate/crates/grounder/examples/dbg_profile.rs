use grounder::config::{GenConfig, ModelConfig};
use grounder::data::generate_dataset;
use grounder::model::GroundingModel;
use grounder::params::Graph;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig { seg_head: false, ..ModelConfig::default() };
    let gen = GenConfig { seed: 5, count: 4, min_objects: 2, max_objects: 3 };
    let data = generate_dataset(&gen, cfg.image_size, cfg.max_text_len).unwrap();
    let model: GroundingModel<f32> = GroundingModel::new(cfg);
    let s = &data[0];

    // forward only
    let t = Instant::now();
    let mut nodes = 0;
    for _ in 0..50 {
        let mut g = Graph::new(&model.store);
        let out = model.forward_sample(&mut g, s);
        nodes = g.tape.len();
        std::hint::black_box(g.tape.value(out.boxes));
    }
    println!("forward only: {:.2} ms, tape nodes {}", t.elapsed().as_secs_f64() * 1000.0 / 50.0, nodes);

    // forward + backward
    let t = Instant::now();
    for _ in 0..50 {
        let mut g = Graph::new(&model.store);
        let out = model.forward_sample(&mut g, s);
        let loss = g.tape.sum_all(out.boxes);
        g.tape.backward(loss);
        std::hint::black_box(g.param_grads().len());
    }
    println!("fwd+bwd: {:.2} ms", t.elapsed().as_secs_f64() * 1000.0 / 50.0);
}

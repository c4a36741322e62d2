use grounder::config::{GenConfig, ModelConfig, TrainConfig};
use grounder::data::generate_dataset;
use grounder::model::GroundingModel;
use grounder::train::{train_step, AdamW};

fn main() {
    let cfg = ModelConfig {
        image_size: 48, patch: 8, d_model: 32, layers: 3, heads: 4, mlp_ratio: 2,
        d_adapter: 16, adapter_heads: 4, num_queries: 2,
        adapter_layers: vec![1, 3], fusion_layers: vec![2, 3],
        seg_head: false,
        ..ModelConfig::default()
    };
    let gen = GenConfig { seed: 5, count: 4, min_objects: 2, max_objects: 3 };
    let data = generate_dataset(&gen, cfg.image_size, cfg.max_text_len).unwrap();
    let mut model: GroundingModel<f32> = GroundingModel::new(cfg);
    let tc = TrainConfig { epochs: 1, batch_size: 4, lr: 3e-3, grad_clip: 0.0, pretrain_steps: 0, freeze_backbone: false, ..TrainConfig::default() };
    let mut opt = AdamW::new(&model.store, tc.lr, tc.weight_decay);
    let t0 = std::time::Instant::now();
    let mut first = 0.0;
    for step in 1..=300 {
        let t = train_step(&mut model, &mut opt, &data, &tc, step).unwrap();
        if step == 1 { first = t.total; }
        if step % 60 == 0 {
            println!("step {:3}: total={:.3} (ratio {:.2}) l1={:.3} iou={:.3} [{:.1}s]", step, t.total, t.total/first, t.box_l1, t.box_iou, t0.elapsed().as_secs_f32());
        }
    }
}

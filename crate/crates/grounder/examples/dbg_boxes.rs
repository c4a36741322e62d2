use grounder::boxes::{giou, BoxCxcywh};
use grounder::config::{GenConfig, ModelConfig, TrainConfig};
use grounder::data::generate_dataset;
use grounder::losses::{match_predictions, LossWeights, QueryPrediction};
use grounder::model::GroundingModel;
use grounder::params::Graph;
use grounder::train::{train_step, AdamW};

fn main() {
    let cfg = ModelConfig {
        image_size: 48, patch: 8, d_model: 32, layers: 3, heads: 4, mlp_ratio: 2,
        d_adapter: 16, adapter_heads: 4, num_queries: 2,
        adapter_layers: vec![1, 3], fusion_layers: vec![2, 3],
        seg_head: false,
        decoder_self_residual: false,
        ..ModelConfig::default()
    };
    let gen = GenConfig { seed: 5, count: 4, min_objects: 2, max_objects: 3 };
    let data = generate_dataset(&gen, cfg.image_size, cfg.max_text_len).unwrap();
    let mut model: GroundingModel<f32> = GroundingModel::new(cfg);
    let tc = TrainConfig { epochs: 1, batch_size: 4, lr: 3e-3, grad_clip: 0.0, pretrain_steps: 0, freeze_backbone: false, ..TrainConfig::default() };
    let mut opt = AdamW::new(&model.store, tc.lr, tc.weight_decay);
    for step in 1..=300 {
        train_step(&mut model, &mut opt, &data, &tc, step).unwrap();
    }
    let w = LossWeights::default();
    for (i, s) in data.iter().enumerate() {
        let mut g = Graph::new(&model.store);
        let out = model.forward_sample(&mut g, s);
        let pred = QueryPrediction::from_tape(&g, out.boxes, out.logits);
        let a = match_predictions(&pred, &[s.bbox], &w);
        let q = a.pairs[0].0;
        let pb = BoxCxcywh::from_array(pred.boxes[q]);
        println!(
            "sample {i} '{}': matched q{q} pred=({:.3},{:.3},{:.3},{:.3}) tgt=({:.3},{:.3},{:.3},{:.3}) giou={:.3} probs={:?}",
            s.expression(), pb.cx, pb.cy, pb.w, pb.h,
            s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h,
            giou(pb.to_xyxy(), s.bbox.to_xyxy()),
            pred.object_probs().iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}

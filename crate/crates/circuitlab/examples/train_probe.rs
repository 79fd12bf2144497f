// probe: task learnability at desk scale
use circuitlab::posttrain::{evaluate, pretrain, PretrainConfig};
use circuitlab::taskgen::{TaskSpec, VocabRegion};
use circuitlab::tinyformer::{ModelConfig, TinyTransformer};

fn main() {
    let tasks: Vec<(&str, TaskSpec)> = vec![
        ("ioi", TaskSpec::IoiLike { region: VocabRegion::new(2, 12), seq_len: 8, seed: 0 }),
        ("greater", TaskSpec::GreaterThan { region: VocabRegion::new(2, 12), seq_len: 8, seed: 0 }),
        ("induction", TaskSpec::Induction { region: VocabRegion::new(2, 12), seq_len: 8, seed: 0 }),
    ];
    for (name, spec) in &tasks {
        let train = spec.generate(6000, 1).unwrap();
        let eval = spec.generate(128, 9).unwrap();
        let mut model = TinyTransformer::new(ModelConfig {
            n_layers: 2, n_heads: 2, d_model: 32, d_ff: 64,
            vocab_size: 16, max_seq_len: 8, init_seed: 11,
        }).unwrap();
        let t0 = std::time::Instant::now();
        for round in 0..6 {
            let r = pretrain(&mut model, &train, &PretrainConfig {
                steps: 500, learning_rate: 2e-3, batch_size: 16, weight_decay: 0.01, seed: round,
            }).unwrap();
            let acc = evaluate(&model, &eval).unwrap();
            println!("{name}: steps={} loss={:.4} acc={acc:.3} ({:.1?})", (round+1)*500, r.final_loss, t0.elapsed());
        }
    }
}

//! Trains the reference model on the synthetic shapes corpus and reports Dice.
//!
//! `cargo run --release -p pathsegkit --example synthetic_overfit -- [epochs] [patch] [dim] [queries] [lr]`

use std::ops::ControlFlow;
use std::time::Instant;

use pathsegkit::metrics::dice;
use pathsegkit::model::{train_with, ModelConfig, Sample, SegModel, TrainConfig, Vocab};
use pathsegkit::synthetic::{default_categories, generate_corpus, CorpusConfig};

fn mean_dice(model: &SegModel, data: &[Sample]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|s| dice(&model.forward(&s.image, &s.prompt).unwrap().mask(0.5), &s.mask).unwrap())
        .sum();
    total / data.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|a| a.parse().ok()).unwrap_or(d);
    let epochs = arg(0, 500.0) as usize;
    let cats = default_categories();
    let corpus = generate_corpus(&cats, &CorpusConfig::default());
    let samples: Vec<Sample> = corpus.iter().map(|s| s.to_sample()).collect();
    let (train, test) = samples.split_at(160);
    let config = ModelConfig {
        patch_size: arg(1, 2.0) as usize,
        dim: arg(2, 16.0) as usize,
        queries: arg(3, 8.0) as usize,
        ..ModelConfig::default()
    };
    let prompts: Vec<String> = cats.iter().map(|c| c.prompt()).collect();
    let vocab = Vocab::from_prompts(prompts.iter().map(String::as_str));
    let model = SegModel::new(config, vocab, 0).unwrap();
    let cfg = TrainConfig { epochs, learning_rate: arg(4, 1e-2), ..TrainConfig::default() };
    let start = Instant::now();
    let (model, _) = train_with(&model, train, &cfg, |s, m| {
        if s.epoch % 10 == 0 {
            eprintln!(
                "epoch {:4} loss {:.4} bce {:.4} dice_loss {:.4} align {:.4} train_dice {:.3} test_dice {:.3} [{:.0}s]",
                s.epoch,
                s.loss,
                s.bce,
                s.dice_loss,
                s.alignment,
                mean_dice(m, &train[..40]),
                mean_dice(m, test),
                start.elapsed().as_secs_f64()
            );
        }
        ControlFlow::Continue(())
    })
    .unwrap();
    println!("train dice {:.4} test dice {:.4} in {:.0}s", mean_dice(&model, train), mean_dice(&model, test), start.elapsed().as_secs_f64());
}

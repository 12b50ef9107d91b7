//! End-to-end training on the shapes corpus: prompt conditioning and checkpoints.

use pathsegkit::metrics::dice;
use pathsegkit::model::checkpoint::{from_json, to_json};
use pathsegkit::model::{train, ModelConfig, Sample, SegModel, TrainConfig, Vocab};
use pathsegkit::synthetic::{default_categories, generate_corpus, CorpusConfig, ShapeCategory, SyntheticSample};

fn trained(categories: &[ShapeCategory], corpus: &[SyntheticSample]) -> SegModel {
    let samples: Vec<Sample> = corpus.iter().map(SyntheticSample::to_sample).collect();
    let prompts: Vec<String> = categories.iter().map(ShapeCategory::prompt).collect();
    let config = ModelConfig { patch_size: 2, queries: 8, ..ModelConfig::default() };
    let model = SegModel::new(config, Vocab::from_prompts(prompts.iter().map(String::as_str)), 1).unwrap();
    train(&model, &samples, &TrainConfig { epochs: 15, ..TrainConfig::default() }).unwrap().0
}

#[test]
fn prompt_selects_the_named_shape() {
    let categories = default_categories();
    let corpus = generate_corpus(&categories, &CorpusConfig { count: 90, distractor_prob: 1.0, seed: 3, ..CorpusConfig::default() });
    let model = trained(&categories, &corpus);
    let mut own = 0.0;
    let mut swapped = 0.0;
    for s in &corpus {
        own += dice(&model.forward(&s.image, &s.prompt).unwrap().mask(0.5), &s.mask).unwrap();
        let other = categories[(s.category + 1) % categories.len()].prompt();
        swapped += dice(&model.forward(&s.image, &other).unwrap().mask(0.5), &s.mask).unwrap();
    }
    let n = corpus.len() as f64;
    assert!(own / n > 0.9, "own-prompt dice {}", own / n);
    assert!(swapped / n < 0.2, "other-prompt dice {}", swapped / n);
}

#[test]
fn checkpoint_preserves_predictions() {
    let categories = default_categories();
    let corpus = generate_corpus(&categories, &CorpusConfig { count: 12, ..CorpusConfig::default() });
    let model = trained(&categories, &corpus);
    let restored = from_json(&to_json(&model)).unwrap();
    for s in corpus.iter().take(3) {
        assert_eq!(model.forward(&s.image, &s.prompt).unwrap(), restored.forward(&s.image, &s.prompt).unwrap());
    }
}

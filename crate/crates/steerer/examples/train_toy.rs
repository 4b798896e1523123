//! End-to-end toy run: generate a tiny corpus, train for a few epochs, then
//! evaluate counting and localization on the validation split.
//!
//!     cargo run --release --example train_toy

use steerer::harness::{evaluate, load_dataset, restore_model, train, RunConfig, TrainOptions};
use steerer::model::BackboneConfig;
use steerer::synth::{write_corpus, CorpusSpec, SceneSpec, Split};

fn main() -> steerer::Result<()> {
    let root = std::path::PathBuf::from("target/toy-run");
    let mut cfg = RunConfig::default();
    cfg.corpus_root = root.join("corpus");
    cfg.out_dir = root.join("out");
    cfg.seed = 5;
    cfg.model.backbone = BackboneConfig {
        levels: 2,
        channels: 16,
        ..BackboneConfig::default()
    };
    cfg.loss.patch_px = 32;
    cfg.optim.epochs = 8;
    cfg.optim.warmup_epochs = 2;
    cfg.gen.image_h = 64;
    cfg.gen.image_w = 64;
    cfg.localize.threshold = 0.02;

    let spec = CorpusSpec {
        scene: SceneSpec {
            height: 64,
            width: 64,
            classes: vec![steerer::synth::BlobClass {
                radius: 3.0,
                count_min: 3,
                count_max: 7,
                intensity_min: 0.6,
                intensity_max: 1.0,
            }],
            render_width: 0.5,
            noise_amplitude: 0.05,
            min_separation: 12.0,
            placement_margin: 10.0,
            max_place_tries: 1000,
        },
        train: 32,
        val: 8,
        test: 0,
    };
    write_corpus(&cfg.corpus_root, &spec, cfg.seed)?;

    let outcome = train(&cfg, TrainOptions { verbose: false })?;
    for m in &outcome.history {
        println!("{}", m.to_line());
    }

    let ckpt = steerer::harness::load_checkpoint(&outcome.checkpoint_path)?;
    let mut model = restore_model(&ckpt)?;
    let dataset = load_dataset(&cfg)?;
    let report = evaluate(&mut model, &cfg, &dataset.val, Split::Val)?;
    print!("{}", report.to_text());
    Ok(())
}

//! Shared fixtures for the acceptance suite: one two-scale corpus and one
//! trained steering model, built lazily and reused across criteria.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use steerer::harness::{train, RunConfig, TrainOptions, TrainOutcome};
use steerer::model::FusionMode;
use steerer::synth::{write_corpus, BlobClass, CorpusSpec, SceneSpec};

pub const C6_SEED: u64 = 101;
pub const C6_EPOCHS: usize = 40;
pub const C7_SEEDS: &[u64] = &[201, 202, 203];
pub const C7_EPOCHS: usize = 18;

fn acceptance_root() -> &'static Path {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
            .join(format!("acceptance-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p).unwrap();
        p
    })
}

/// The criterion-6 corpus: 200 train / 50 val scenes at 128x128 with ~20
/// small blobs (r = 2) and ~3 large blobs (r = 12) per scene.
pub fn corpus_root() -> &'static Path {
    static CORPUS: OnceLock<PathBuf> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let root = acceptance_root().join("corpus");
        // Large blobs are wide and dim (ambiguous at small receptive
        // fields); small blobs are tight and bright. Separation and margins
        // keep kernels peak-separable and fully interior.
        let spec = CorpusSpec {
            scene: SceneSpec {
                height: 128,
                width: 128,
                classes: vec![
                    BlobClass {
                        radius: 12.0,
                        count_min: 3,
                        count_max: 5,
                        intensity_min: 0.1,
                        intensity_max: 0.22,
                    },
                    BlobClass {
                        radius: 2.0,
                        count_min: 12,
                        count_max: 24,
                        intensity_min: 0.65,
                        intensity_max: 1.0,
                    },
                ],
                render_width: 1.0,
                noise_amplitude: 0.06,
                min_separation: 13.0,
                placement_margin: 12.0,
                max_place_tries: 1000,
            },
            train: 200,
            val: 50,
            test: 0,
        };
        write_corpus(&root, &spec, 4242).unwrap();
        root
    })
}

/// Training configuration over the shared corpus.
pub fn run_config(fusion: FusionMode, seed: u64, epochs: usize, tag: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus_root = corpus_root().to_path_buf();
    cfg.out_dir = acceptance_root().join(format!("run-{tag}"));
    cfg.seed = seed;
    cfg.model.fusion = fusion;
    cfg.loss.patch_px = 32;
    cfg.loss.full_mask_epochs = 10.min(epochs / 2);
    cfg.optim.peak_lr = 1e-3;
    cfg.optim.epochs = epochs;
    cfg.optim.warmup_epochs = 4.min(epochs / 2);
    cfg.optim.batch_size = 4;
    cfg.density.sigma0 = 1.0;
    cfg.localize.threshold = 0.015;
    cfg
}

/// Replace the shared corpus with a small private one (for the determinism
/// criterion, which retrains twice and does not need the full corpus).
pub fn make_corpus(cfg: &mut RunConfig, tag: &str) {
    let root = acceptance_root().join(format!("corpus-{tag}"));
    let spec = CorpusSpec {
        scene: SceneSpec {
            height: 64,
            width: 64,
            classes: vec![BlobClass {
                radius: 3.0,
                count_min: 2,
                count_max: 6,
                intensity_min: 0.6,
                intensity_max: 1.0,
            }],
            render_width: 0.5,
                noise_amplitude: 0.05,
            min_separation: 12.0,
            placement_margin: 10.0,
            max_place_tries: 1000,
        },
        train: cfg.gen.train,
        val: cfg.gen.val,
        test: 0,
    };
    write_corpus(&root, &spec, cfg.seed).unwrap();
    cfg.corpus_root = root;
    cfg.loss.patch_px = 32;
    cfg.model.backbone.levels = 2;
    cfg.model.backbone.channels = 8;
    cfg.loss.patch_px = 16;
}

/// The trained criterion-6 model, shared with the localization criterion.
pub fn c6_outcome() -> &'static TrainOutcome {
    static C6: OnceLock<TrainOutcome> = OnceLock::new();
    C6.get_or_init(|| {
        let cfg = run_config(FusionMode::Steerer, C6_SEED, C6_EPOCHS, "c6");
        train(&cfg, TrainOptions::default()).unwrap()
    })
}

//! Generate a small two-scale synthetic corpus and reload it with checksum
//! verification.
//!
//!     cargo run --example make_corpus [root]

use steerer::synth::{load_scene, read_corpus, write_corpus, CorpusSpec, SceneSpec, Split};

fn main() -> steerer::Result<()> {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/demo-corpus".into());
    let root = std::path::PathBuf::from(root);

    let spec = CorpusSpec {
        scene: SceneSpec::default(), // small blobs r=2, large blobs r=12, 128x128
        train: 12,
        val: 4,
        test: 2,
    };
    let manifest = write_corpus(&root, &spec, 7)?;
    println!(
        "wrote {} scenes under {} (spec hash {:016x})",
        manifest.entries.len(),
        root.display(),
        manifest.spec_hash
    );

    let reloaded = read_corpus(&root)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let entries = reloaded.split_entries(split);
        let mut objects = 0;
        for e in &entries {
            objects += load_scene(&root, e)?.points.len();
        }
        println!(
            "{:<5} {} scenes, {} annotated objects",
            split.as_str(),
            entries.len(),
            objects
        );
    }
    Ok(())
}

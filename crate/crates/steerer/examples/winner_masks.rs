//! Patch-winner selection and mask inheritance on a constructed two-level
//! instance: one resolution predicts the left half well, the other the
//! right half, and the masks show who wins where and what is inherited.
//!
//!     cargo run --example winner_masks

use steerer::densitymap::DensityMap;
use steerer::steering::{build_mask_pyramid, pwsp_select, DEFAULT_EPSILON};

fn map_with(level: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> DensityMap {
    let mut m = DensityMap::zeros(level, h, w);
    for r in 0..h {
        for c in 0..w {
            m.data[r * w + c] = f(r, c);
        }
    }
    m
}

fn main() -> steerer::Result<()> {
    // A 128x64 image at levels 0 and 1, patch size 32px: a 2x4 patch grid.
    let gt0 = map_with(0, 16, 32, |_, c| if c < 16 { 0.2 } else { 0.05 });
    let gt1 = map_with(1, 8, 16, |_, c| if c < 8 { 0.2 } else { 0.05 });

    // Level 0 nails the left half and is noisy on the right; level 1 is the
    // opposite.
    let pred0 = map_with(0, 16, 32, |_, c| if c < 16 { 0.2 } else { 0.15 });
    let pred1 = map_with(1, 8, 16, |_, c| if c < 8 { 0.1 } else { 0.05 });

    let grid = pwsp_select(&[gt0, gt1], &[pred0, pred1], 32, DEFAULT_EPSILON)?;
    println!("selection grid ({}x{} patches, labels = winning level):", grid.rows, grid.cols);
    print!("{}", grid.to_text_grid());

    let masks = build_mask_pyramid(&grid, 1, &[(16, 32), (8, 16)])?;
    for (j, m) in masks.onehot.iter().enumerate() {
        println!("one-hot mask, level {j}:");
        print!("{}", m.to_text_grid());
    }
    for (j, m) in masks.inherited.iter().enumerate() {
        println!("inherited mask, level {j} (own patches + every coarser level's):");
        print!("{}", m.to_text_grid());
    }
    println!(
        "upsampled level-0 mask covers {}/{} density cells",
        masks.upsampled[0].sum(),
        masks.upsampled[0].data.len()
    );
    Ok(())
}

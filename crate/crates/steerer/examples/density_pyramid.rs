//! Build a multi-resolution ground-truth density pyramid from point
//! annotations and show that interior points conserve their count at every
//! level.
//!
//!     cargo run --example density_pyramid

use steerer::densitymap::{gt_pyramid, Point, PointSet};
use steerer::rng::Rng;

fn main() -> steerer::Result<()> {
    let mut rng = Rng::seeded(3);
    // Points kept well inside a 256x256 image: even the coarsest 8x8 grid
    // keeps their full kernel support.
    let points = PointSet::new(
        (0..12)
            .map(|_| Point::new(rng.uniform_in(100.0, 156.0), rng.uniform_in(100.0, 156.0)))
            .collect(),
    );

    let levels = 3;
    let pyramid = gt_pyramid(&points, (256, 256), levels, 2.0)?;
    println!("{} annotated points", points.len());
    for map in &pyramid {
        println!(
            "level {}: {:>3}x{:<3} cells (stride {:>2}px)  sum = {:.9}",
            map.level,
            map.h,
            map.w,
            map.stride(),
            map.sum()
        );
    }

    // A point near the border loses the clipped kernel mass instead.
    let edge = PointSet::new(vec![Point::new(1.0, 1.0)]);
    let clipped = gt_pyramid(&edge, (256, 256), levels, 2.0)?;
    println!(
        "corner point mass at level 0: {:.6} (< 1: clipped at the border)",
        clipped[0].sum()
    );
    Ok(())
}

//! The localization pipeline on known-good input: rasterize well-separated
//! points into a density map, extract local maxima, and score the result
//! with one-to-one matching. Perfect input gives F1 = 1.
//!
//!     cargo run --example localize_gt

use steerer::densitymap::{downscale_points, rasterize_density, Point, PointSet};
use steerer::metrics::{extract_maxima, match_points, prf, MatchSigma};

fn main() -> steerer::Result<()> {
    // Nine points on a loose lattice, at least 24px apart, radius 4.
    let mut points = Vec::new();
    for i in 0..3 {
        for k in 0..3 {
            points.push(Point::with_radius(
                26.0 + 30.0 * i as f64 + 3.0 * ((i + k) % 2) as f64,
                25.0 + 30.0 * k as f64,
                4.0,
            ));
        }
    }
    let gt = PointSet::new(points);

    // Level-0 density map of a 128x128 image (32x32 cells, stride 4).
    let map = rasterize_density(&downscale_points(&gt, 0), (32, 32), 2.0, 0)?;
    println!("density mass = {:.6} for {} points", map.sum(), gt.len());

    let found = extract_maxima(&map, 0.01, 3)?;
    println!("extracted {} maxima", found.len());

    let result = match_points(&found, &gt, MatchSigma::PerPointRadius { min: 4.0 })?;
    let (p, r, f1) = prf(&result);
    println!(
        "tp={} fp={} fn={}  precision={p:.3} recall={r:.3} f1={f1:.3}",
        result.true_positives, result.false_positives, result.false_negatives
    );
    for pair in result.pairs.iter().take(3) {
        println!(
            "  match: detection {} -> point {} at distance {:.2}px",
            pair.pred_index, pair.gt_index, pair.distance
        );
    }
    Ok(())
}

//! Ground-truth density maps from point annotations.
//!
//! Level j lives at stride 2^(j+2): a level-j map of an HxW image has
//! h_j = H / 2^(j+2) rows. Every pyramid-like list in this crate is indexed
//! by level, finest (j = 0) first.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Image-space stride of one level-`level` density cell.
pub fn level_stride(level: usize) -> usize {
    1 << (level + 2)
}

/// A 2-D object-center annotation in image pixels, with an optional match
/// radius used by localization scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub radius: Option<f64>,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y, radius: None }
    }

    pub fn with_radius(x: f64, y: f64, radius: f64) -> Self {
        Point {
            x,
            y,
            radius: Some(radius),
        }
    }
}

/// An ordered list of annotated points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Single-channel non-negative grid whose sum approximates the object count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(level: usize, h: usize, w: usize) -> Self {
        DensityMap {
            level,
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn stride(&self) -> usize {
        level_stride(self.level)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// View as a (1, 1, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.h, self.w), self.data.clone()).expect("density shape")
    }

    /// Reinterpret a single-image single-channel tensor as a density map.
    pub fn from_tensor(t: &Tensor, level: usize) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::invalid(
                "density_from_tensor",
                format!("expected a 1x1xHxW tensor, got {s}"),
            ));
        }
        Ok(DensityMap {
            level,
            h: s.h,
            w: s.w,
            data: t.data().to_vec(),
        })
    }
}

/// Divide coordinates by the level stride 2^(level+2); counts are unchanged.
pub fn downscale_points(pts: &PointSet, level: usize) -> PointSet {
    let s = level_stride(level) as f64;
    PointSet::new(
        pts.points
            .iter()
            .map(|p| Point {
                x: p.x / s,
                y: p.y / s,
                radius: p.radius,
            })
            .collect(),
    )
}

/// Accumulate one truncated Gaussian kernel per point.
///
/// Each kernel is evaluated at cell centers inside a square window of radius
/// ceil(3*sigma), renormalized to sum exactly one over that window, and then
/// clipped to the grid; interior points therefore contribute exactly unit
/// mass, while points near the border lose the clipped fraction.
pub fn rasterize_density(
    pts: &PointSet,
    shape: (usize, usize),
    sigma: f64,
    level: usize,
) -> Result<DensityMap> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::invalid(
            "rasterize_density",
            format!("non-positive shape {h}x{w}"),
        ));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid(
            "rasterize_density",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    let mut map = DensityMap::zeros(level, h, w);
    let radius = (3.0 * sigma).ceil() as i64;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for p in &pts.points {
        // Window of cells whose centers fall within the truncation radius.
        let c0 = (p.x - 0.5 - radius as f64).floor() as i64;
        let r0 = (p.y - 0.5 - radius as f64).floor() as i64;
        let c1 = (p.x - 0.5 + radius as f64).ceil() as i64;
        let r1 = (p.y - 0.5 + radius as f64).ceil() as i64;
        let col_w: Vec<(i64, f64)> = (c0..=c1)
            .map(|c| {
                let d = c as f64 + 0.5 - p.x;
                let wv = if d.abs() <= radius as f64 {
                    (-d * d * inv2s2).exp()
                } else {
                    0.0
                };
                (c, wv)
            })
            .collect();
        let row_w: Vec<(i64, f64)> = (r0..=r1)
            .map(|r| {
                let d = r as f64 + 0.5 - p.y;
                let wv = if d.abs() <= radius as f64 {
                    (-d * d * inv2s2).exp()
                } else {
                    0.0
                };
                (r, wv)
            })
            .collect();
        let total: f64 = row_w.iter().map(|(_, wv)| wv).sum::<f64>()
            * col_w.iter().map(|(_, wv)| wv).sum::<f64>();
        if total <= 0.0 {
            continue;
        }
        for &(r, wr) in &row_w {
            if r < 0 || r >= h as i64 || wr == 0.0 {
                continue;
            }
            for &(c, wc) in &col_w {
                if c < 0 || c >= w as i64 || wc == 0.0 {
                    continue;
                }
                map.data[r as usize * w + c as usize] += wr * wc / total;
            }
        }
    }
    Ok(map)
}

/// Per-level kernel width: sigma0 shrinks with the level but never below one
/// cell, so kernels stay resolvable on coarse grids.
pub fn level_sigma(sigma0: f64, level: usize) -> f64 {
    (sigma0 / (1u64 << level) as f64).max(1.0)
}

/// Ground-truth pyramid: `levels + 1` maps, one per resolution, finest first.
pub fn gt_pyramid(
    pts: &PointSet,
    image_shape: (usize, usize),
    levels: usize,
    sigma0: f64,
) -> Result<Vec<DensityMap>> {
    let (ih, iw) = image_shape;
    let divisor = level_stride(levels);
    if ih == 0 || iw == 0 || ih % divisor != 0 || iw % divisor != 0 {
        return Err(Error::IndivisibleShape {
            what: "gt_pyramid image",
            h: ih,
            w: iw,
            divisor,
        });
    }
    (0..=levels)
        .map(|j| {
            let scaled = downscale_points(pts, j);
            let s = level_stride(j);
            rasterize_density(&scaled, (ih / s, iw / s), level_sigma(sigma0, j), j)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// annotation file format: one "x y [radius]" line per point, '#' comments
// ---------------------------------------------------------------------------

pub fn write_points(path: &Path, pts: &PointSet) -> Result<()> {
    let mut out = String::new();
    for p in &pts.points {
        match p.radius {
            Some(r) => out.push_str(&format!("{:.6} {:.6} {:.6}\n", p.x, p.y, r)),
            None => out.push_str(&format!("{:.6} {:.6}\n", p.x, p.y)),
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<PointSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected `x y [radius]`, got {} fields", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 3];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))?;
        }
        let radius = if fields.len() == 3 {
            if vals[2] <= 0.0 {
                return Err(Error::parse(path, lineno, "radius must be positive"));
            }
            Some(vals[2])
        } else {
            None
        };
        points.push(Point {
            x: vals[0],
            y: vals[1],
            radius,
        });
    }
    Ok(PointSet::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscale_divides_by_level_stride() {
        let pts = PointSet::new(vec![Point::new(64.0, 64.0)]);
        let l0 = downscale_points(&pts, 0);
        assert_eq!(l0.points[0], Point::new(16.0, 16.0));
        let l3 = downscale_points(&pts, 3);
        assert_eq!(l3.points[0], Point::new(2.0, 2.0));
        assert!(downscale_points(&PointSet::default(), 2).is_empty());
    }

    #[test]
    fn interior_kernel_sums_to_one() {
        let pts = PointSet::new(vec![Point::new(16.3, 15.2)]);
        for sigma in [0.7, 1.5, 2.0, 4.0] {
            let map = rasterize_density(&pts, (32, 32), sigma, 0).unwrap();
            assert!(
                (map.sum() - 1.0).abs() < 1e-9,
                "sigma {sigma}: {}",
                map.sum()
            );
            assert!(map.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn coincident_points_add() {
        let pts = PointSet::new(vec![Point::new(10.0, 10.0), Point::new(10.0, 10.0)]);
        let map = rasterize_density(&pts, (24, 24), 1.5, 0).unwrap();
        assert!((map.sum() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn corner_point_loses_exactly_the_clipped_mass() {
        let sigma = 2.0;
        let pts = PointSet::new(vec![Point::new(0.0, 0.0)]);
        let map = rasterize_density(&pts, (20, 20), sigma, 0).unwrap();

        // Direct kernel-window summation oracle: renormalized weights over
        // all cells whose centers lie within the truncation radius of the
        // point, accumulated only over in-bounds cells.
        let radius = (3.0 * sigma).ceil() as i64;
        let weight = |d: f64| {
            if d.abs() <= radius as f64 {
                (-d * d / (2.0 * sigma * sigma)).exp()
            } else {
                0.0
            }
        };
        let mut total = 0.0;
        let mut inside = 0.0;
        for r in -radius - 1..=radius + 1 {
            for c in -radius - 1..=radius + 1 {
                let wv = weight(r as f64 + 0.5) * weight(c as f64 + 0.5);
                total += wv;
                if r >= 0 && c >= 0 {
                    inside += wv;
                }
            }
        }
        let expect = inside / total;
        assert!(expect < 1.0);
        assert!(
            (map.sum() - expect).abs() < 1e-9,
            "sum {} vs oracle {expect}",
            map.sum()
        );
    }

    #[test]
    fn pyramid_shapes_halve_per_level() {
        let pts = PointSet::new(vec![Point::new(64.0, 64.0)]);
        let pyr = gt_pyramid(&pts, (128, 128), 3, 2.0).unwrap();
        let shapes: Vec<(usize, usize)> = pyr.iter().map(|m| (m.h, m.w)).collect();
        assert_eq!(shapes, vec![(32, 32), (16, 16), (8, 8), (4, 4)]);
        for (j, m) in pyr.iter().enumerate() {
            assert_eq!(m.level, j);
            assert_eq!(m.stride(), 1 << (j + 2));
        }
    }

    #[test]
    fn pyramid_rejects_indivisible_shape() {
        let err = gt_pyramid(&PointSet::default(), (100, 128), 3, 2.0).unwrap_err();
        assert!(matches!(err, Error::IndivisibleShape { .. }));
    }

    #[test]
    fn interior_point_conserved_at_every_level() {
        // 256x256 with N=3: the level-3 grid is 8x8 cells of stride 32; a
        // point near the center sits >= 3 cells from every border at all
        // levels, so no kernel mass is clipped anywhere.
        let pts = PointSet::new(vec![Point::new(128.0, 126.0)]);
        let pyr = gt_pyramid(&pts, (256, 256), 3, 2.0).unwrap();
        for m in &pyr {
            assert!(
                (m.sum() - 1.0).abs() < 1e-6,
                "level {}: sum {}",
                m.level,
                m.sum()
            );
        }
    }

    #[test]
    fn many_interior_points_sum_to_count() {
        let mut rng = crate::rng::Rng::seeded(5);
        let pts = PointSet::new(
            (0..10)
                .map(|_| Point::new(rng.uniform_in(100.0, 156.0), rng.uniform_in(100.0, 156.0)))
                .collect(),
        );
        let pyr = gt_pyramid(&pts, (256, 256), 3, 2.0).unwrap();
        for m in &pyr {
            assert!(
                (m.sum() - 10.0).abs() < 1e-5,
                "level {}: sum {}",
                m.level,
                m.sum()
            );
        }
    }

    #[test]
    fn level_sigma_floors_at_one_cell() {
        assert_eq!(level_sigma(2.0, 0), 2.0);
        assert_eq!(level_sigma(2.0, 1), 1.0);
        assert_eq!(level_sigma(2.0, 3), 1.0);
        assert_eq!(level_sigma(8.0, 2), 2.0);
    }

    #[test]
    fn annotation_round_trip_and_errors() {
        let dir = std::env::temp_dir().join("steerer-dm-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pts.txt");
        let pts = PointSet::new(vec![
            Point::new(1.5, 2.25),
            Point::with_radius(12.0, 3.125, 4.0),
        ]);
        write_points(&path, &pts).unwrap();
        let back = read_points(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.points.iter().zip(&pts.points) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
            assert_eq!(a.radius.is_some(), b.radius.is_some());
        }

        fs::write(&path, "1.0 2.0\n# comment\n\n3.0\n").unwrap();
        let err = read_points(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

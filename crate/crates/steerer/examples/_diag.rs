use steerer::densitymap::{gt_pyramid, DensityMap};
use steerer::harness::{load_checkpoint, load_dataset, restore_model, evaluate};
use steerer::steering::pwsp_select;
use steerer::synth::Split;
use steerer::tensor::Tape;

fn main() {
    let ckpt_path = std::env::args().nth(1).unwrap();
    let ckpt = load_checkpoint(std::path::Path::new(&ckpt_path)).unwrap();
    let cfg = ckpt.config.clone();
    let mut model = restore_model(&ckpt).unwrap();
    let dataset = load_dataset(&cfg).unwrap();
    let levels = model.levels();
    let patch = cfg.loss.patch_px;

    let mut stats = vec![[0usize; 5]; 3]; // [class][level or total] class: 0 large-only 1 small-only 2 other
    let mut cost_log: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut cost_sums = vec![vec![0.0f64; 4]; 3];
    for scene in &dataset.val {
        let mut tape = Tape::new();
        let input = tape.constant(scene.image.to_tensor());
        let out = model.forward(&mut tape, input, false).unwrap();
        let gt = gt_pyramid(&scene.points, (scene.image.h, scene.image.w), levels, cfg.density.sigma0).unwrap();
        let preds: Vec<DensityMap> = (0..=levels)
            .map(|j| { let mut m = DensityMap::from_tensor(tape.value(out.preds[j]), j).unwrap();
                       for v in &mut m.data { *v /= cfg.density.scale; } m })
            .collect();
        let grid = pwsp_select(&gt, &preds, patch, cfg.loss.epsilon).unwrap();
        for p in 0..grid.rows {
            for q in 0..grid.cols {
                let (x0, y0) = ((q * patch) as f64, (p * patch) as f64);
                let (x1, y1) = (x0 + patch as f64, y0 + patch as f64);
                let mut large = 0; let mut small = 0;
                for pt in &scene.points.points {
                    if pt.x >= x0 && pt.x < x1 && pt.y >= y0 && pt.y < y1 {
                        if pt.radius.unwrap_or(0.0) >= 8.0 { large += 1 } else { small += 1 }
                    }
                }
                let class = match (large, small) { (1.., 0) => 0, (0, 1..) => 1, _ => 2 };
                stats[class][grid.label(p, q)] += 1;
                stats[class][4] += 1;
                let mut costs = Vec::new();
                for j in 0..=levels {
                    let cells = patch / (1 << (j + 2));
                    let mut sse = 0.0; let mut l1 = 0.0;
                    for r in 0..cells { for c in 0..cells {
                        let y = gt[j].at(p * cells + r, q * cells + c);
                        let d = y - preds[j].at(p * cells + r, q * cells + c);
                        sse += d * d; l1 += y;
                    }}
                    costs.push(sse / (cells*cells) as f64 + sse / (l1 + cfg.loss.epsilon));
                }
                for j in 0..=levels { cost_sums[class][j] += costs[j]; }
                if class == 0 && cost_log.len() < 8 {
                    cost_log.push((grid.label(p, q), costs));
                }
            }
        }
    }
    for (name, s) in [("large-only", stats[0]), ("small-only", stats[1]), ("other", stats[2])] {
        println!("{name:>10}: total {:4}  by level: {} {} {} {}", s[4], s[0], s[1], s[2], s[3]);
    }
    for (name, k) in [("large-only", 0), ("small-only", 1), ("other", 2)] {
        let n = stats[k][4].max(1) as f64;
        let means: Vec<String> = cost_sums[k].iter().map(|c| format!("{:.2}", c / n)).collect();
        println!("{name:>10} mean costs by level: {}", means.join("  "));
    }
    for (label, costs) in &cost_log {
        println!("large-only patch -> label {label}, costs {:?}", costs.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>());
    }
    let report = evaluate(&mut model, &cfg, &dataset.val, Split::Val).unwrap();
    print!("{}", report.to_text());
}

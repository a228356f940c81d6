//! Oracles shared by several test targets.

use cellsynth::raster::LabelMask;

/// SEG by enumerating every (gt, pred) label pair and scanning pixels.
/// `None` when the ground truth has no objects.
pub fn brute_force_seg(gt: &[LabelMask], pred: &[LabelMask]) -> Option<f64> {
    let mut total = 0.0;
    let mut objects = 0usize;
    for (g, p) in gt.iter().zip(pred) {
        for gl in g.labels() {
            objects += 1;
            let g_area = g.data().iter().filter(|&&v| v == gl).count();
            let mut best = 0.0;
            for pl in p.labels() {
                let p_area = p.data().iter().filter(|&&v| v == pl).count();
                let inter = g.data().iter().zip(p.data()).filter(|(a, b)| **a == gl && **b == pl).count();
                if 2 * inter > g_area {
                    best = inter as f64 / (g_area + p_area - inter) as f64;
                }
            }
            total += best;
        }
    }
    (objects > 0).then(|| total / objects as f64)
}

/// Label raster built from 2×2 blocks of `cells`, so labels form regions
/// rather than salt noise.
pub fn blocky(w: usize, h: usize, cells: &[u16]) -> LabelMask {
    let data = (0..w * h).map(|i| cells[(i % w) / 2 + (i / w) / 2 * w]).collect();
    LabelMask::new(w, h, data).unwrap()
}

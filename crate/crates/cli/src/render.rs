//! 8-bit renderings of slice maps and event stacks.

use evmotion::events::SliceMap;
use evmotion::grid::Grid;

/// Counts saturate at 255.
pub fn count_image(counts: &Grid<u32>) -> Grid<u8> {
    counts.map(|&c| c.min(255) as u8)
}

/// Mean normalized timestamp scaled to 0..=255.
pub fn time_image(time: &Grid<f64>) -> Grid<u8> {
    time.map(|&t| (t.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Per-pixel event count over all maps.
pub fn event_stack(maps: &[SliceMap], width: usize, height: usize) -> Grid<u32> {
    let mut out = Grid::filled(width, height, 0u32);
    for m in maps {
        for i in 0..out.len() {
            out[i] += m.pos_count[i] + m.neg_count[i];
        }
    }
    out
}

/// Linear gray scale with `max` mapped to 255.
pub fn scaled_image(counts: &Grid<u32>, max: u32) -> Grid<u8> {
    let max = max.max(1) as f64;
    counts.map(|&c| ((c as f64 / max).min(1.0) * 255.0).round() as u8)
}

//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the library's geometry or stitching code.

#![allow(dead_code)]

use rand::Rng;

/// Window start positions along one axis: every multiple of `step` that keeps
/// the window inside the extent, then the flush-right position if missing.
pub fn oracle_positions(extent: usize, window: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = 0;
    while s + window <= extent {
        out.push(s);
        s += step;
    }
    if out.last() != Some(&(extent - window)) {
        out.push(extent - window);
    }
    out
}

/// All placements as (item, start) with the last axis varying fastest.
pub fn oracle_placements(
    items: usize,
    spatial: &[usize],
    window: &[usize],
    step: &[usize],
) -> Vec<(usize, Vec<usize>)> {
    let axes: Vec<Vec<usize>> = (0..spatial.len())
        .map(|a| oracle_positions(spatial[a], window[a], step[a]))
        .collect();
    let mut starts: Vec<Vec<usize>> = vec![vec![]];
    for positions in &axes {
        starts = starts
            .into_iter()
            .flat_map(|prefix| {
                positions.iter().map(move |&p| {
                    let mut s = prefix.clone();
                    s.push(p);
                    s
                })
            })
            .collect();
    }
    (0..items)
        .flat_map(|n| starts.iter().map(move |s| (n, s.clone())))
        .collect()
}

/// Weight of window-local voxel `offset` for a window at `start`.
pub fn oracle_weight(
    offset: &[usize],
    start: &[usize],
    spatial: &[usize],
    window: &[usize],
    border: &[usize],
    border_weight: f64,
) -> f64 {
    for a in 0..offset.len() {
        let touches_low = start[a] == 0;
        let touches_high = start[a] + window[a] == spatial[a];
        let low = offset[a] < border[a] && !touches_low;
        let high = offset[a] + border[a] >= window[a] && !touches_high;
        if low || high {
            return border_weight;
        }
    }
    1.0
}

/// Unravels a C-order flat index.
pub fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

pub fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

#[derive(Debug, Clone)]
pub struct RandomSpec {
    pub spatial: Vec<usize>,
    pub window: Vec<usize>,
    pub step: Vec<usize>,
    pub border: Vec<usize>,
    pub border_weight: f32,
}

/// Draws a geometry that satisfies every window-spec constraint, including
/// step <= window - 2*border on each axis when the border weight is zero.
pub fn random_spec(rng: &mut impl Rng, rank: usize, max_extent: usize) -> RandomSpec {
    let border_weight = match rng.gen_range(0..3) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen_range(0.05f32..1.0),
    };
    let mut spec = RandomSpec {
        spatial: vec![],
        window: vec![],
        step: vec![],
        border: vec![],
        border_weight,
    };
    for _ in 0..rank {
        let extent = rng.gen_range(1..=max_extent);
        let window = rng.gen_range(1..=extent);
        let border = rng.gen_range(0..=(window - 1) / 2);
        let max_step = if border_weight == 0.0 {
            window - 2 * border
        } else {
            window
        };
        let step = rng.gen_range(1..=max_step);
        spec.spatial.push(extent);
        spec.window.push(window);
        spec.step.push(step);
        spec.border.push(border);
    }
    spec
}

/// Per-voxel sum(w * x) / sum(w) over every placement covering the voxel,
/// where `results[i]` is the (channels, window...) result of placement `i`.
/// Returns `None` at voxels with zero total weight.
pub fn oracle_stitch(
    spec: &RandomSpec,
    items: usize,
    channels: usize,
    results: &[Vec<f32>],
) -> Vec<Option<f64>> {
    let placements = oracle_placements(items, &spec.spatial, &spec.window, &spec.step);
    assert_eq!(placements.len(), results.len());
    let volume: usize = spec.spatial.iter().product();
    let window_volume: usize = spec.window.iter().product();
    let mut sum = vec![0.0f64; items * channels * volume];
    let mut norm = vec![0.0f64; items * volume];
    for ((item, start), result) in placements.iter().zip(results) {
        for local in 0..window_volume {
            let offset = unravel(local, &spec.window);
            let w = oracle_weight(
                &offset,
                start,
                &spec.spatial,
                &spec.window,
                &spec.border,
                spec.border_weight as f64,
            );
            let global: Vec<usize> = offset.iter().zip(start).map(|(o, s)| o + s).collect();
            let g = ravel(&global, &spec.spatial);
            norm[item * volume + g] += w;
            for c in 0..channels {
                sum[(item * channels + c) * volume + g] +=
                    w * result[c * window_volume + local] as f64;
            }
        }
    }
    (0..items * channels * volume)
        .map(|k| {
            let item = k / (channels * volume);
            let g = k % volume;
            let n = norm[item * volume + g];
            (n > 0.0).then(|| sum[k] / n)
        })
        .collect()
}

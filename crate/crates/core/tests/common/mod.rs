//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use vlmdiff::image::Mask;

/// Pairwise comparison over every positive/negative pair.
pub fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Union-find labelling of 8-connected foreground pixels; one pixel list
/// per region.
pub fn regions_union_find(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut parent: Vec<usize> = (0..h * w).collect();
    let on = |y: usize, x: usize| mask.data[y * w + x] != 0;
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            for (dy, dx) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= h as i64 || nx < 0 || nx >= w as i64 || !on(ny as usize, nx as usize) {
                    continue;
                }
                let a = find(&mut parent, y * w + x);
                let b = find(&mut parent, ny as usize * w + nx as usize);
                parent[a] = b;
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in 0..h * w {
        if mask.data[p] != 0 {
            let r = find(&mut parent, p);
            groups.entry(r).or_default().push(p);
        }
    }
    groups.into_values().collect()
}

/// Descending thresholds: `n` evenly spaced between the extreme scores, or
/// every distinct score when `n == 0`.
pub fn thresholds_brute(maps: &[Vec<f32>], n: usize) -> Vec<f64> {
    let all: Vec<f64> = maps.iter().flatten().map(|&v| v as f64).collect();
    let mut out = Vec::new();
    if n == 0 {
        let mut v = all.clone();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for x in v {
            if out.last() != Some(&x) {
                out.push(x);
            }
        }
        return out;
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for i in (0..n).rev() {
        let t = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Per-threshold pixel loops, clipped trapezoids, divided by the limit.
pub fn pro_brute(maps: &[Vec<f32>], masks: &[Mask], fpr_limit: f64, n: usize) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| regions_union_find(m).into_iter().map(move |r| (i, r)))
        .collect();
    let n_normal: usize = masks.iter().map(|m| m.data.iter().filter(|&&v| v == 0).count()).sum();
    let mut curve = Vec::new();
    for th in thresholds_brute(maps, n) {
        let mut fp = 0usize;
        for (s, m) in maps.iter().zip(masks) {
            for (&v, &l) in s.iter().zip(&m.data) {
                if l == 0 && v as f64 >= th {
                    fp += 1;
                }
            }
        }
        let mut total = 0.0;
        for (i, r) in &regions {
            let hit = r.iter().filter(|&&p| maps[*i][p] as f64 >= th).count();
            total += hit as f64 / r.len() as f64;
        }
        curve.push((fp as f64 / n_normal as f64, total / regions.len() as f64));
    }
    let mut area = 0.0;
    for k in 1..curve.len() {
        let (x0, y0) = curve[k - 1];
        let (x1, y1) = curve[k];
        let b = x1.min(fpr_limit);
        if b <= x0 {
            continue;
        }
        let yb = if x1 > x0 { y0 + (y1 - y0) * (b - x0) / (x1 - x0) } else { y1 };
        area += (b - x0) * (y0 + yb) / 2.0;
    }
    area / fpr_limit
}

/// A random scoring problem: up to `max_images` maps of side up to
/// `max_side`, blob-shaped masks, scores with frequent ties.
pub struct Instance {
    pub maps: Vec<Vec<f32>>,
    pub masks: Vec<Mask>,
    pub n_thresholds: usize,
}

pub fn random_instance(rng: &mut impl Rng, max_side: usize, max_images: usize) -> Instance {
    loop {
        let side = rng.random_range(3..=max_side);
        let n_img = rng.random_range(1..=max_images);
        let levels = if rng.random_bool(0.3) { rng.random_range(2..8) } else { 0 };
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..n_img {
            let mut m = Mask::zeros(side, side);
            if rng.random_bool(0.6) {
                for _ in 0..rng.random_range(1..4) {
                    let (y0, x0) = (rng.random_range(0..side), rng.random_range(0..side));
                    let (bh, bw) = (rng.random_range(1..=side / 2 + 1), rng.random_range(1..=side / 2 + 1));
                    for y in y0..(y0 + bh).min(side) {
                        for x in x0..(x0 + bw).min(side) {
                            if rng.random_bool(0.85) {
                                m.data[y * side + x] = 1;
                            }
                        }
                    }
                }
            }
            let s: Vec<f32> = m
                .data
                .iter()
                .map(|&l| {
                    let v: f32 = rng.random::<f32>() + if l != 0 { 0.4 } else { 0.0 };
                    if levels > 0 {
                        (v * levels as f32).floor() / levels as f32
                    } else {
                        v
                    }
                })
                .collect();
            maps.push(s);
            masks.push(m);
        }
        let anomalous: usize = masks.iter().map(|m| m.area()).sum();
        let total = n_img * side * side;
        if anomalous == 0 || anomalous == total {
            continue;
        }
        let n_thresholds = if rng.random_bool(0.25) { 0 } else { 200 };
        return Instance { maps, masks, n_thresholds };
    }
}

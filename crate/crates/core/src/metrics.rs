//! Image- and pixel-level ROC AUC and the per-region overlap score (PRO).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vlmdiff_nn::exec;

use crate::dataset::{DatasetIndex, ImageRecord, Label};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::segmentation::{self, ScoreRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub fpr_limit: f64,
    /// Evenly spaced thresholds over the observed score range; 0 uses every
    /// distinct score.
    pub n_thresholds: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            n_thresholds: 200,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config(format!(
                "metrics.fpr_limit must be in (0, 1], got {}",
                self.fpr_limit
            )));
        }
        if self.n_thresholds == 1 {
            return Err(Error::Config("metrics.n_thresholds must be 0 or at least 2".into()));
        }
        Ok(())
    }
}

/// Mann–Whitney AUC; tied positive/negative pairs count ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "auroc needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        // Ranks i+1..=j share their mean.
        rank_sum += pos_in_group as f64 * (i + 1 + j) as f64 / 2.0;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Labels 8-connected foreground regions; returns `(labels, count)` with
/// labels `1..=count` and 0 for background.
pub fn connected_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] != 0 && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProCurve {
    pub pro: f64,
    /// `(fpr, mean region overlap)` with nondecreasing fpr.
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

fn check_pair(scores: &[f32], mask: &Mask) -> Result<()> {
    if scores.len() != mask.height * mask.width {
        return Err(Error::Metric(format!(
            "map has {} pixels, mask is {}×{}",
            scores.len(),
            mask.height,
            mask.width
        )));
    }
    if mask.data.iter().any(|&v| v > 1) {
        return Err(Error::Metric("mask is not binary (expected 0/1)".into()));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("anomaly map contains NaN".into()));
    }
    Ok(())
}

/// Descending thresholds: `n` evenly spaced over `[lo, hi]`, or every
/// distinct value when `n == 0`.
pub fn thresholds<'a>(values: impl Iterator<Item = &'a f32>, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = values.map(|&x| x as f64).collect();
    if v.is_empty() {
        return Vec::new();
    }
    if n == 0 {
        v.sort_by(|a, b| b.total_cmp(a));
        v.dedup();
        return v;
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut t: Vec<f64> = (0..n)
        .rev()
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64)
        .collect();
    t.dedup();
    t
}

/// Number of entries of ascending `sorted` that are `>= th`.
fn count_ge(sorted: &[f32], th: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| (v as f64) < th)
}

fn sorted(mut v: Vec<f32>) -> Vec<f32> {
    v.sort_by(f32::total_cmp);
    v
}

/// Normalized area under the PRO curve up to `fpr_limit`.
///
/// Regions are 8-connected components of each mask; the overlap at a
/// threshold is the mean over all regions of the fraction of region pixels
/// scoring `>=` the threshold; FPR pools the normal pixels of every image.
pub fn pro(maps: &[&[f32]], masks: &[&Mask], fpr_limit: f64, n_thresholds: usize) -> Result<ProCurve> {
    if maps.len() != masks.len() {
        return Err(Error::Metric(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    for (s, m) in maps.iter().zip(masks) {
        check_pair(s, m)?;
    }
    let per_image = exec::map_range(maps.len(), |i| {
        let (scores, mask) = (maps[i], masks[i]);
        let (labels, count) = connected_components(mask);
        let mut regions = vec![Vec::new(); count];
        let mut normal = Vec::new();
        for (&s, &l) in scores.iter().zip(&labels) {
            if l == 0 {
                normal.push(s);
            } else {
                regions[l as usize - 1].push(s);
            }
        }
        (normal, regions.into_iter().map(sorted).collect::<Vec<_>>())
    });
    let mut normal = Vec::new();
    let mut regions = Vec::new();
    for (n, r) in per_image {
        normal.extend(n);
        regions.extend(r);
    }
    if regions.is_empty() {
        return Err(Error::Metric("pro needs at least one anomalous pixel".into()));
    }
    if normal.is_empty() {
        return Err(Error::Metric("pro needs at least one normal pixel".into()));
    }
    let normal = sorted(normal);
    let ths = thresholds(maps.iter().flat_map(|m| m.iter()), n_thresholds);
    let points = exec::map_slice(&ths, |&th| {
        let fpr = count_ge(&normal, th) as f64 / normal.len() as f64;
        let overlap = regions
            .iter()
            .map(|r| count_ge(r, th) as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        (fpr, overlap)
    });
    Ok(ProCurve {
        pro: integrate_normalized(&points, fpr_limit),
        points,
        thresholds: ths,
    })
}

/// Trapezoid area under `points` (nondecreasing x) over `[x_0, limit]`,
/// divided by `limit`. The curve is interpolated at `limit`, not extended
/// to the origin.
pub fn integrate_normalized(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area / limit
}

/// Pixel ROC curve `(fpr, tpr)` at the given descending thresholds.
pub fn roc_curve(maps: &[&[f32]], masks: &[&Mask], ths: &[f64]) -> Vec<(f64, f64)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (s, m) in maps.iter().zip(masks) {
        for (&v, &l) in s.iter().zip(&m.data) {
            if l != 0 { pos.push(v) } else { neg.push(v) }
        }
    }
    let (pos, neg) = (sorted(pos), sorted(neg));
    ths.iter()
        .map(|&t| {
            let fpr = count_ge(&neg, t) as f64 / neg.len().max(1) as f64;
            let tpr = count_ge(&pos, t) as f64 / pos.len().max(1) as f64;
            (fpr, tpr)
        })
        .collect()
}

/// One scored test image.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub key: String,
    pub category: String,
    pub anomalous: bool,
    pub image_score: f64,
    pub scores: Vec<f32>,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub roc_i: f64,
    pub roc_p: f64,
    pub pro: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
    pub roc_curve: Vec<(f64, f64)>,
    pub pro_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_i: f64,
    pub roc_p: f64,
    pub pro: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub fpr_limit: f64,
    pub n_thresholds: usize,
}

pub fn evaluate_scored(items: &[ScoredImage], cfg: &MetricsConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut groups: BTreeMap<&str, Vec<&ScoredImage>> = BTreeMap::new();
    for it in items {
        groups.entry(it.category.as_str()).or_default().push(it);
    }
    if groups.is_empty() {
        return Err(Error::Metric("no test images to evaluate".into()));
    }
    let mut per_category = BTreeMap::new();
    for (cat, imgs) in groups {
        let ctx = |e: Error| Error::Metric(format!("category {cat}: {e}"));
        let scores: Vec<f64> = imgs.iter().map(|i| i.image_score).collect();
        let labels: Vec<bool> = imgs.iter().map(|i| i.anomalous).collect();
        let roc_i = auroc(&scores, &labels).map_err(ctx)?;
        let maps: Vec<&[f32]> = imgs.iter().map(|i| i.scores.as_slice()).collect();
        let masks: Vec<&Mask> = imgs.iter().map(|i| &i.mask).collect();
        let curve = pro(&maps, &masks, cfg.fpr_limit, cfg.n_thresholds).map_err(ctx)?;
        let mut px = Vec::new();
        let mut px_labels = Vec::new();
        for (s, m) in maps.iter().zip(&masks) {
            px.extend(s.iter().map(|&v| v as f64));
            px_labels.extend(m.data.iter().map(|&v| v != 0));
        }
        let roc_p = auroc(&px, &px_labels).map_err(ctx)?;
        per_category.insert(
            cat.to_string(),
            CategoryMetrics {
                roc_i,
                roc_p,
                pro: curve.pro,
                n_images: imgs.len(),
                n_anomalous: labels.iter().filter(|&&l| l).count(),
                roc_curve: roc_curve(&maps, &masks, &curve.thresholds),
                pro_curve: curve.points,
            },
        );
    }
    let mean = |f: fn(&CategoryMetrics) -> f64| {
        per_category.values().map(f).sum::<f64>() / per_category.len() as f64
    };
    Ok(EvalReport {
        roc_i: mean(|c| c.roc_i),
        roc_p: mean(|c| c.roc_p),
        pro: mean(|c| c.pro),
        per_category,
        fpr_limit: cfg.fpr_limit,
        n_thresholds: cfg.n_thresholds,
    })
}

/// Stored map location for a test record: `<maps_dir>/<key dir>/<stem>_amap.bin`.
pub fn amap_path(maps_dir: &Path, root: &Path, rec: &ImageRecord) -> PathBuf {
    let key = rec.key(root);
    let rel = Path::new(&key);
    let dir = rel.parent().map(|p| maps_dir.join(p)).unwrap_or_else(|| maps_dir.to_path_buf());
    dir.join(format!("{}_amap.bin", rec.stem()))
}

/// Loads every test map from `maps_dir` and scores it against the index.
pub fn evaluate(index: &DatasetIndex, maps_dir: &Path, cfg: &MetricsConfig, rule: ScoreRule) -> Result<EvalReport> {
    let test: Vec<(usize, &ImageRecord)> = index.test().collect();
    let items = exec::map_slice(&test, |&(id, rec)| -> Result<ScoredImage> {
        let key = rec.key(&index.root);
        let path = amap_path(maps_dir, &index.root, rec);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                what: format!("anomaly map for {key}"),
                path,
                command: "infer",
            });
        }
        let (h, w, scores) = segmentation::read_amap(&path)?;
        if (h, w) != index.resolution {
            return Err(Error::Metric(format!(
                "map for {key} is {h}×{w}, dataset resolution is {:?}",
                index.resolution
            )));
        }
        let map = segmentation::map_from_scores(h, w, scores, rule);
        Ok(ScoredImage {
            key,
            category: rec.category.clone(),
            anomalous: rec.label == Label::Anomalous,
            image_score: map.image_score,
            scores: map.scores,
            mask: index.load_mask(id)?,
        })
    });
    let items: Vec<ScoredImage> = items.into_iter().collect::<Result<_>>()?;
    evaluate_scored(&items, cfg)
}

impl EvalReport {
    /// `key=value` lines; floats use the shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "roc_i={}", self.roc_i);
        let _ = writeln!(s, "roc_p={}", self.roc_p);
        let _ = writeln!(s, "pro={}", self.pro);
        let _ = writeln!(s, "fpr_limit={}", self.fpr_limit);
        let _ = writeln!(s, "n_thresholds={}", self.n_thresholds);
        for (cat, m) in &self.per_category {
            let _ = writeln!(s, "{cat}.roc_i={}", m.roc_i);
            let _ = writeln!(s, "{cat}.roc_p={}", m.roc_p);
            let _ = writeln!(s, "{cat}.pro={}", m.pro);
            let _ = writeln!(s, "{cat}.n_images={}", m.n_images);
            let _ = writeln!(s, "{cat}.n_anomalous={}", m.n_anomalous);
        }
        s
    }

    /// `category,curve,fpr,value` rows for the ROC and PRO curves.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("category,curve,fpr,value\n");
        for (cat, m) in &self.per_category {
            for (f, t) in &m.roc_curve {
                let _ = writeln!(s, "{cat},roc,{f},{t}");
            }
            for (f, o) in &m.pro_curve {
                let _ = writeln!(s, "{cat},pro,{f},{o}");
            }
        }
        s
    }

    /// Headline values from [`EvalReport::to_kv`] output.
    pub fn parse_kv(text: &str) -> Result<BTreeMap<String, f64>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| Error::Metric(format!("malformed report line `{l}`")))?;
                let v: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Metric(format!("malformed value in `{l}`")))?;
                Ok((k.trim().to_string(), v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(y, x) in on {
            m.data[y * w + x] = 1;
        }
        m
    }

    #[test]
    fn auroc_worked_example() {
        let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn auroc_extremes_and_errors() {
        assert_eq!(auroc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 5], &[false, true, false, true, true]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1, f64::NAN], &[true, false]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn components_use_eight_connectivity() {
        let m = mask(4, 4, &[(0, 0), (1, 1), (3, 3), (3, 0)]);
        let (labels, n) = connected_components(&m);
        assert_eq!(n, 3);
        assert_eq!(labels[0], labels[5]);
        assert_ne!(labels[0], labels[15]);
    }

    #[test]
    fn pro_perfect_and_constant_predictors() {
        let m = mask(8, 8, &[(1, 1), (1, 2), (2, 1), (6, 6)]);
        let perfect: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        let p = pro(&[&perfect], &[&m], 0.3, 200).unwrap();
        assert!((p.pro - 1.0).abs() < 1e-12);
        let zero = vec![0.0f32; 64];
        assert_eq!(pro(&[&zero], &[&m], 0.3, 200).unwrap().pro, 0.0);
    }

    #[test]
    fn pro_errors() {
        let empty = Mask::zeros(4, 4);
        let s = vec![0.5f32; 16];
        assert!(pro(&[&s], &[&empty], 0.3, 200).is_err());
        let mut bad = mask(4, 4, &[(0, 0)]);
        bad.data[3] = 255;
        assert!(pro(&[&s], &[&bad], 0.3, 200).unwrap_err().to_string().contains("binary"));
        let good = mask(4, 4, &[(0, 0)]);
        assert!(pro(&[&s[..8]], &[&good], 0.3, 200).is_err());
    }

    #[test]
    fn integration_interpolates_at_limit() {
        let pts = [(0.0, 0.0), (0.6, 0.6)];
        // Area of y=x over [0, 0.3] is 0.045.
        assert!((integrate_normalized(&pts, 0.3) - 0.15).abs() < 1e-12);
        assert_eq!(integrate_normalized(&[(0.5, 1.0), (1.0, 1.0)], 0.3), 0.0);
    }

    #[test]
    fn constant_and_perfect_maps_give_expected_report() {
        let m = mask(4, 4, &[(1, 1), (2, 2)]);
        let perfect: Vec<f32> = m.data.iter().map(|&v| v as f32).collect();
        let item = |key: &str, anomalous, scores: Vec<f32>, mask: Mask| ScoredImage {
            key: key.into(),
            category: "c".into(),
            anomalous,
            image_score: scores.iter().fold(0.0f32, |a, &b| a.max(b)) as f64,
            scores,
            mask,
        };
        let cfg = MetricsConfig::default();
        let r = evaluate_scored(
            &[item("a", true, perfect, m.clone()), item("b", false, vec![0.0; 16], Mask::zeros(4, 4))],
            &cfg,
        )
        .unwrap();
        assert_eq!((r.roc_i, r.roc_p), (1.0, 1.0));
        assert!((r.pro - 1.0).abs() < 1e-12);

        let r = evaluate_scored(
            &[item("a", true, vec![0.5; 16], m), item("b", false, vec![0.5; 16], Mask::zeros(4, 4))],
            &cfg,
        )
        .unwrap();
        assert_eq!((r.roc_i, r.roc_p), (0.5, 0.5));
    }

    #[test]
    fn overall_is_unweighted_category_mean() {
        let mk = |cat: &str, n_norm: usize, flip: bool| {
            let mut v = Vec::new();
            let m = mask(2, 2, &[(0, 0)]);
            v.push(ScoredImage {
                key: format!("{cat}/a"),
                category: cat.into(),
                anomalous: true,
                image_score: if flip { 0.0 } else { 1.0 },
                scores: vec![0.9, 0.1, 0.1, 0.1],
                mask: m,
            });
            for i in 0..n_norm {
                v.push(ScoredImage {
                    key: format!("{cat}/n{i}"),
                    category: cat.into(),
                    anomalous: false,
                    image_score: 0.5,
                    scores: vec![0.1; 4],
                    mask: Mask::zeros(2, 2),
                });
            }
            v
        };
        let mut items = mk("a", 1, false);
        items.extend(mk("b", 5, true));
        let r = evaluate_scored(&items, &MetricsConfig::default()).unwrap();
        assert_eq!(r.per_category["a"].roc_i, 1.0);
        assert_eq!(r.per_category["b"].roc_i, 0.0);
        assert_eq!(r.roc_i, 0.5);
    }

    #[test]
    fn kv_roundtrip() {
        let mut per = BTreeMap::new();
        per.insert(
            "x".to_string(),
            CategoryMetrics {
                roc_i: 0.1 + 0.2,
                roc_p: 1.0 / 3.0,
                pro: 0.7,
                n_images: 4,
                n_anomalous: 2,
                roc_curve: vec![(0.0, 0.5)],
                pro_curve: vec![(0.25, 1.0)],
            },
        );
        let r = EvalReport {
            roc_i: 0.1 + 0.2,
            roc_p: 1.0 / 3.0,
            pro: 0.7,
            per_category: per,
            fpr_limit: 0.3,
            n_thresholds: 200,
        };
        let kv = EvalReport::parse_kv(&r.to_kv()).unwrap();
        assert_eq!(kv["roc_i"], 0.1 + 0.2);
        assert_eq!(kv["x.roc_p"], 1.0 / 3.0);
        assert!(r.curves_csv().contains("x,pro,0.25,1"));
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_exp(s in prop::collection::vec(-3.0f64..3.0, 2..40), seed in any::<u64>()) {
            let labels: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(labels.iter().any(|&l| !l));
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            prop_assert_eq!(auroc(&s, &labels).unwrap(), auroc(&e, &labels).unwrap());
        }

        #[test]
        fn auroc_of_negation_is_complement(s in prop::collection::hash_set(-1000i32..1000, 2..40), seed in any::<u64>()) {
            let s: Vec<f64> = s.into_iter().map(|v| v as f64 / 7.0).collect();
            let labels: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            prop_assume!(labels.iter().any(|&l| !l));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let sum = auroc(&s, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pro_exact_mode_is_invariant_under_monotone_maps(
            vals in prop::collection::vec(0u8..16, 64),
            bits in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut m = Mask::zeros(8, 8);
            for (d, &b) in m.data.iter_mut().zip(&bits) {
                *d = u8::from(b);
            }
            prop_assume!(m.area() > 0 && m.area() < 64);
            let s: Vec<f32> = vals.iter().map(|&v| v as f32 / 16.0).collect();
            let t: Vec<f32> = s.iter().map(|&v| (3.0 * v).exp() + 1.0).collect();
            let a = pro(&[&s], &[&m], 0.3, 0).unwrap();
            let b = pro(&[&t], &[&m], 0.3, 0).unwrap();
            prop_assert_eq!(a.points, b.points);
            prop_assert_eq!(a.pro, b.pro);
        }
    }
}

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use vlmdiff_nn::exec;

use crate::dataset::{DatasetIndex, Label};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::metrics::{amap_path, EvalReport};
use crate::segmentation::{self, ScoreRule};
use crate::util;

const GAP: usize = 2;

fn heat(v: f32) -> [u8; 3] {
    // Black → red → yellow → white.
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(v), c(v - 1.0), c(v - 2.0)]
}

/// `input | reconstruction | map | mask` side by side. Map values are
/// divided by `scale` before coloring.
pub fn contact_sheet(input: &Image, rec: &Image, map: &[f32], scale: f32, mask: &Mask) -> RgbImage {
    let (h, w) = (input.height, input.width);
    let mut sheet = RgbImage::from_pixel((4 * w + 3 * GAP) as u32, h as u32, Rgb([255, 255, 255]));
    let put = |sheet: &mut RgbImage, panel: usize, y: usize, x: usize, px: [u8; 3]| {
        sheet.put_pixel((panel * (w + GAP) + x) as u32, y as u32, Rgb(px));
    };
    let s = if scale > 0.0 { scale } else { 1.0 };
    for y in 0..h {
        for x in 0..w {
            let to8 = |p: [f32; 3]| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            put(&mut sheet, 0, y, x, to8(input.get(y, x)));
            put(&mut sheet, 1, y, x, to8(rec.get(y, x)));
            put(&mut sheet, 2, y, x, heat(map[y * w + x] / s));
            let m = if mask.data[y * w + x] != 0 { 255 } else { 0 };
            put(&mut sheet, 3, y, x, [m, m, m]);
        }
    }
    sheet
}

fn png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("png encoding");
    out.into_inner()
}

/// Writes `report.kv`, `curves.csv`, `summary.md` and `sheets/`; returns
/// the number of sheets.
pub(super) fn write_report(
    index: &DatasetIndex,
    infer_dir: &Path,
    report: &EvalReport,
    dir: &Path,
    rule: ScoreRule,
) -> Result<usize> {
    let maps_dir = infer_dir.join("maps");
    let test: Vec<_> = index.test().collect();
    let loaded = exec::map_slice(&test, |&(id, rec)| -> Result<_> {
        let p = amap_path(&maps_dir, &index.root, rec);
        let (_, _, scores) = segmentation::read_amap(&p)?;
        let rec_path = p.with_file_name(format!("{}_rec.png", rec.stem()));
        let recon = Image::load(&rec_path, index.resolution)?;
        Ok((id, rec, scores, recon))
    });
    let loaded: Vec<_> = loaded.into_iter().collect::<Result<_>>()?;
    let scale = loaded
        .iter()
        .flat_map(|(_, _, s, _)| s.iter())
        .fold(0.0f32, |m, &v| m.max(v));
    let mut rows = Vec::new();
    for (id, rec, scores, recon) in &loaded {
        let key = rec.key(&index.root);
        let input = index.load_image(*id)?;
        let mask = index.load_mask(*id)?;
        let sheet = contact_sheet(&input, recon, scores, scale, &mask);
        let out = dir.join("sheets").join(Path::new(&key).with_extension("png"));
        util::write_atomic(&out, &png(&sheet))?;
        let m = segmentation::map_from_scores(index.resolution.0, index.resolution.1, scores.clone(), rule);
        rows.push((key, rec.label == Label::Anomalous, m.image_score));
    }
    util::write_atomic(&dir.join("report.kv"), report.to_kv().as_bytes())?;
    util::write_atomic(&dir.join("curves.csv"), report.curves_csv().as_bytes())?;

    let mut md = String::new();
    let _ = writeln!(md, "# Evaluation\n");
    let _ = writeln!(md, "| category | images | anomalous | ROC_I | ROC_P | PRO |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for (cat, m) in &report.per_category {
        let _ = writeln!(
            md,
            "| {cat} | {} | {} | {:.4} | {:.4} | {:.4} |",
            m.n_images, m.n_anomalous, m.roc_i, m.roc_p, m.pro
        );
    }
    let _ = writeln!(
        md,
        "| **mean** | | | {:.4} | {:.4} | {:.4} |\n",
        report.roc_i, report.roc_p, report.pro
    );
    let _ = writeln!(
        md,
        "PRO integrated to FPR {} over {} thresholds. Map colors share one scale (max {scale:.4}).\n",
        report.fpr_limit,
        if report.n_thresholds == 0 { "all distinct".to_string() } else { report.n_thresholds.to_string() }
    );
    let _ = writeln!(md, "| image | anomalous | score | sheet |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (key, anomalous, score) in &rows {
        let sheet = Path::new("sheets").join(Path::new(key).with_extension("png"));
        let _ = writeln!(md, "| {key} | {anomalous} | {score:.5} | ![]({}) |", sheet.display());
    }
    let p = dir.join("summary.md");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    util::write_atomic(&p, md.as_bytes())?;
    Ok(rows.len())
}

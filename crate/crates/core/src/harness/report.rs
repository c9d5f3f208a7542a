use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{MetricsTable, RunManifest, Snapshot, METRICS_FILE, RUN_FILE, SNAPSHOTS_FILE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportSummary {
    pub runs: usize,
    pub files: Vec<PathBuf>,
    /// Artifacts that were expected but absent, as `dir: file`.
    pub missing: Vec<String>,
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// One grid cell: an H × W × 3 image scaled to `size`, or a 2D point plotted on [-2, 2]².
pub fn render_tile(t: &Tensor, size: u32) -> Result<RgbImage> {
    let sh = t.shape();
    if sh.len() == 3 && sh[2] == 3 {
        let (h, w) = (sh[0] as u32, sh[1] as u32);
        let scale = (size / h.max(w)).max(1);
        return Ok(RgbImage::from_fn(w * scale, h * scale, |x, y| {
            let px = |c| (t[[(y / scale) as usize, (x / scale) as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        }));
    }
    if sh == [2] {
        let mut img = RgbImage::from_pixel(size, size, WHITE);
        let to_px = |v: f64| (((v + 2.0) / 4.0) * (size - 1) as f64).round() as i64;
        let mid = to_px(0.0) as u32;
        for i in 0..size {
            img.put_pixel(i, mid, Rgb([210, 210, 210]));
            img.put_pixel(mid, i, Rgb([210, 210, 210]));
        }
        for m in [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]] {
            let (x, y) = (to_px(m[0]), to_px(-m[1]));
            img.put_pixel(x as u32, y as u32, Rgb([120, 120, 120]));
        }
        let (cx, cy) = (to_px(t[0]), to_px(-t[1]));
        for dx in -1..=1 {
            for dy in -1..=1 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, Rgb([220, 30, 30]));
                }
            }
        }
        return Ok(img);
    }
    Err(Error::Report(format!("cannot draw a tensor of shape {sh:?}")))
}

const ROW_ORDER: [&str; 8] = ["x0", "x0_cond", "x0_uncond", "x0_guided", "front", "right", "left", "back"];

/// Rows are quantities, columns are snapshot steps.
fn snapshot_grid(snapshots: &[Snapshot]) -> Result<RgbImage> {
    let mut rows: Vec<&String> = snapshots[0].images.keys().collect();
    rows.sort_by_key(|k| ROW_ORDER.iter().position(|r| r == k).unwrap_or(ROW_ORDER.len()));
    let tiles = snapshots
        .iter()
        .map(|s| {
            rows.iter()
                .map(|r| {
                    let img = s
                        .images
                        .get(*r)
                        .ok_or_else(|| Error::Report(format!("snapshot at step {} lacks `{r}`", s.step)))?;
                    render_tile(img, 64)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (tw, th) = tiles[0][0].dimensions();
    let gap = 2;
    let width = snapshots.len() as u32 * (tw + gap) + gap;
    let height = rows.len() as u32 * (th + gap) + gap;
    let mut out = RgbImage::from_pixel(width, height, Rgb([90, 90, 90]));
    for (c, col) in tiles.iter().enumerate() {
        for (r, tile) in col.iter().enumerate() {
            image::imageops::replace(
                &mut out,
                tile,
                (gap + c as u32 * (tw + gap)) as i64,
                (gap + r as u32 * (th + gap)) as i64,
            );
        }
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Metric curves for all runs, one panel per column, captioned by config hash.
fn curves_svg(runs: &[(String, MetricsTable)]) -> String {
    let mut columns: Vec<&String> = Vec::new();
    for (_, m) in runs {
        for c in &m.columns {
            if !["step", "t_min", "t_max"].contains(&c.as_str()) && !columns.contains(&c) {
                columns.push(c);
            }
        }
    }
    let (pw, ph, pad) = (320.0, 180.0, 30.0);
    let per_row = 3;
    let legend = 20.0 * runs.len() as f64 + 10.0;
    let rows = columns.len().div_ceil(per_row);
    let width = per_row as f64 * (pw + pad) + pad;
    let height = rows as f64 * (ph + pad) + pad + legend;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (caption, _)) in runs.iter().enumerate() {
        let y = 15.0 + 20.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{pad}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}">{caption}</text>"#, pad + 18.0);
    }
    for (k, col) in columns.iter().enumerate() {
        let x0 = pad + (k % per_row) as f64 * (pw + pad);
        let y0 = legend + pad + (k / per_row) as f64 * (ph + pad);
        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#999"/><text x="{x0}" y="{}">{col}</text>"##,
            y0 - 4.0
        );
        let series: Vec<(usize, Vec<(f64, f64)>)> = runs
            .iter()
            .enumerate()
            .filter_map(|(i, (_, m))| {
                let steps = m.column("step")?;
                let ys = m.column(col)?;
                Some((i, steps.into_iter().zip(ys).filter(|(_, y)| y.is_finite()).collect()))
            })
            .collect();
        let pts = series.iter().flat_map(|(_, s)| s.iter());
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if xmin > xmax {
            continue;
        }
        let xs = if xmax > xmin { xmax - xmin } else { 1.0 };
        let ys = if ymax > ymin { ymax - ymin } else { 1.0 };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{ymax:.4}</text><text x="{}" y="{}">{ymin:.4}</text>"#,
            x0 + 2.0,
            y0 + 11.0,
            x0 + 2.0,
            y0 + ph - 2.0
        );
        for (i, s) in series {
            let points: Vec<String> = s
                .iter()
                .map(|(x, y)| format!("{:.1},{:.1}", x0 + (x - xmin) / xs * pw, y0 + ph - (y - ymin) / ys * ph))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1" points="{}"/>"#,
                PALETTE[i % PALETTE.len()],
                points.join(" ")
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write snapshot grids, metric curves and a summary table for one or more run directories.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(Error::Report("no run directories given".into()));
    }
    let mut summary = ReportSummary::default();
    let mut curves = Vec::new();
    let mut table = String::from("| run | config hash | kind | loss | iterations | wall clock (s) | final metrics | results |\n");
    table.push_str("|---|---|---|---|---|---|---|---|\n");
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut grids: Vec<(PathBuf, RgbImage)> = Vec::new();

    for dir in run_dirs {
        let has = |f: &str| dir.join(f).is_file();
        if !dir.is_dir() || (!has(RUN_FILE) && !has(METRICS_FILE) && !has(SNAPSHOTS_FILE)) {
            return Err(Error::Report(format!("no run artifacts in {}", dir.display())));
        }
        for f in [RUN_FILE, METRICS_FILE, SNAPSHOTS_FILE] {
            if !has(f) {
                summary.missing.push(format!("{}: {f}", dir.display()));
            }
        }
        let manifest: Option<RunManifest> = if has(RUN_FILE) {
            Some(serde_json::from_slice(&std::fs::read(dir.join(RUN_FILE))?)?)
        } else {
            None
        };
        let tag = manifest
            .as_ref()
            .map(|m| m.config_hash[..8].to_string())
            .unwrap_or_else(|| format!("run{}", summary.runs));
        let metrics = if has(METRICS_FILE) {
            Some(MetricsTable::read_csv(&dir.join(METRICS_FILE))?)
        } else {
            None
        };
        if has(SNAPSHOTS_FILE) {
            let snaps: Vec<Snapshot> = serde_json::from_slice(&std::fs::read(dir.join(SNAPSHOTS_FILE))?)?;
            if snaps.is_empty() {
                summary.missing.push(format!("{}: snapshots (file is empty)", dir.display()));
            } else {
                grids.push((out.join(format!("{tag}_snapshots.png")), snapshot_grid(&snaps)?));
            }
        }
        let finals = metrics
            .as_ref()
            .map(|m| {
                m.columns
                    .iter()
                    .filter(|c| !["step", "t", "t_min", "t_max"].contains(&c.as_str()))
                    .filter_map(|c| m.last(c).map(|v| format!("{c}={v:.4}")))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_default();
        let (kind, loss, iterations, wall, results) = match &manifest {
            Some(m) => (
                format!("{:?}", m.kind),
                m.loss.clone(),
                m.iterations.to_string(),
                format!("{:.2}", m.wall_clock_secs),
                m.summary.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" "),
            ),
            None => ("?".into(), "?".into(), "?".into(), "?".into(), String::new()),
        };
        let _ = writeln!(
            table,
            "| {} | {tag} | {kind} | {loss} | {iterations} | {wall} | {finals} | {results} |",
            dir.display()
        );
        if let Some(m) = metrics {
            curves.push((format!("{tag} ({loss}) {}", dir.display()), m));
        }
        summary.runs += 1;
    }

    if grids.is_empty() && curves.is_empty() {
        return Err(Error::Report("no snapshots or metrics to draw".into()));
    }
    std::fs::create_dir_all(out)?;
    if !curves.is_empty() {
        outputs.push((out.join("curves.svg"), curves_svg(&curves).into_bytes()));
    }
    if !summary.missing.is_empty() {
        table.push_str("\nMissing artifacts:\n\n");
        for m in &summary.missing {
            let _ = writeln!(table, "- {m}");
        }
    }
    outputs.push((out.join("summary.md"), table.into_bytes()));
    for (path, img) in grids {
        img.save(&path)?;
        summary.files.push(path);
    }
    for (path, bytes) in outputs {
        std::fs::write(&path, bytes)?;
        summary.files.push(path);
    }
    Ok(summary)
}

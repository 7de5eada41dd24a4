use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::Serialize;

use crate::citymap::{builtin, load_map, CityMap};
use crate::raysim::{building_color, GROUND_COLOR};

use super::metrics::{EpisodeSummary, MetricsLog};
use super::HarnessError;

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

/// One row of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub map: String,
    pub method: String,
    pub target_policy: String,
    pub seeds: Vec<u64>,
    pub te_mean: Option<(f64, f64)>,
    pub te_min: Option<(f64, f64)>,
    pub te_max: Option<(f64, f64)>,
    pub psnr_final: Option<(f64, f64)>,
}

pub fn summarize(logs: &[MetricsLog]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<EpisodeSummary>> = BTreeMap::new();
    for log in logs {
        let s = log.summary();
        groups
            .entry((s.map.clone(), s.label.clone(), s.target_policy.clone()))
            .or_default()
            .push(s);
    }
    groups
        .into_iter()
        .map(|((map, method, target_policy), eps)| {
            let col = |f: fn(&EpisodeSummary) -> Option<f64>| {
                let v: Vec<f64> = eps.iter().filter_map(f).collect();
                mean_std(&v)
            };
            SummaryRow {
                map,
                method,
                target_policy,
                seeds: eps.iter().map(|e| e.seed).collect(),
                te_mean: col(|e| e.te_mean),
                te_min: col(|e| e.te_min),
                te_max: col(|e| e.te_max),
                psnr_final: col(|e| e.psnr_final),
            }
        })
        .collect()
}

fn cell(v: Option<(f64, f64)>) -> String {
    v.map_or("N/A".into(), |(m, s)| format!("{m:.3} ± {s:.3}"))
}

pub fn summary_markdown(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    s.push_str("| Map | Method | Targets | Seeds | TE Mean (m) | TE Min (m) | TE Max (m) | PSNR (dB) |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            r.map,
            r.method,
            r.target_policy,
            seeds.join(","),
            cell(r.te_mean),
            cell(r.te_min),
            cell(r.te_max),
            cell(r.psnr_final)
        );
    }
    s
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn plot_err(path: &Path) -> impl Fn(String) -> HarnessError + '_ {
    move |e| HarnessError::Format(format!("{}: {e}", path.display()))
}

fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "map", "method", "target_policy", "seeds", "te_mean", "te_mean_std", "te_min", "te_min_std", "te_max",
        "te_max_std", "psnr", "psnr_std",
    ])
    .map_err(err)?;
    let pair = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => [m.to_string(), s.to_string()],
        None => ["N/A".to_string(), "N/A".to_string()],
    };
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let mut rec = vec![r.map.clone(), r.method.clone(), r.target_policy.clone(), seeds.join(" ")];
        for v in [r.te_mean, r.te_min, r.te_max, r.psnr_final] {
            rec.extend(pair(v));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(io(path))
}

fn resolve_map(name: &str) -> Option<CityMap> {
    match builtin::get(name) {
        Some(m) => m.ok(),
        None => load_map(name).ok(),
    }
}

/// Min (opaque) and max (faint) error curves, with the contributing target
/// id printed where it holds for at least `min_run` ticks.
pub fn plot_error_curves(log: &MetricsLog, path: &Path) -> Result<(), HarnessError> {
    let err = plot_err(path);
    let pts: Vec<(usize, f64, usize, f64, usize)> = log
        .ticks
        .iter()
        .filter_map(|t| Some((t.tick, t.min?.0, t.min?.1, t.max?.0, t.max?.1)))
        .collect();
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let y_hi = pts.iter().map(|p| p.3).fold(1.0, f64::max) * 1.1;
    let x_hi = log.ticks.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} / {} targets / seed {}", log.label, log.target_policy, log.seed), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0..x_hi, 0.0..y_hi)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("control step")
        .y_desc("tracking error (m)")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.3)), RED.mix(0.3).stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("max")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED.mix(0.3)));
    chart
        .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), BLUE.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("min")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    let min_run = 30;
    for (sel, color) in [(0usize, BLUE.to_rgba()), (1, RED.mix(0.6))] {
        let mut start = 0;
        while start < pts.len() {
            let id = if sel == 0 { pts[start].2 } else { pts[start].4 };
            let mut end = start;
            while end < pts.len() && (if sel == 0 { pts[end].2 } else { pts[end].4 }) == id {
                end += 1;
            }
            if end - start >= min_run {
                let p = pts[start];
                let y = if sel == 0 { p.1 } else { p.3 };
                chart
                    .draw_series(std::iter::once(Text::new(format!("t{id}"), (p.0, y), ("sans-serif", 12).into_font().color(&color))))
                    .map_err(|e| err(e.to_string()))?;
            }
            start = end;
        }
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

pub fn plot_psnr(log: &MetricsLog, path: &Path) -> Result<(), HarnessError> {
    let err = plot_err(path);
    let a: Vec<(usize, f64)> = log.planning.iter().filter_map(|p| Some((p.step, p.psnr_2k?))).collect();
    let b: Vec<(usize, f64)> = log.planning.iter().filter_map(|p| Some((p.step, p.psnr_final?))).collect();
    let all: Vec<f64> = a.iter().chain(&b).map(|p| p.1).collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).min(10.0) - 1.0;
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 2.0) + 1.0;
    let root = SVGBackend::new(path, (900, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("PSNR, {} seed {}", log.label, log.seed), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0..log.planning.len().max(1), lo..hi)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("planning step")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(a, GREEN.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("after 2000 steps")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], GREEN));
    chart
        .draw_series(LineSeries::new(b, BLACK.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?
        .label("after full budget")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Top-down view: footprints, the scout's ground track and target paths.
pub fn plot_trajectory(log: &MetricsLog, map: Option<&CityMap>, path: &Path) -> Result<(), HarnessError> {
    let err = plot_err(path);
    let (x0, x1, y0, y1) = match map {
        Some(m) => (m.bounds().min.x, m.bounds().max.x, m.bounds().min.y, m.bounds().max.y),
        None => {
            let xs = log.ticks.iter().map(|t| t.pose.position.x);
            let ys = log.ticks.iter().map(|t| t.pose.position.y);
            (
                xs.clone().fold(f64::INFINITY, f64::min) - 10.0,
                xs.fold(f64::NEG_INFINITY, f64::max) + 10.0,
                ys.clone().fold(f64::INFINITY, f64::min) - 10.0,
                ys.fold(f64::NEG_INFINITY, f64::max) + 10.0,
            )
        }
    };
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} / {} seed {}", log.label, log.target_policy, log.seed), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(45)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart.configure_mesh().disable_mesh().draw().map_err(|e| err(e.to_string()))?;
    if let Some(m) = map {
        for b in m.buildings() {
            let pts: Vec<(f64, f64)> = b.footprint().iter().map(|p| (p.x, p.y)).collect();
            chart
                .draw_series(std::iter::once(Polygon::new(pts, RGBColor(150, 150, 150).mix(0.6).filled())))
                .map_err(|e| err(e.to_string()))?;
        }
    }
    let palette = [&MAGENTA, &CYAN, &GREEN, &RED, &BLACK];
    for id in 0..log.target_count {
        let mut path_pts: Vec<(f64, f64)> = Vec::new();
        for t in &log.ticks {
            let p = (t.truths[id][0], t.truths[id][1]);
            if path_pts.last() != Some(&p) {
                path_pts.push(p);
            }
        }
        let color = palette[id % palette.len()];
        chart
            .draw_series(LineSeries::new(path_pts.clone(), color.mix(0.7).stroke_width(1)))
            .map_err(|e| err(e.to_string()))?;
        if let Some(&p) = path_pts.last() {
            chart
                .draw_series(std::iter::once(Circle::new(p, 3, color.filled())))
                .map_err(|e| err(e.to_string()))?;
        }
    }
    let track: Vec<(f64, f64)> = log.ticks.iter().map(|t| (t.pose.position.x, t.pose.position.y)).collect();
    chart
        .draw_series(LineSeries::new(track, BLUE.stroke_width(2)))
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

fn episode_dir_name(log: &MetricsLog) -> String {
    let slug: String = log
        .label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    format!("{}_{}_{}_s{}", log.map, slug, log.target_policy, log.seed)
}

/// Writes the comparison table (CSV and Markdown), per-episode summaries
/// and, per episode, the CSV tables and SVG plots.
pub fn emit_report(logs: &[MetricsLog], out: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    if logs.is_empty() {
        return Err(HarnessError::Config("no episode logs to report".into()));
    }
    std::fs::create_dir_all(out).map_err(io(out))?;
    let rows = summarize(logs);
    write_summary_csv(&rows, &out.join("summary.csv"))?;
    let md = out.join("summary.md");
    std::fs::write(&md, summary_markdown(&rows)).map_err(io(&md))?;

    let eps: Vec<EpisodeSummary> = logs.iter().map(MetricsLog::summary).collect();
    let ep_path = out.join("episodes.json");
    let text = serde_json::to_string_pretty(&eps).map_err(|e| HarnessError::Format(e.to_string()))?;
    std::fs::write(&ep_path, text).map_err(io(&ep_path))?;

    let mut maps: BTreeMap<String, Option<CityMap>> = BTreeMap::new();
    for log in logs {
        let dir = out.join(episode_dir_name(log));
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        log.write_csvs(&dir)?;
        if log.target_count > 0 {
            plot_error_curves(log, &dir.join("error_curves.svg"))?;
        }
        if log.planning.iter().any(|p| p.psnr_final.is_some()) {
            plot_psnr(log, &dir.join("psnr.svg"))?;
        }
        let map = maps.entry(log.map.clone()).or_insert_with(|| resolve_map(&log.map));
        plot_trajectory(log, map.as_ref(), &dir.join("trajectory.svg"))?;
    }
    Ok(rows)
}

/// Top-down raster of the map: footprints in their palette colors, darker
/// for lower buildings, on the ground color.
pub fn render_map_png(map: &CityMap, path: &Path, size: u32) -> Result<(), HarnessError> {
    let b = map.bounds();
    let scale = size as f64 / b.width().max(b.height());
    let (w, h) = (((b.width() * scale).round() as u32).max(1), ((b.height() * scale).round() as u32).max(1));
    let top = map.max_building_height().max(1e-9);
    let to_u8 = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = image::RgbImage::from_fn(w, h, |px, py| {
        let p = nalgebra::Vector2::new(b.min.x + (px as f64 + 0.5) / scale, b.max.y - (py as f64 + 0.5) / scale);
        let hit = map
            .buildings()
            .iter()
            .enumerate()
            .filter(|(_, bl)| bl.contains_xy(&p))
            .max_by(|x, y| x.1.height().total_cmp(&y.1.height()));
        let c = match hit {
            Some((i, bl)) => {
                let base = building_color(i);
                let shade = 0.5 + 0.5 * bl.height() / top;
                [base[0] * shade, base[1] * shade, base[2] * shade]
            }
            None => GROUND_COLOR,
        };
        image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
    });
    img.save(path).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_two_pass() {
        let (m, s) = mean_std(&[1.0, 2.0, 4.0]).unwrap();
        assert!((m - 7.0 / 3.0).abs() < 1e-12);
        assert!((s - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0]), Some((5.0, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }
}

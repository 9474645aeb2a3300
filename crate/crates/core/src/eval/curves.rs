//! Knowledge-change curves: per-KC mean change in predicted mastery since
//! the KC's first occurrence in each dialogue.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kt::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based occurrence index of the KC within a dialogue.
    pub occurrence: usize,
    pub mean: f64,
    /// Population standard deviation across dialogues.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub kc: String,
    /// Occurrences of the KC across all records.
    pub frequency: usize,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub series: Vec<CurveSeries>,
    pub notes: Vec<String>,
}

/// Mastery sequence of every (dialogue, KC), ordered by turn.
fn sequences(records: &[PredictionRecord]) -> BTreeMap<&str, BTreeMap<&str, Vec<(usize, f64)>>> {
    let mut out: BTreeMap<&str, BTreeMap<&str, Vec<(usize, f64)>>> = BTreeMap::new();
    for r in records {
        for (kc, z) in r.kcs.iter().zip(&r.z_hats) {
            out.entry(kc).or_default().entry(&r.dialogue_id).or_default().push((r.j, *z));
        }
    }
    for per_dialogue in out.values_mut() {
        for seq in per_dialogue.values_mut() {
            seq.sort_by_key(|&(j, _)| j);
        }
    }
    out
}

/// Curves for the `top_n` most frequent KCs that occur at least twice in
/// some dialogue. Records are used whether or not they are excluded from
/// metrics.
pub fn knowledge_curves(records: &[PredictionRecord], top_n: usize) -> CurveReport {
    let seqs = sequences(records);
    let mut ranked: Vec<(&str, usize)> = seqs
        .iter()
        .map(|(kc, per)| (*kc, per.values().map(Vec::len).sum()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut report = CurveReport::default();
    for (kc, frequency) in ranked {
        if report.series.len() == top_n {
            break;
        }
        let per = &seqs[kc];
        let longest = per.values().map(Vec::len).max().unwrap_or(0);
        if longest < 2 {
            report.notes.push(format!("{kc}: fewer than 2 occurrences in every dialogue, skipped"));
            continue;
        }
        let points = (0..longest)
            .map(|i| {
                let deltas: Vec<f64> = per.values().filter(|s| s.len() > i).map(|s| s[i].1 - s[0].1).collect();
                let n = deltas.len() as f64;
                let mean = deltas.iter().sum::<f64>() / n;
                let std = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
                CurvePoint {
                    occurrence: i + 1,
                    mean,
                    std,
                    n: deltas.len(),
                }
            })
            .collect();
        report.series.push(CurveSeries {
            kc: kc.to_string(),
            frequency,
            points,
        });
    }
    report
}

const FONT_PATHS: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
];

/// Registers a sans-serif font for plot text; `DIALOGUE_KT_FONT` overrides
/// the search path. Plots are drawn without text when none loads.
fn fonts_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var("DIALOGUE_KT_FONT").ok();
        for path in env.iter().map(String::as_str).chain(FONT_PATHS) {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; curve plots will have no text");
        false
    })
}

pub fn file_stem(kc: &str) -> String {
    kc.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, plotters::coord::Shift>, s: &CurveSeries) -> std::result::Result<(), String> {
    let err = |e: DrawingAreaErrorKind<DB::ErrorType>| e.to_string();
    root.fill(&WHITE).map_err(err)?;
    let text = fonts_available();
    let x_max = s.points.len() as f64 + 0.5;
    let lo = s.points.iter().map(|p| p.mean - p.std).fold(0.0, f64::min);
    let hi = s.points.iter().map(|p| p.mean + p.std).fold(0.0, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.05);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if text {
        builder
            .caption(format!("{} (n = {})", s.kc, s.frequency), ("sans-serif", 20))
            .x_label_area_size(36)
            .y_label_area_size(52);
    }
    let mut chart = builder.build_cartesian_2d(0.5..x_max, (lo - pad)..(hi + pad)).map_err(err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc("Occurrence")
            .y_desc("Mastery change")
            .x_labels(s.points.len().min(12))
            .x_label_formatter(&|x| format!("{x:.0}"))
            .draw()
            .map_err(err)?;
    }
    chart
        .draw_series(LineSeries::new(s.points.iter().map(|p| (p.occurrence as f64, p.mean)), BLUE.stroke_width(2)))
        .map_err(err)?;
    chart
        .draw_series(s.points.iter().map(|p| {
            let x = p.occurrence as f64;
            ErrorBar::new_vertical(x, p.mean - p.std, p.mean, p.mean + p.std, BLUE.filled(), 8)
        }))
        .map_err(err)?;
    if text {
        chart
            .draw_series(
                s.points
                    .iter()
                    .map(|p| Text::new(format!("N={}", p.n), (p.occurrence as f64 + 0.05, p.mean + p.std), ("sans-serif", 12))),
            )
            .map_err(err)?;
    }
    root.present().map_err(err)
}

/// Writes `<kc>.svg` and `<kc>.png` into `dir` for every series.
pub fn write_plots(report: &CurveReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for s in &report.series {
        let stem = file_stem(&s.kc);
        let svg = dir.join(format!("{stem}.svg"));
        draw(SVGBackend::new(&svg, (720, 480)).into_drawing_area(), s).map_err(Error::Plot)?;
        let png = dir.join(format!("{stem}.png"));
        draw(BitMapBackend::new(&png, (720, 480)).into_drawing_area(), s).map_err(Error::Plot)?;
        written.push(svg);
        written.push(png);
    }
    Ok(written)
}

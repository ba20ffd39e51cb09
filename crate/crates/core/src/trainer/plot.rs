//! Two-panel SVG training curves: train loss and validation top-1 per epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::metrics::{read_metrics, EpochMetrics};
use crate::trainer::objective::ObjectiveKind;

/// One objective's curve, averaged over seeds at each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub objective: String,
    /// `(epoch, train loss, val top-1)`.
    pub points: Vec<(usize, f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 260.0;
const TOP: f64 = 60.0;
const LEFTS: [f64; 2] = [80.0, 560.0];

/// Groups metrics rows by dataset, then by objective.
pub fn series_by_dataset(rows: &[EpochMetrics]) -> BTreeMap<String, Vec<Series>> {
    let mut acc: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, (f64, f64, usize)>>> =
        BTreeMap::new();
    for r in rows {
        let e = acc
            .entry(&r.dataset)
            .or_default()
            .entry(&r.objective)
            .or_default()
            .entry(r.epoch)
            .or_insert((0.0, 0.0, 0));
        e.0 += r.train_loss;
        e.1 += r.val_top1;
        e.2 += 1;
    }
    let rank = |tag: &str| {
        tag.parse::<ObjectiveKind>()
            .ok()
            .and_then(|k| ObjectiveKind::ALL.iter().position(|&o| o == k))
            .unwrap_or(usize::MAX)
    };
    acc.into_iter()
        .map(|(dataset, objectives)| {
            let mut series: Vec<Series> = objectives
                .into_iter()
                .map(|(objective, epochs)| Series {
                    objective: objective.to_string(),
                    points: epochs
                        .into_iter()
                        .map(|(e, (l, a, n))| (e, l / n as f64, a / n as f64))
                        .collect(),
                })
                .collect();
            series.sort_by(|a, b| {
                rank(&a.objective)
                    .cmp(&rank(&b.objective))
                    .then(a.objective.cmp(&b.objective))
            });
            (dataset.to_string(), series)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64) -> Self {
        if hi > lo {
            Self { lo, hi }
        } else {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            Self {
                lo: lo - pad,
                hi: hi + pad,
            }
        }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn panel(
    svg: &mut String,
    left: f64,
    title: &str,
    ylabel: &str,
    x: &Axis,
    y: &Axis,
    series: &[(usize, Vec<(f64, f64)>)],
) {
    let bottom = TOP + PANEL_H;
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.2}" y="{TOP:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
        left + PANEL_W / 2.0,
        TOP - 10.0,
        escape(title)
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = left + f * PANEL_W;
        let py = bottom - f * PANEL_H;
        let xv = x.lo + f * (x.hi - x.lo);
        let yv = y.lo + f * (y.hi - y.lo);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{bottom:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="11">{xv:.1}</text>"##,
            bottom + 5.0,
            bottom + 18.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11">{yv:.3}</text>"##,
            left - 5.0,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">epoch</text>"#,
        left + PANEL_W / 2.0,
        bottom + 36.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        left - 55.0,
        TOP + PANEL_H / 2.0,
        left - 55.0,
        TOP + PANEL_H / 2.0,
        escape(ylabel)
    );
    for (color_idx, pts) in series {
        let color = PALETTE[color_idx % PALETTE.len()];
        let coords: Vec<(f64, f64)> = pts
            .iter()
            .map(|&(ex, vy)| (left + x.frac(ex) * PANEL_W, bottom - y.frac(vy) * PANEL_H))
            .collect();
        if coords.len() == 1 {
            let (cx, cy) = coords[0];
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{color}"/>"#
            );
        } else {
            let list: Vec<String> = coords
                .iter()
                .map(|(a, b)| format!("{a:.2},{b:.2}"))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                list.join(" ")
            );
        }
    }
}

/// Renders one dataset's curves as a standalone SVG document.
pub fn render_svg(dataset: &str, series: &[Series]) -> Result<String> {
    let all: Vec<&(usize, f64, f64)> = series.iter().flat_map(|s| &s.points).collect();
    if all.is_empty() {
        return Err(Error::NoData(format!("no metrics rows for {dataset}")));
    }
    let emin = all.iter().map(|p| p.0).min().expect("non-empty") as f64;
    let emax = all.iter().map(|p| p.0).max().expect("non-empty") as f64;
    let lmin = all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let lmax = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let x = Axis::new(emin, emax);
    let loss_axis = Axis::new(lmin, lmax);
    let acc_axis = Axis::new(0.0, 1.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{HEIGHT:.0}" viewBox="0 0 {WIDTH:.0} {HEIGHT:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(dataset)
    );
    let loss: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.points.iter().map(|p| (p.0 as f64, p.1)).collect()))
        .collect();
    let acc: Vec<(usize, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(i, s)| (i, s.points.iter().map(|p| (p.0 as f64, p.2)).collect()))
        .collect();
    panel(
        &mut svg,
        LEFTS[0],
        "training loss",
        "train loss",
        &x,
        &loss_axis,
        &loss,
    );
    panel(
        &mut svg,
        LEFTS[1],
        "validation accuracy",
        "val top-1",
        &x,
        &acc_axis,
        &acc,
    );
    let legend_y = TOP + PANEL_H + 56.0;
    for (i, s) in series.iter().enumerate() {
        let lx = LEFTS[0] + (i % 4) as f64 * 200.0;
        let ly = legend_y + (i / 4) as f64 * 18.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/><text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            escape(&s.objective)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn file_stem(dataset: &str) -> String {
    dataset
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `curves_<dataset>.svg` for every dataset found in the CSVs.
pub fn plot_metrics(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for p in csvs {
        rows.extend(read_metrics(p)?);
    }
    if rows.is_empty() {
        return Err(Error::NoData("metrics files contain no rows".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (dataset, series) in series_by_dataset(&rows) {
        let path = out_dir.join(format!("curves_{}.svg", file_stem(&dataset)));
        std::fs::write(&path, render_svg(&dataset, &series)?).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(objective: &str, epoch: usize, seed: u64, loss: f64) -> EpochMetrics {
        EpochMetrics {
            epoch,
            objective: objective.into(),
            dataset: "synthetic".into(),
            seed,
            train_loss: loss,
            ce: None,
            sil: None,
            supcon: None,
            proxy_nca: None,
            center: None,
            sil_skipped: 0,
            supcon_skipped: 0,
            sil_score_min: None,
            sil_score_max: None,
            val_top1: 0.1 * epoch as f64 / 2.0,
            val_top5: 0.9,
            top5_k: 5,
            val_silhouette: 0.0,
        }
    }

    #[test]
    fn two_objectives_give_two_polylines_per_panel() {
        let rows: Vec<_> = (1..=10)
            .flat_map(|e| {
                [
                    row("CE", e, 0, 2.0 / e as f64),
                    row("CE+SIL", e, 0, 1.0 / e as f64),
                ]
            })
            .collect();
        let map = series_by_dataset(&rows);
        let svg = render_svg("synthetic", &map["synthetic"]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains(">epoch<"));
        assert!(svg.contains(">CE+SIL<"));
    }

    #[test]
    fn extremes_land_on_panel_corners() {
        let series = [Series {
            objective: "CE".into(),
            points: vec![(1, 2.0, 0.0), (3, 1.0, 1.0)],
        }];
        let svg = render_svg("d", &series).unwrap();
        // highest loss at the top left, lowest at the bottom right
        assert!(
            svg.contains(r#"points="80.00,60.00 460.00,320.00""#),
            "{svg}"
        );
        // accuracy axis is fixed to [0, 1]
        assert!(
            svg.contains(r#"points="560.00,320.00 940.00,60.00""#),
            "{svg}"
        );
        assert_eq!(svg, render_svg("d", &series).unwrap());
    }

    #[test]
    fn single_epoch_draws_markers() {
        let map = series_by_dataset(&[row("CE", 1, 0, 1.0)]);
        let svg = render_svg("synthetic", &map["synthetic"]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn seeds_are_averaged() {
        let map = series_by_dataset(&[row("CE", 1, 0, 1.0), row("CE", 1, 1, 3.0)]);
        assert_eq!(map["synthetic"][0].points, vec![(1, 2.0, 0.05)]);
    }

    #[test]
    fn empty_csv_is_no_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{}\n", crate::trainer::metrics::METRICS_HEADER)).unwrap();
        assert!(matches!(
            plot_metrics(&[p], dir.path()),
            Err(Error::NoData(_))
        ));
    }
}

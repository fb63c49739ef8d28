//! SVG figures from a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fgasl_core::orchestrator::{ExperimentRecord, RunStatus};
use plotters::prelude::*;

use crate::report::label_count;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
    /// Figures that were not drawn, with the reason.
    pub skipped: Vec<String>,
}

impl PlotSummary {
    fn skip(&mut self, what: String) {
        log::warn!("{what}");
        self.skipped.push(what);
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn mean_by_x(points: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for (x, y) in points {
        let e = acc.entry(x.to_bits()).or_insert((x, 0.0, 0));
        e.1 += y;
        e.2 += 1;
    }
    let mut v: Vec<(f64, f64)> = acc.into_values().map(|(x, s, n)| (x, s / n as f64)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Dice-vs-round per strategy, weight and gap trajectories per record, and a
/// label-count curve when the suite swept label counts.
pub fn plot_all(records: &[ExperimentRecord], dir: &Path) -> Result<PlotSummary> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut out = PlotSummary::default();
    let done: Vec<&ExperimentRecord> = records.iter().filter(|r| r.status == RunStatus::Completed).collect();

    let mut by_strategy: BTreeMap<&str, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in &done {
        by_strategy.entry(r.strategy.as_str()).or_default().push(r);
    }
    let convergence: Vec<Series> = by_strategy
        .iter()
        .filter_map(|(name, rs)| {
            let pts = mean_by_x(rs.iter().flat_map(|r| r.history.iter().map(|h| (h.round as f64, h.dice))));
            (!pts.is_empty()).then(|| Series {
                label: name.to_string(),
                points: pts,
            })
        })
        .collect();
    if convergence.is_empty() {
        out.skip("convergence plot skipped: no per-round history".into());
    } else {
        let p = dir.join("convergence.svg");
        line_chart(&p, "Unseen-domain Dice", "round", "Dice", &convergence)?;
        out.written.push(p);
    }

    for r in &done {
        if r.aggregation.is_empty() {
            out.skip(format!("{}: weight and gap plots skipped: no aggregation history", r.key()));
            continue;
        }
        let clients = &r.aggregation[0].client_ids;
        let trajectory = |pick: fn(&fgasl_core::orchestrator::RoundAggregation) -> &Vec<f64>| -> Vec<Series> {
            clients
                .iter()
                .enumerate()
                .map(|(i, c)| Series {
                    label: format!("client {c}"),
                    points: r.aggregation.iter().map(|a| (a.round as f64, pick(a)[i])).collect(),
                })
                .collect()
        };
        let p = dir.join(format!("{}.weights.svg", r.key()));
        line_chart(&p, "Aggregation weights", "round", "weight", &trajectory(|a| &a.weights))?;
        out.written.push(p);
        let p = dir.join(format!("{}.gaps.svg", r.key()));
        line_chart(&p, "Generalization gaps", "round", "gap", &trajectory(|a| &a.gaps))?;
        out.written.push(p);
    }

    let counts: std::collections::BTreeSet<usize> = done.iter().map(|r| label_count(r)).collect();
    if counts.len() > 1 {
        let sweep: Vec<Series> = by_strategy
            .iter()
            .map(|(name, rs)| Series {
                label: name.to_string(),
                points: mean_by_x(rs.iter().filter_map(|r| Some((label_count(r) as f64, r.final_dice()?)))),
            })
            .collect();
        let p = dir.join("labels.svg");
        line_chart(&p, "Dice vs labels per domain", "labeled images per domain", "Dice", &sweep)?;
        out.written.push(p);
    }
    Ok(out)
}

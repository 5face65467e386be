//! Static SVG histograms for evaluation reports.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

fn counts(values: &[usize], max: usize) -> Vec<u32> {
    let mut c = vec![0u32; max + 1];
    for &v in values {
        c[v.min(max)] += 1;
    }
    c
}

/// Overlaid histograms of generated and reference lengths in tokens.
pub fn length_histogram(path: &Path, generated: &[usize], reference: &[usize]) -> Result<()> {
    let max = generated.iter().chain(reference).copied().max().unwrap_or(0) + 1;
    let (g, r) = (counts(generated, max), counts(reference, max));
    let top = g.iter().chain(&r).copied().max().unwrap_or(0) + 1;
    draw(path, "Recipe length distribution", "tokens", max, top, |chart| {
        for (series, color, label) in [(&g, BLUE, "generated"), (&r, RED, "reference")] {
            chart
                .draw_series(series.iter().enumerate().map(|(x, &y)| {
                    Rectangle::new([(x as u32, 0), (x as u32 + 1, y)], color.mix(0.4).filled())
                }))
                .map_err(|e| anyhow!("{e}"))?
                .label(label)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
        Ok(())
    })
}

/// Histogram of true-match ranks.
pub fn rank_histogram(path: &Path, ranks: &[usize]) -> Result<()> {
    let max = ranks.iter().copied().max().unwrap_or(0) + 1;
    let c = counts(ranks, max);
    let top = c.iter().copied().max().unwrap_or(0) + 1;
    draw(path, "Rank of the true match", "rank", max, top, |chart| {
        chart
            .draw_series(c.iter().enumerate().map(|(x, &y)| {
                Rectangle::new([(x as u32, 0), (x as u32 + 1, y)], BLUE.mix(0.6).filled())
            }))
            .map_err(|e| anyhow!("{e}"))?
            .label("queries")
            .legend(|(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], BLUE.filled()));
        Ok(())
    })
}

type Chart<'a, 'b> =
    ChartContext<'a, SVGBackend<'b>, Cartesian2d<plotters::coord::types::RangedCoordu32, plotters::coord::types::RangedCoordu32>>;

fn draw(
    path: &Path,
    title: &str,
    x_desc: &str,
    max_x: usize,
    max_y: u32,
    body: impl FnOnce(&mut Chart<'_, '_>) -> Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0u32..max_x as u32 + 1, 0u32..max_y)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("count")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    body(&mut chart)?;
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

//! Deterministic SVG forest plots.
//!
//! Pure string assembly: same rows in, same bytes out. Each row draws a
//! point estimate with a 1.96-standard-error whisker; an optional pooled
//! row is drawn as a diamond under a separator. A dashed reference line
//! marks zero. No fonts are embedded; labels use the viewer's monospace
//! family so the geometry never depends on font metrics.

use serde::{Deserialize, Serialize};

/// One plotted estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestRow {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
}

impl ForestRow {
    fn lo(&self) -> f64 {
        self.estimate - 1.96 * self.se
    }
    fn hi(&self) -> f64 {
        self.estimate + 1.96 * self.se
    }
}

/// Plot geometry and labeling.
#[derive(Debug, Clone)]
pub struct ForestOptions {
    pub width: u32,
    pub title: String,
    pub x_label: String,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            width: 720,
            title: String::new(),
            x_label: "effect".to_string(),
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

const ROW_H: f64 = 26.0;
const TOP: f64 = 46.0;
const LABEL_W: f64 = 150.0;
const VALUE_W: f64 = 170.0;
const BOTTOM: f64 = 56.0;

/// Render rows (and an optional pooled diamond) to an SVG document.
pub fn forest_svg(rows: &[ForestRow], pooled: Option<&ForestRow>, opts: &ForestOptions) -> String {
    let n_rows = rows.len() + usize::from(pooled.is_some());
    let width = opts.width as f64;
    let height = TOP + ROW_H * n_rows as f64 + BOTTOM;
    let plot_left = LABEL_W;
    let plot_right = width - VALUE_W;

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for r in rows.iter().chain(pooled) {
        lo = lo.min(r.lo());
        hi = hi.max(r.hi());
    }
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let pad = 0.06 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| plot_left + (v - lo) / (hi - lo) * (plot_right - plot_left);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{:.0}\" viewBox=\"0 0 {} {:.0}\">\n",
        opts.width, height, opts.width, height
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{:.0}\" fill=\"white\"/>\n",
        opts.width, height
    ));
    if !opts.title.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" font-weight=\"bold\">{}</text>\n",
            plot_left,
            esc(&opts.title)
        ));
    }

    let axis_y = TOP + ROW_H * n_rows as f64 + 12.0;
    // zero reference line, dashed, across the full row band
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\n",
        x(0.0),
        TOP - 8.0,
        x(0.0),
        axis_y
    ));

    for (i, r) in rows.iter().enumerate() {
        let cy = TOP + ROW_H * (i as f64 + 0.5);
        svg.push_str(&format!(
            "<text x=\"8\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" dominant-baseline=\"middle\">{}</text>\n",
            cy,
            esc(&r.label)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1.2\"/>\n",
            x(r.lo()),
            cy,
            x(r.hi()),
            cy
        ));
        for end in [r.lo(), r.hi()] {
            svg.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1.2\"/>\n",
                x(end),
                cy - 4.0,
                x(end),
                cy + 4.0
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"7\" height=\"7\" fill=\"#1f4e8c\"/>\n",
            x(r.estimate) - 3.5,
            cy - 3.5
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" dominant-baseline=\"middle\">{}</text>\n",
            plot_right + 10.0,
            cy,
            esc(&format!("{:.2} [{:.2}, {:.2}]", r.estimate, r.lo(), r.hi()))
        ));
    }

    if let Some(p) = pooled {
        let cy = TOP + ROW_H * (rows.len() as f64 + 0.5);
        let sep_y = TOP + ROW_H * rows.len() as f64;
        svg.push_str(&format!(
            "<line x1=\"8\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#cccccc\"/>\n",
            sep_y,
            width - 8.0,
            sep_y
        ));
        svg.push_str(&format!(
            "<text x=\"8\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" font-weight=\"bold\" dominant-baseline=\"middle\">{}</text>\n",
            cy,
            esc(&p.label)
        ));
        svg.push_str(&format!(
            "<polygon points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"#8c1f2f\"/>\n",
            x(p.lo()),
            cy,
            x(p.estimate),
            cy - 7.0,
            x(p.hi()),
            cy,
            x(p.estimate),
            cy + 7.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"13\" font-weight=\"bold\" dominant-baseline=\"middle\">{}</text>\n",
            plot_right + 10.0,
            cy,
            esc(&format!("{:.2} [{:.2}, {:.2}]", p.estimate, p.lo(), p.hi()))
        ));
    }

    // axis with five evenly spaced ticks
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        plot_left, axis_y, plot_right, axis_y
    ));
    for t in 0..5 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            x(v),
            axis_y,
            x(v),
            axis_y + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>\n",
            x(v),
            axis_y + 18.0,
            v
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (plot_left + plot_right) / 2.0,
        axis_y + 36.0,
        esc(&opts.x_label)
    ));
    svg.push_str("</svg>\n");
    svg
}

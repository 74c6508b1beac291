//! Tiny SVG emitters for analysis bar charts and training curves.

use std::path::Path;

use crate::error::Result;
use crate::storage::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bar chart of labeled non-negative values.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    assert_eq!(labels.len(), values.len());
    let mut svg = svg_header(title);
    let max = values.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let n = values.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let h = (v / max).max(0.0) * plot_h;
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let y = HEIGHT - MARGIN - h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            HEIGHT - MARGIN + 16.0,
            escape(label)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{v:.4}</text>\n",
            x + bar_w / 2.0,
            y - 6.0
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Line chart of a series (training-loss curves).
pub fn line_chart_svg(title: &str, values: &[f64]) -> String {
    let mut svg = svg_header(title);
    if !values.is_empty() {
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let span = (max - min).max(1e-12);
        let plot_w = WIDTH - 2.0 * MARGIN;
        let plot_h = HEIGHT - 2.0 * MARGIN;
        let mut points = String::new();
        for (i, &v) in values.iter().enumerate() {
            let x = MARGIN + plot_w * i as f64 / (values.len().max(2) - 1) as f64;
            let y = HEIGHT - MARGIN - plot_h * (v - min) / span;
            points.push_str(&format!("{x:.1},{y:.1} "));
        }
        svg.push_str(&format!(
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"#a84848\" stroke-width=\"1.5\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\">min {min:.4}</text>\n",
            HEIGHT - MARGIN + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{MARGIN}\" y=\"40\" font-family=\"monospace\" font-size=\"11\">max {max:.4}</text>\n"
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN
    ));
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_atomic(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_contains_labels_and_values() {
        let svg = bar_chart_svg(
            "category means",
            &["cross_attention".into(), "other".into()],
            &[0.5, 0.125],
        );
        assert!(svg.contains("cross_attention"));
        assert!(svg.contains("0.5000"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn line_chart_handles_series() {
        let svg = line_chart_svg("loss", &[1.0, 0.5, 0.25]);
        assert!(svg.contains("polyline"));
        let empty = line_chart_svg("loss", &[]);
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn deterministic_output() {
        let a = bar_chart_svg("t", &["a".into()], &[1.0]);
        let b = bar_chart_svg("t", &["a".into()], &[1.0]);
        assert_eq!(a, b);
    }
}

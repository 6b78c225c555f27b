//! Minimal deterministic SVG line plots: multiple labelled series, optional
//! shaded percentile bands, linear axes with ticks, and a legend. Output is
//! plain text with fixed-precision coordinates, so identical inputs render
//! byte-identical files.

use std::io::Write;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 18.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 46.0;
const PALETTE: [&str; 6] = ["#1669c1", "#d94801", "#2e8540", "#7b3294", "#c02d2d", "#6b6b6b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    color: &'static str,
}

struct Band {
    points_hi: Vec<(f64, f64)>,
    points_lo: Vec<(f64, f64)>,
    color: &'static str,
}

/// A line plot under construction.
pub struct LinePlot {
    title: String,
    xlabel: String,
    ylabel: String,
    series: Vec<Series>,
    bands: Vec<Band>,
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick label: short fixed format with trailing zeros trimmed.
fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn finite_pairs(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    xs.iter()
        .zip(ys)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x, y))
        .collect()
}

impl LinePlot {
    /// Starts an empty plot.
    pub fn new(title: &str, xlabel: &str, ylabel: &str) -> LinePlot {
        LinePlot {
            title: title.to_string(),
            xlabel: xlabel.to_string(),
            ylabel: ylabel.to_string(),
            series: Vec::new(),
            bands: Vec::new(),
        }
    }

    /// Adds a labelled line; colors cycle through a fixed palette.
    /// Non-finite points are dropped.
    pub fn line(&mut self, label: &str, xs: &[f64], ys: &[f64]) -> &mut Self {
        let color = PALETTE[self.series.len() % PALETTE.len()];
        self.series.push(Series {
            label: label.to_string(),
            points: finite_pairs(xs, ys),
            color,
        });
        self
    }

    /// Adds a shaded band between `lo` and `hi`, colored to match the most
    /// recently added line (or the next palette color when none exists).
    pub fn band(&mut self, xs: &[f64], lo: &[f64], hi: &[f64]) -> &mut Self {
        let color = self
            .series
            .last()
            .map(|s| s.color)
            .unwrap_or(PALETTE[self.series.len() % PALETTE.len()]);
        self.bands.push(Band {
            points_hi: finite_pairs(xs, hi),
            points_lo: finite_pairs(xs, lo),
            color,
        });
        self
    }

    fn data_bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                xs.push(x);
                ys.push(y);
            }
        }
        for b in &self.bands {
            for &(x, y) in b.points_hi.iter().chain(&b.points_lo) {
                xs.push(x);
                ys.push(y);
            }
        }
        let span = |v: &[f64]| -> (f64, f64) {
            if v.is_empty() {
                return (0.0, 1.0);
            }
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                (lo - 1.0, hi + 1.0)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        (span(&xs), span(&ys))
    }

    /// Renders the finished SVG document.
    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.data_bounds();
        let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
        let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
             font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        out.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            escape_xml(&self.title)
        ));

        // Grid, ticks, and labels: 5 divisions per axis.
        for i in 0..=5 {
            let fx = x0 + (x1 - x0) * i as f64 / 5.0;
            let fy = y0 + (y1 - y0) * i as f64 / 5.0;
            let gx = px(fx);
            let gy = py(fy);
            out.push_str(&format!(
                "<line x1=\"{gx:.2}\" y1=\"{:.2}\" x2=\"{gx:.2}\" y2=\"{:.2}\" \
                 stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
                py(y0),
                py(y1)
            ));
            out.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" \
                 stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
                px(x0),
                px(x1)
            ));
            out.push_str(&format!(
                "<text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_B + 16.0,
                fmt_tick(fx)
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
                MARGIN_L - 6.0,
                gy + 4.0,
                fmt_tick(fy)
            ));
        }

        for b in &self.bands {
            if b.points_hi.is_empty() {
                continue;
            }
            let mut d = String::from("M");
            for &(x, y) in &b.points_hi {
                d.push_str(&format!(" {:.2} {:.2}", px(x), py(y)));
            }
            for &(x, y) in b.points_lo.iter().rev() {
                d.push_str(&format!(" L {:.2} {:.2}", px(x), py(y)));
            }
            d.push_str(" Z");
            out.push_str(&format!(
                "<path d=\"{d}\" fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n",
                b.color
            ));
        }

        for s in &self.series {
            if s.points.is_empty() {
                continue;
            }
            let pts: Vec<String> =
                s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                pts.join(" "),
                s.color
            ));
        }

        // Axes over the grid.
        out.push_str(&format!(
            "<line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"#222222\" \
             stroke-width=\"1.5\"/>\n<line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" \
             stroke=\"#222222\" stroke-width=\"1.5\"/>\n",
            l = MARGIN_L,
            r = WIDTH - MARGIN_R,
            t = MARGIN_T,
            b = HEIGHT - MARGIN_B,
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            HEIGHT - 8.0,
            escape_xml(&self.xlabel)
        ));
        out.push_str(&format!(
            "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" \
             transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            escape_xml(&self.ylabel)
        ));

        for (i, s) in self.series.iter().enumerate() {
            let ly = MARGIN_T + 8.0 + 16.0 * i as f64;
            let lx = WIDTH - MARGIN_R - 150.0;
            out.push_str(&format!(
                "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
                 stroke=\"{}\" stroke-width=\"2\"/>\n",
                lx + 22.0,
                s.color
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
                lx + 28.0,
                ly + 4.0,
                escape_xml(&s.label)
            ));
        }

        out.push_str("</svg>\n");
        out
    }

    /// Renders and writes the plot to a file.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.render().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_well_formed() {
        let mut plot = LinePlot::new("demo", "step", "value");
        plot.line("a < b", &[0.0, 1.0, 2.0], &[0.0, 1.0, 0.5]);
        plot.band(&[0.0, 1.0, 2.0], &[-0.1, 0.8, 0.3], &[0.1, 1.2, 0.7]);
        plot.line("other & more", &[0.0, 1.0, 2.0], &[0.3, 0.2, 0.9]);
        let a = plot.render();
        let b = plot.render();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert!(a.contains("polyline"));
        assert!(a.contains("fill-opacity"));
        assert!(a.contains("a &lt; b"));
        assert!(a.contains("other &amp; more"));
        assert!(!a.contains("NaN"));
    }

    #[test]
    fn non_finite_points_are_dropped() {
        let mut plot = LinePlot::new("t", "x", "y");
        plot.line("s", &[0.0, 1.0, 2.0], &[0.5, f64::NAN, 1.5]);
        let svg = plot.render();
        assert!(!svg.contains("NaN"));
        // Two finite points survive.
        let seg = svg.split("points=\"").nth(1).unwrap();
        let pts = seg.split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 2);
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let mut plot = LinePlot::new("t", "x", "y");
        plot.line("flat", &[1.0, 1.0], &[2.0, 2.0]);
        let svg = plot.render();
        assert!(svg.contains("polyline"));
        let empty = LinePlot::new("empty", "x", "y").render();
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn tick_labels_trim_zeros() {
        assert_eq!(fmt_tick(1.5), "1.5");
        assert_eq!(fmt_tick(2.0), "2");
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(-0.25), "-0.25");
        assert_eq!(fmt_tick(12345.0), "1.2e4");
        assert_eq!(fmt_tick(0.0001), "1.0e-4");
    }
}

//! Self-contained SVG 1.1 heatmaps and line plots.

use std::fmt::Write as _;

use tkfmh::io::format_g;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 120.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

/// Viridis-like ramp, sampled at five stops.
const RAMP: [(f64, f64, f64); 5] =
    [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];

const SERIES: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn colour(u: f64) -> String {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let x = u * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |p: f64, q: f64| (p + f * (q - p)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"15\">{}</text>", WIDTH / 2.0, escape(title));
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axis_labels(s: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let cy = TOP + (HEIGHT - TOP - BOTTOM) / 2.0;
    let _ = writeln!(s, "<text x=\"20\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {cy})\">{}</text>", escape(y_label));
}

pub struct Heatmap<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    /// Row-major by x: `values[i * ys.len() + j]` sits at `(xs[i], ys[j])`.
    pub values: &'a [f64],
    pub marker: Option<(f64, f64)>,
}

impl Heatmap<'_> {
    pub fn render(&self) -> String {
        let (nx, ny) = (self.xs.len(), self.ys.len());
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let (cw, ch) = (pw / nx as f64, ph / ny as f64);
        let (lo, hi) = range(self.values.iter().copied());
        let mut s = header(self.title);
        for i in 0..nx {
            for j in 0..ny {
                let v = self.values[i * ny + j];
                let x = LEFT + i as f64 * cw;
                let y = TOP + (ny - 1 - j) as f64 * ch;
                let _ = writeln!(
                    s,
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{}</title></rect>",
                    cw + 0.3,
                    ch + 0.3,
                    colour((v - lo) / (hi - lo)),
                    format_g(v, 6)
                );
            }
        }
        let _ = writeln!(s, "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>");
        for (i, x) in self.xs.iter().enumerate() {
            let cx = LEFT + (i as f64 + 0.5) * cw;
            let _ = writeln!(s, "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>", TOP + ph + 16.0, format_g(*x, 3));
        }
        for (j, y) in self.ys.iter().enumerate() {
            let cy = TOP + (ny as f64 - j as f64 - 0.5) * ch;
            let _ = writeln!(s, "<text x=\"{}\" y=\"{cy:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>", LEFT - 6.0, format_g(*y, 3));
        }
        if let Some((mx, my)) = self.marker {
            let px = position(self.xs, mx).map(|u| LEFT + (u + 0.5) * cw);
            let py = position(self.ys, my).map(|u| TOP + (ny as f64 - u - 0.5) * ch);
            if let (Some(px), Some(py)) = (px, py) {
                let _ = writeln!(s, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"5\" fill=\"none\" stroke=\"white\" stroke-width=\"2\"/>");
            }
        }
        axis_labels(&mut s, self.x_label, self.y_label);
        colour_bar(&mut s, lo, hi);
        s.push_str("</svg>\n");
        s
    }
}

/// Fractional index of `v` among increasing grid values.
fn position(grid: &[f64], v: f64) -> Option<f64> {
    if grid.len() == 1 {
        return ((v - grid[0]).abs() <= 1e-12 * v.abs().max(1.0)).then_some(0.0);
    }
    let k = grid.windows(2).position(|w| v >= w[0] && v <= w[1])?;
    Some(k as f64 + (v - grid[k]) / (grid[k + 1] - grid[k]))
}

fn colour_bar(s: &mut String, lo: f64, hi: f64) {
    let x = WIDTH - RIGHT + 25.0;
    let (h, steps) = (HEIGHT - TOP - BOTTOM, 40);
    for k in 0..steps {
        let u = k as f64 / (steps - 1) as f64;
        let y = TOP + h * (1.0 - (k + 1) as f64 / steps as f64);
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y:.2}\" width=\"18\" height=\"{:.2}\" fill=\"{}\"/>", h / steps as f64 + 0.3, colour(u));
    }
    let _ = writeln!(s, "<rect x=\"{x}\" y=\"{TOP}\" width=\"18\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>");
    for (v, y) in [(hi, TOP + 4.0), (0.5 * (lo + hi), TOP + h / 2.0 + 4.0), (lo, TOP + h + 4.0)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.2}\" font-size=\"10\">{}</text>", x + 22.0, format_g(v, 4));
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
    /// Half-width of the shaded band around each value.
    pub band: &'a [f64],
}

pub struct LinePlot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub xs: &'a [f64],
    pub series: Vec<Series<'a>>,
    pub marker: Option<f64>,
}

impl LinePlot<'_> {
    pub fn render(&self) -> String {
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let (x0, x1) = range(self.xs.iter().copied());
        let (y0, y1) = range(self.series.iter().flat_map(|s| {
            s.values.iter().zip(s.band).flat_map(|(v, b)| [v - b, v + b])
        }));
        let pad = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad, y1 + pad);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = header(self.title);
        let _ = writeln!(s, "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>");
        for k in 0..=4 {
            let u = k as f64 / 4.0;
            let (xv, yv) = (x0 + u * (x1 - x0), y0 + u * (y1 - y0));
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>", sx(xv), TOP + ph + 16.0, format_g(xv, 3));
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
                LEFT - 6.0,
                sy(yv) + 4.0,
                format_g(yv, 4)
            );
            let _ = writeln!(s, "<line x1=\"{LEFT}\" x2=\"{}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>", LEFT + pw, sy(yv), sy(yv));
        }
        if let Some(m) = self.marker {
            let _ = writeln!(
                s,
                "<line x1=\"{:.2}\" x2=\"{:.2}\" y1=\"{TOP}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
                sx(m),
                sx(m),
                TOP + ph
            );
        }
        for (k, series) in self.series.iter().enumerate() {
            let c = SERIES[k % SERIES.len()];
            let upper = self.xs.iter().zip(series.values.iter().zip(series.band)).map(|(&x, (v, b))| format!("{:.2},{:.2}", sx(x), sy(v + b)));
            let lower = self.xs.iter().zip(series.values.iter().zip(series.band)).rev().map(|(&x, (v, b))| format!("{:.2},{:.2}", sx(x), sy(v - b)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, "<polygon points=\"{}\" fill=\"{c}\" fill-opacity=\"0.2\" stroke=\"none\"/>", band.join(" "));
            let line: Vec<String> = self.xs.iter().zip(series.values).map(|(&x, &v)| format!("{:.2},{:.2}", sx(x), sy(v))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"2\"/>", line.join(" "));
            for (&x, &v) in self.xs.iter().zip(series.values) {
                let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"/>", sx(x), sy(v));
            }
            let ly = TOP + 10.0 + 18.0 * k as f64;
            let lx = WIDTH - RIGHT + 15.0;
            let _ = writeln!(s, "<line x1=\"{lx}\" x2=\"{}\" y1=\"{ly}\" y2=\"{ly}\" stroke=\"{c}\" stroke-width=\"2\"/>", lx + 20.0);
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", lx + 25.0, ly + 4.0, escape(series.name));
        }
        axis_labels(&mut s, self.x_label, self.y_label);
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(colour(0.0), "#440154");
        assert_eq!(colour(1.0), "#fde725");
        assert_eq!(colour(f64::NAN), "#440154");
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [0.1, 0.2];
        let values = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let svg = Heatmap { title: "w", x_label: "x", y_label: "y", xs: &xs, ys: &ys, values: &values, marker: Some((2.0, 0.1)) }
            .render();
        assert!(svg.starts_with("<?xml"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<title>").count(), 6);
        assert!(svg.contains("<circle"));
    }

    #[test]
    fn line_plot_draws_each_series() {
        let xs = [1.0, 2.0, 3.0];
        let a = [0.0, 1.0, 0.5];
        let e = [0.1; 3];
        let svg = LinePlot {
            title: "cut",
            x_label: "x",
            y_label: "y",
            xs: &xs,
            series: vec![Series { name: "a", values: &a, band: &e }, Series { name: "b", values: &a, band: &e }],
            marker: Some(2.0),
        }
        .render();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn marker_position() {
        assert_eq!(position(&[1.0, 2.0, 4.0], 3.0), Some(1.5));
        assert_eq!(position(&[1.0, 2.0], 5.0), None);
        assert_eq!(position(&[1.0], 1.0), Some(0.0));
    }
}

//! Self-contained SVG line plots with optional confidence bands.
//! Output is a pure function of the input series: fixed canvas, fixed
//! formatting, no timestamps.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub name: String,
    /// (x, y) points.
    pub points: Vec<(f64, f64)>,
    /// Optional (x, lo, hi) confidence band.
    pub band: Option<Vec<(f64, f64, f64)>>,
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if let Some(band) = &s.band {
            for &(_, lo, hi) in band {
                y_min = y_min.min(lo);
                y_max = y_max.max(hi);
            }
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R);
    let sy = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        px(WIDTH / 2.0)
    ));

    // Axes.
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(MARGIN_L),
        px(HEIGHT - MARGIN_B),
        px(WIDTH - MARGIN_R),
        px(HEIGHT - MARGIN_B)
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        px(MARGIN_L),
        px(MARGIN_T),
        px(MARGIN_L),
        px(HEIGHT - MARGIN_B)
    ));
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{fx:.1}</text>\n",
            px(sx(fx)),
            px(HEIGHT - MARGIN_B + 18.0)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{fy:.2}</text>\n",
            px(MARGIN_L - 6.0),
            px(sy(fy) + 4.0)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        px((MARGIN_L + WIDTH - MARGIN_R) / 2.0),
        px(HEIGHT - 12.0)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        px((MARGIN_T + HEIGHT - MARGIN_B) / 2.0),
        px((MARGIN_T + HEIGHT - MARGIN_B) / 2.0)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if let Some(band) = &s.band {
            if !band.is_empty() {
                let mut d = String::from("M");
                for &(x, lo, _) in band {
                    d.push_str(&format!("{} {} L", px(sx(x)), px(sy(lo))));
                }
                for &(x, _, hi) in band.iter().rev() {
                    d.push_str(&format!("{} {} L", px(sx(x)), px(sy(hi))));
                }
                d.truncate(d.len() - 2);
                d.push('Z');
                out.push_str(&format!(
                    "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
                ));
            }
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", px(sx(x)), px(sy(y))))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            px(WIDTH - MARGIN_R - 150.0),
            px(MARGIN_T + 16.0 * si as f64),
            s.name
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_deterministic() {
        let series = vec![Series {
            name: "a".into(),
            points: vec![(0.0, 0.1), (1.0, 0.4), (2.0, 0.3)],
            band: Some(vec![(0.0, 0.05, 0.15), (1.0, 0.3, 0.5), (2.0, 0.25, 0.35)]),
        }];
        let a = line_plot("t", "x", "y", &series);
        let b = line_plot("t", "x", "y", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
        assert!(a.contains("fill-opacity"));
    }
}

//! Standalone SVG 1.1 figures: bar panels, line charts and heatmaps.

use std::fmt::Write as _;

const FONT: &str = "font-family=\"Helvetica, Arial, sans-serif\"";
const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(width: f64, height: f64, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\" {FONT}>{}</text>", width / 2.0, escape(title));
    s
}

fn text(s: &mut String, x: f64, y: f64, size: f64, anchor: &str, body: &str) {
    let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-size=\"{size}\" {FONT}>{}</text>", escape(body));
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(l, h), v| (l.min(v), h.max(v)));
    if hi - lo < 1e-12 {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

/// One panel of a bar figure.
#[derive(Debug, Clone)]
pub struct BarPanel {
    pub title: String,
    pub bars: Vec<(String, f64)>,
    /// Printed under the panel, e.g. a Δ value.
    pub annotation: Option<String>,
}

/// Side-by-side bar panels sharing nothing but the figure title.
pub fn bar_panels(title: &str, panels: &[BarPanel]) -> String {
    let pw = 220.0;
    let ph = 220.0;
    let width = pw * panels.len().max(1) as f64 + 40.0;
    let height = ph + 110.0;
    let mut s = open(width, height, title);
    for (p, panel) in panels.iter().enumerate() {
        let x0 = 40.0 + p as f64 * pw;
        let (lo, hi) = bounds(panel.bars.iter().map(|b| b.1));
        let y_of = |v: f64| 50.0 + (hi - v) / (hi - lo) * ph;
        text(&mut s, x0 + pw / 2.0 - 20.0, 44.0, 12.0, "middle", &panel.title);
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", y_of(0.0), x0 + pw - 40.0, y_of(0.0));
        let bw = (pw - 60.0) / panel.bars.len().max(1) as f64;
        for (i, (label, v)) in panel.bars.iter().enumerate() {
            let x = x0 + 10.0 + i as f64 * bw;
            let (top, bottom) = (y_of(v.max(0.0)), y_of(v.min(0.0)));
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                bw * 0.8,
                (bottom - top).max(0.5),
                PALETTE[i % PALETTE.len()]
            );
            text(&mut s, x + bw * 0.4, top - 4.0, 10.0, "middle", &format!("{v:.2}"));
            text(&mut s, x + bw * 0.4, 50.0 + ph + 18.0, 10.0, "middle", label);
        }
        if let Some(a) = &panel.annotation {
            text(&mut s, x0 + pw / 2.0 - 20.0, 50.0 + ph + 40.0, 11.0, "middle", a);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Lines over a shared categorical x axis, in the given label order.
pub fn line_chart(title: &str, x_labels: &[String], series: &[(String, Vec<f64>)], y_label: &str) -> String {
    let (w, h) = (520.0, 300.0);
    let mut s = open(w + 180.0, h + 90.0, title);
    let (lo, hi) = bounds(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let x_of = |i: usize| 60.0 + i as f64 * w / (x_labels.len().max(2) - 1) as f64;
    let y_of = |v: f64| 40.0 + (hi - v) / (hi - lo) * h;
    let _ = writeln!(s, "<line x1=\"60\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", 40.0 + h, 60.0 + w, 40.0 + h);
    let _ = writeln!(s, "<line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"{:.1}\" stroke=\"black\"/>", 40.0 + h);
    for (i, l) in x_labels.iter().enumerate() {
        text(&mut s, x_of(i), 40.0 + h + 18.0, 11.0, "middle", l);
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        text(&mut s, 54.0, y_of(v) + 4.0, 10.0, "end", &format!("{v:.1}"));
    }
    text(&mut s, 16.0, 40.0 + h / 2.0, 11.0, "middle", y_label);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values.iter().enumerate().map(|(i, v)| format!("{:.1},{:.1}", x_of(i), y_of(*v))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", x_of(i), y_of(*v));
        }
        let _ = writeln!(s, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", 80.0 + w, 40.0 + k as f64 * 16.0);
        text(&mut s, 95.0 + w, 49.0 + k as f64 * 16.0, 11.0, "start", name);
    }
    s.push_str("</svg>\n");
    s
}

/// A diverging heatmap; `None` cells are drawn grey and labelled N/A.
pub fn heatmap(title: &str, row_labels: &[String], col_labels: &[String], values: &[Vec<Option<f64>>]) -> String {
    let cw = 70.0;
    let ch = 26.0;
    let left = 140.0;
    let top = 120.0;
    let width = left + cw * col_labels.len() as f64 + 20.0;
    let height = top + ch * row_labels.len() as f64 + 20.0;
    let mut s = open(width, height, title);
    let scale = values.iter().flatten().flatten().fold(1e-9f64, |m, v| m.max(v.abs()));
    for (j, c) in col_labels.iter().enumerate() {
        let x = left + j as f64 * cw + cw / 2.0;
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" {FONT} transform=\"rotate(-45 {x:.1} {:.1})\">{}</text>",
            top - 6.0,
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in row_labels.iter().enumerate() {
        let y = top + i as f64 * ch;
        text(&mut s, left - 6.0, y + ch / 2.0 + 4.0, 11.0, "end", r);
        for (j, v) in values[i].iter().enumerate() {
            let x = left + j as f64 * cw;
            let (fill, label) = match v {
                None => ("#dddddd".to_string(), "N/A".to_string()),
                Some(v) => {
                    let t = (v.abs() / scale).min(1.0);
                    let fade = (255.0 * (1.0 - t)).round() as u8;
                    let fill = if *v < 0.0 { format!("#{fade:02x}{fade:02x}ff") } else { format!("#ff{fade:02x}{fade:02x}") };
                    (fill, format!("{v:+.1}"))
                }
            };
            let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw}\" height=\"{ch}\" fill=\"{fill}\" stroke=\"white\"/>");
            text(&mut s, x + cw / 2.0, y + ch / 2.0 + 4.0, 10.0, "middle", &label);
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_panels_carry_annotations() {
        let p = BarPanel { title: "5-NN".into(), bars: vec![("cluster".into(), 30.0), ("other".into(), 20.0)], annotation: Some("Δ = +10.00".into()) };
        let svg = bar_panels("gap", &[p.clone(), p.clone(), p]);
        assert!(svg.starts_with("<?xml"));
        assert_eq!(svg.matches("Δ = +10.00").count(), 3);
        assert_eq!(svg.matches("<rect x=").count(), 6);
    }

    #[test]
    fn heatmap_marks_missing_cells() {
        let svg = heatmap("h", &["a".into()], &["x".into(), "y".into()], &[vec![Some(-3.0), None]]);
        assert!(svg.contains("N/A"));
        assert!(svg.contains("-3.0"));
    }

    #[test]
    fn text_is_escaped() {
        let svg = line_chart("a<b", &["x".into(), "y".into()], &[("s&t".into(), vec![1.0, 2.0])], "y");
        assert!(svg.contains("a&lt;b") && svg.contains("s&amp;t"));
    }
}

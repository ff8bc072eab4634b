//! Minimal static SVG plots.

use std::fmt::Write as _;

use super::mc::CertaintyRecord;
use super::tsne::Projection2D;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

/// Evenly spaced hues; stable for a given label count.
fn color(label: usize, n_labels: usize) -> String {
    let hue = 360.0 * label as f64 / n_labels.max(1) as f64;
    format!("hsl({hue:.0},65%,45%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

/// Scatter of a 2-D projection colored by label, with a legend.
pub fn scatter(projection: &Projection2D, label_names: &[String]) -> String {
    let mut s = header("t-SNE of [CLS] states");
    let xs = projection.coords.iter().map(|c| c[0]);
    let ys = projection.coords.iter().map(|c| c[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let plot_w = WIDTH - 2.0 * MARGIN - 140.0;
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0).max(1e-12) * plot_w;
    let sy = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN);
    let n_labels = label_names
        .len()
        .max(projection.labels.iter().map(|l| l + 1).max().unwrap_or(1));
    for (c, &l) in projection.coords.iter().zip(&projection.labels) {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            sx(c[0]),
            sy(c[1]),
            color(l, n_labels)
        );
    }
    for (i, name) in label_names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 120.0;
        let _ = writeln!(
            s,
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            color(i, n_labels),
            x + 8.0,
            y + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Strip plot of certainty for correct and incorrect predictions. Horizontal
/// jitter is a deterministic function of the record index.
pub fn certainty_strips(records: &[CertaintyRecord]) -> String {
    let mut s = header("Monte Carlo dropout certainty");
    let sy = |v: f64| HEIGHT - MARGIN - v * (HEIGHT - 2.0 * MARGIN);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
        sy(0.0),
        sy(1.0)
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{tick:.2}</text>",
            MARGIN - 4.0,
            sy(tick) + 3.0
        );
    }
    let centers = [(true, WIDTH * 0.35, "correct"), (false, WIDTH * 0.7, "incorrect")];
    for (flag, cx, name) in centers {
        let group: Vec<&CertaintyRecord> = records.iter().filter(|r| r.correct == flag).collect();
        let _ = writeln!(
            s,
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{name} (n={})</text>",
            HEIGHT - MARGIN + 20.0,
            group.len()
        );
        let fill = if flag { "hsl(210,65%,45%)" } else { "hsl(10,70%,50%)" };
        for (i, r) in group.iter().enumerate() {
            let jitter = ((i as f64 * 0.618_033_988_75).fract() - 0.5) * 80.0;
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{fill}\" fill-opacity=\"0.7\"/>",
                cx + jitter,
                sy(r.certainty)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

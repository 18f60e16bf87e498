//! Minimal self-contained SVG emission for ROC curves and bar charts.
//! No external assets; fixed-precision coordinates keep output
//! byte-deterministic.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_TOP: f64 = 50.0;
const MARGIN_BOTTOM: f64 = 55.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn plot_width() -> f64 {
    WIDTH - MARGIN_LEFT - MARGIN_RIGHT
}

fn plot_height() -> f64 {
    HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" ",
            "text-anchor=\"middle\">{title}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = MARGIN_LEFT + plot_width() / 2.0,
        title = title,
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN_LEFT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let x1 = MARGIN_LEFT + plot_width();
    let y1 = MARGIN_TOP;
    let mut out = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let x = x0 + frac * plot_width();
        let y = y0 - frac * plot_height();
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{}</text>\n",
            fmt(x),
            fmt(y0 + 16.0),
            fmt(frac)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"end\">{}</text>\n",
            fmt(x0 - 6.0),
            fmt(y + 3.0),
            fmt(frac)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">{x_label}</text>\n",
        fmt(x0 + plot_width() / 2.0),
        fmt(HEIGHT - 14.0),
    ));
    out.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        fmt(MARGIN_TOP + plot_height() / 2.0),
        fmt(MARGIN_TOP + plot_height() / 2.0),
    ));
    out
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    (
        MARGIN_LEFT + x.clamp(0.0, 1.0) * plot_width(),
        HEIGHT - MARGIN_BOTTOM - y.clamp(0.0, 1.0) * plot_height(),
    )
}

/// Line chart over the unit square (e.g. ROC: x = FPR, y = TPR), with a
/// chance diagonal and a legend.
pub fn unit_line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = header(title);
    out.push_str(&axes(x_label, y_label));
    let (dx0, dy0) = to_px(0.0, 0.0);
    let (dx1, dy1) = to_px(1.0, 1.0);
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999999\" \
         stroke-dasharray=\"4 4\"/>\n",
        fmt(dx0),
        fmt(dy0),
        fmt(dx1),
        fmt(dy1)
    ));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{},{}", fmt(px), fmt(py))
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        let ly = MARGIN_TOP + 14.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            fmt(WIDTH - MARGIN_RIGHT + 10.0),
            fmt(ly)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{name}</text>\n",
            fmt(WIDTH - MARGIN_RIGHT + 24.0),
            fmt(ly + 9.0)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one cluster per group, one bar per series member,
/// values in [0, 1].
pub fn grouped_bar_chart(
    title: &str,
    y_label: &str,
    series: &[String],
    groups: &[(String, Vec<f64>)],
) -> String {
    let mut out = header(title);
    out.push_str(&axes("", y_label));
    let n_groups = groups.len().max(1);
    let n_series = series.len().max(1);
    let group_w = plot_width() / n_groups as f64;
    let bar_w = (group_w * 0.8) / n_series as f64;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let gx = MARGIN_LEFT + gi as f64 * group_w;
        for (si, &v) in values.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let x = gx + group_w * 0.1 + si as f64 * bar_w;
            let h = v.clamp(0.0, 1.0) * plot_height();
            let y = HEIGHT - MARGIN_BOTTOM - h;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>\n",
                fmt(x),
                fmt(y),
                fmt(bar_w.max(1.0)),
                fmt(h)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" \
             text-anchor=\"middle\">{label}</text>\n",
            fmt(gx + group_w / 2.0),
            fmt(HEIGHT - MARGIN_BOTTOM + 30.0)
        ));
    }
    for (si, name) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = MARGIN_TOP + 14.0 * si as f64;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            fmt(WIDTH - MARGIN_RIGHT + 10.0),
            fmt(ly)
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{name}</text>\n",
            fmt(WIDTH - MARGIN_RIGHT + 24.0),
            fmt(ly + 9.0)
        ));
    }
    out.push_str("</svg>\n");
    out
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal grouped bar charts written as SVG text.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One bar per (category, series) with its value printed above or below it.
///
/// Non-finite values are drawn as zero-height bars labelled `n/a`.
#[must_use]
pub fn grouped_bar_chart(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let y_of = |v: f64| MARGIN_TOP + (hi - v) / span * plot_h;
    let zero_y = y_of(0.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN_LEFT:.1}" y1="{zero_y:.2}" x2="{:.1}" y2="{zero_y:.2}" stroke="#333333"/>"##,
        WIDTH - MARGIN_RIGHT
    );
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN_LEFT:.1}" y1="{MARGIN_TOP:.1}" x2="{MARGIN_LEFT:.1}" y2="{:.1}" stroke="#333333"/>"##,
        HEIGHT - MARGIN_BOTTOM
    );
    for v in [lo, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            MARGIN_LEFT - 4.0,
            y_of(v) + 4.0
        );
    }

    let n_cat = categories.len().max(1) as f64;
    let group_w = plot_w / n_cat;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = MARGIN_LEFT + ci as f64 * group_w + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(f64::NAN);
            let x = gx + si as f64 * bar_w;
            let (top, h, label) = if v.is_finite() {
                let y = y_of(v);
                (y.min(zero_y), (y - zero_y).abs(), format!("{v:.3}"))
            } else {
                (zero_y, 0.0, "n/a".to_string())
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
                bar_w * 0.95,
                PALETTE[si % PALETTE.len()]
            );
            let ly = if v.is_finite() && v < 0.0 { top + h + 12.0 } else { top - 3.0 };
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{ly:.2}" text-anchor="middle">{label}</text>"#,
                x + bar_w * 0.475
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            escape(cat)
        );
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let lx = MARGIN_LEFT + si as f64 * 150.0;
        let ly = HEIGHT - 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#,
            ly - 9.0,
            PALETTE[si % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 14.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

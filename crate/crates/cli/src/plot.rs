//! Histogram images for corpus statistics, written as standalone SVG.

use std::fmt::Write as _;

use xsum::dataset::{CorpusStats, Histogram};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// The four corpus histograms with their file stem, title and x label.
pub fn panels(stats: &CorpusStats) -> [(&'static str, &'static str, &'static str, &Histogram); 4] {
    [
        ("video_length", "Video length", "seconds", &stats.video_length_histogram),
        ("compression_ratio", "Compression ratio", "summary frames / video frames", &stats.ratio_histogram),
        ("text_length", "Text summary length", "words", &stats.text_length_histogram),
        ("span_center", "Summary span position", "span centre / video length", &stats.span_center_histogram),
    ]
}

fn label(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

pub fn histogram_svg(hist: &Histogram, title: &str, x_label: &str) -> String {
    let bins = hist.counts.len().max(1);
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{title}</text>"#, WIDTH / 2.0);
    for (i, &c) in hist.counts.iter().enumerate() {
        let h = c as f64 / peak * plot_h;
        let x = MARGIN + i as f64 * bar_w;
        let y = HEIGHT - MARGIN - h;
        let (lo, hi) = hist.edges(i);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="#4a7ab5" stroke="white"><title>[{}, {}): {c}</title></rect>"##,
            bar_w,
            label(lo),
            label(hi)
        );
    }
    let base = HEIGHT - MARGIN;
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, WIDTH - MARGIN);
    let _ = writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#);
    let step = (bins / 5).max(1);
    for i in (0..=bins).step_by(step) {
        let x = MARGIN + i as f64 * bar_w;
        let edge = hist.lo + i as f64 * hist.bin_width;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, base + 16.0, label(edge));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 6.0, MARGIN + 4.0, peak as usize);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, MARGIN - 6.0, base + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 14.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bar_per_bin() {
        let mut h = Histogram::new(0.0, 1.0, 4);
        for x in [0.5, 1.5, 1.7, 3.2] {
            h.add(x);
        }
        let svg = histogram_svg(&h, "t", "x");
        assert_eq!(svg.matches("<title>").count(), 4);
        assert!(svg.contains("[1, 2): 2"));
        assert!(svg.ends_with("</svg>\n"));
    }
}

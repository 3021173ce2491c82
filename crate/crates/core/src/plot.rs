//! Minimal SVG charts: histograms, mean ± 1 std bands and line plots.

use std::fmt::Write;
use std::path::Path;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("no finite data to plot")]
    NoData,
    #[error("column {0} not found")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad number {0:?}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, PlotError>;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let (x0, x1) = range(xs)?;
        let (y0, y1) = range(ys)?;
        Ok(Self { x0, x1, y0, y1 })
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn range(v: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in v.filter(|x| x.is_finite()) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() {
        return Err(PlotError::NoData);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let d = 0.5 * (1.0 + lo.abs()) * 1e-3;
        return Ok((lo - d, hi + d));
    }
    Ok((lo, hi))
}

fn header(title: &str, note: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    if !note.is_empty() {
        let _ = writeln!(s, "<!-- {} -->", note.replace("--", "- -"));
    }
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{} H{} M{PAD},{} V{PAD}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    for (v, anchor, x) in [(f.x0, "start", PAD), (f.x1, "end", W - PAD)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{}</text>"#, H - PAD + 14.0, fmt_num(v));
    }
    for (v, y) in [(f.y0, H - PAD), (f.y1, PAD)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, y + 4.0, fmt_num(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.3e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Histogram with `bins` equal-width bins.
pub fn histogram_svg(title: &str, values: &[f64], bins: usize, note: &str) -> Result<String> {
    let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = range(vals.iter().copied())?;
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for v in &vals {
        let k = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let f = Frame {
        x0: lo,
        x1: hi,
        y0: 0.0,
        y1: top.max(1.0),
    };
    let mut s = header(title, note);
    let bw = (hi - lo) / bins as f64;
    for (k, c) in counts.iter().enumerate() {
        let xa = f.px(lo + k as f64 * bw);
        let xb = f.px(lo + (k + 1) as f64 * bw);
        let y = f.py(*c as f64);
        let _ = writeln!(
            s,
            r##"<rect x="{xa:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#4c78a8" stroke="white" stroke-width="0.5"/>"##,
            (xb - xa).max(0.0),
            (H - PAD - y).max(0.0)
        );
    }
    axes(&mut s, &f, title, "count");
    s.push_str("</svg>\n");
    Ok(s)
}

/// Mean curve with a shaded ± 1 std band.
pub fn band_svg(title: &str, x: &[f64], mean: &[f64], std: &[f64], xlabel: &str, ylabel: &str, note: &str) -> Result<String> {
    let n = x.len().min(mean.len()).min(std.len());
    if n == 0 {
        return Err(PlotError::NoData);
    }
    let lo: Vec<f64> = (0..n).map(|i| mean[i] - std[i]).collect();
    let hi: Vec<f64> = (0..n).map(|i| mean[i] + std[i]).collect();
    let f = Frame::new(x[..n].iter().copied(), lo.iter().chain(&hi).copied())?;
    let mut s = header(title, note);
    let mut d = String::new();
    for i in 0..n {
        let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, f.px(x[i]), f.py(hi[i]));
    }
    for i in (0..n).rev() {
        let _ = write!(d, "L{:.2},{:.2} ", f.px(x[i]), f.py(lo[i]));
    }
    let _ = writeln!(s, r##"<path d="{d}Z" fill="#4c78a8" fill-opacity="0.3" stroke="none"/>"##);
    let _ = writeln!(s, r##"<path d="{}" fill="none" stroke="#1f3b73" stroke-width="1.5"/>"##, polyline(&f, &x[..n], &mean[..n]));
    axes(&mut s, &f, xlabel, ylabel);
    s.push_str("</svg>\n");
    Ok(s)
}

fn polyline(f: &Frame, x: &[f64], y: &[f64]) -> String {
    let mut d = String::new();
    let mut pen = false;
    for (a, b) in x.iter().zip(y) {
        if !(a.is_finite() && b.is_finite()) {
            pen = false;
            continue;
        }
        let _ = write!(d, "{}{:.2},{:.2} ", if pen { "L" } else { "M" }, f.px(*a), f.py(*b));
        pen = true;
    }
    d
}

const PALETTE: [&str; 6] = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2"];

/// Several named series against a shared x; `log_y` plots log10 of positive values.
pub fn lines_svg(title: &str, x: &[f64], series: &[(String, Vec<f64>)], xlabel: &str, ylabel: &str, log_y: bool, note: &str) -> Result<String> {
    let tr = |v: f64| if log_y { if v > 0.0 { v.log10() } else { f64::NAN } } else { v };
    let ys: Vec<Vec<f64>> = series.iter().map(|(_, v)| v.iter().map(|&y| tr(y)).collect()).collect();
    let f = Frame::new(x.iter().copied(), ys.iter().flatten().copied())?;
    let mut s = header(title, note);
    for (k, ((name, _), y)) in series.iter().zip(&ys).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#, polyline(&f, x, y));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            W - PAD,
            PAD + 14.0 * k as f64,
            escape(name)
        );
    }
    axes(&mut s, &f, xlabel, if log_y { format!("log10 {ylabel}") } else { ylabel.to_string() }.as_str());
    s.push_str("</svg>\n");
    Ok(s)
}

/// Reads a CSV (skipping `#` lines) into its header and numeric columns.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (c, v) in cols.iter_mut().zip(rec.iter()) {
            let v = v.trim();
            c.push(if v.is_empty() {
                f64::NAN
            } else {
                v.parse().map_err(|_| PlotError::Parse(v.to_string()))?
            });
        }
    }
    Ok((names, cols))
}

pub fn column<'a>(names: &[String], cols: &'a [Vec<f64>], name: &str) -> Result<&'a [f64]> {
    names
        .iter()
        .position(|n| n == name)
        .map(|i| cols[i].as_slice())
        .ok_or_else(|| PlotError::MissingColumn(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_has_one_rect_per_bin() {
        let s = histogram_svg("x", &[1.0, 2.0, 2.5, 3.0], 5, "seed=1").unwrap();
        assert_eq!(s.matches("<rect x=").count(), 5);
        assert!(s.contains("<!-- seed=1 -->"));
        assert!(histogram_svg("x", &[f64::NAN], 5, "").is_err());
    }

    #[test]
    fn band_and_lines_render() {
        let x = [0.0, 1.0, 2.0];
        assert!(band_svg("b", &x, &[1.0, 2.0, 1.0], &[0.1, 0.2, 0.1], "t", "p", "").unwrap().contains("fill-opacity"));
        let s = lines_svg("l", &x, &[("a".into(), vec![1.0, 0.1, 0.01])], "epoch", "loss", true, "").unwrap();
        assert!(s.contains("log10 loss"));
    }
}

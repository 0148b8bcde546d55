//! Static plot artifacts: ROC curve, precision-recall curve and score
//! histograms per class, each as an SVG file with the CSV it was drawn from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::eval::ranking;
use crate::scoring::ScoredSample;
use crate::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// (false positive rate, true positive rate), one point per distinct score.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y).count().max(1) as f64;
    let n_neg = labels.iter().filter(|&&y| !y).count().max(1) as f64;
    let order = ranking(scores);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (r, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_group = order.get(r + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            pts.push((fp / n_neg, tp / n_pos));
        }
    }
    pts
}

/// (recall, precision) after each rank of the ranking used for APR.
pub fn pr_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y).count().max(1) as f64;
    let mut tp = 0.0;
    ranking(scores)
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            if labels[i] {
                tp += 1.0;
            }
            (tp / n_pos, tp / (r + 1) as f64)
        })
        .collect()
}

/// Counts in `bins` equal-width bins spanning [lo, hi]; the top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        counts[b.clamp(0, bins as isize - 1) as usize] += 1;
    }
    counts
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0).max(f64::EPSILON) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0).max(f64::EPSILON) * (H - 2.0 * MARGIN)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
        let (x0, x1, y0, y1) = (self.px(self.x.0), self.px(self.x.1), self.py(self.y.0), self.py(self.y.1));
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
        for t in 0..=4 {
            let f = t as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, self.px(xv), y0 + 14.0, tick(xv));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, self.py(yv) + 4.0, tick(yv));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xlabel));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        s
    }

    fn polyline(&self, pts: &[(f64, f64)], color: &str) -> String {
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" ")) + "\n"
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, entries: &[(String, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN + 6.0 + 14.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn curve_csv(header: &str, pts: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in pts {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// Writes roc.svg/csv, pr.svg/csv and hist.svg/csv into `dir`.
pub fn write_plots(dir: &Path, rows: &[ScoredSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scores: Vec<f64> = rows.iter().map(|r| r.s).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.y > 0.0).collect();
    let unit = Frame { x: (0.0, 1.0), y: (0.0, 1.0) };

    let roc = roc_points(&scores, &labels);
    let mut svg = unit.open("ROC", "false positive rate", "true positive rate");
    svg += r##"<line x1="48" y1="312" x2="432" y2="48" stroke="#bbbbbb" stroke-dasharray="4 3"/>"##;
    svg += "\n";
    svg += &unit.polyline(&roc, PALETTE[0]);
    svg += "</svg>\n";
    write(&dir.join("roc.svg"), &svg)?;
    write(&dir.join("roc.csv"), &curve_csv("fpr,tpr", &roc))?;

    let pr = pr_points(&scores, &labels);
    let mut svg = unit.open("Precision-recall", "recall", "precision");
    svg += &unit.polyline(&pr, PALETTE[0]);
    svg += "</svg>\n";
    write(&dir.join("pr.svg"), &svg)?;
    write(&dir.join("pr.csv"), &curve_csv("recall,precision", &pr))?;

    let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_class.entry(r.class_tag.as_str()).or_default().push(r.s);
    }
    let bins = 30;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let width = (hi - lo) / bins as f64;
    let hists: Vec<(&str, Vec<f64>)> = by_class
        .iter()
        .map(|(c, v)| {
            let n = v.len() as f64;
            (*c, histogram(v, bins, lo, hi).into_iter().map(|k| k as f64 / n).collect())
        })
        .collect();
    let ymax = hists.iter().flat_map(|(_, h)| h.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let frame = Frame { x: (lo, hi), y: (0.0, ymax) };
    let mut svg = frame.open("Score histogram by class", "score", "fraction of class");
    let mut entries = Vec::new();
    let mut csv = String::from("class_tag,bin_lo,bin_hi,fraction\n");
    for (ci, (class, h)) in hists.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut pts = Vec::with_capacity(2 * bins + 2);
        pts.push((lo, 0.0));
        for (b, &f) in h.iter().enumerate() {
            let (a, z) = (lo + b as f64 * width, lo + (b + 1) as f64 * width);
            pts.push((a, f));
            pts.push((z, f));
            let _ = writeln!(csv, "{class},{a},{z},{f}");
        }
        pts.push((hi, 0.0));
        svg += &frame.polyline(&pts, color);
        entries.push((class.to_string(), color));
    }
    legend(&mut svg, &entries);
    svg += "</svg>\n";
    write(&dir.join("hist.svg"), &svg)?;
    write(&dir.join("hist.csv"), &csv)
}

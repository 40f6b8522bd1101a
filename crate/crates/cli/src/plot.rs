//! Minimal SVG line and bar charts for the CSV outputs.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Subcommand)]
pub enum PlotKind {
    /// One polyline per y column.
    Line {
        #[arg(long)]
        csv: PathBuf,
        /// x column; the row index if omitted.
        #[arg(long)]
        x: Option<String>,
        #[arg(long, num_args = 1.., required = true)]
        y: Vec<String>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean of a value column grouped by a label column.
    Bar {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long)]
        value: String,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(kind: PlotKind) -> Result<()> {
    let (svg, out) = match kind {
        PlotKind::Line { csv, x, y, title, out } => {
            let table = Table::read(&csv)?;
            let title = title.unwrap_or_else(|| file_title(&csv));
            (line_chart(&table, x.as_deref(), &y, &title)?, out)
        }
        PlotKind::Bar { csv, label, value, title, out } => {
            let table = Table::read(&csv)?;
            let title = title.unwrap_or_else(|| file_title(&csv));
            (bar_chart(&table, &label, &value, &title)?, out)
        }
    };
    std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn file_title(p: &Path) -> String {
    p.file_name().and_then(|s| s.to_str()).unwrap_or("plot").to_string()
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let header = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        match self.header.iter().position(|h| h == name) {
            Some(i) => Ok(i),
            None => bail!("no column `{name}` (have: {})", self.header.join(", ")),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn frame(s: &mut String, title: &str, ylo: f64, yhi: f64) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(s, r#"<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let v = ylo + f * (yhi - ylo);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y}" x2="{x0}" y2="{y}" stroke="black"/><line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, tick(v));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Rows whose selected cells do not parse as numbers are skipped.
pub fn line_chart(t: &Table, x: Option<&str>, ys: &[String], title: &str) -> Result<String> {
    let xi = x.map(|c| t.column(c)).transpose()?;
    let yis = ys.iter().map(|c| t.column(c)).collect::<Result<Vec<_>>>()?;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); ys.len()];
    for (r, row) in t.rows.iter().enumerate() {
        let xv = match xi {
            Some(i) => match row.get(i).and_then(|c| c.parse::<f64>().ok()) {
                Some(v) => v,
                None => continue,
            },
            None => r as f64,
        };
        for (k, &yi) in yis.iter().enumerate() {
            if let Some(v) = row.get(yi).and_then(|c| c.parse::<f64>().ok()).filter(|v| v.is_finite()) {
                series[k].push((xv, v));
            }
        }
    }
    if series.iter().all(Vec::is_empty) {
        bail!("no numeric data in the selected columns");
    }
    let (xlo, xhi) = bounds(series.iter().flatten().map(|p| p.0));
    let (ylo, yhi) = bounds(series.iter().flatten().map(|p| p.1));
    let mut s = String::new();
    frame(&mut s, title, ylo, yhi);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let px = |v: f64| x0 + (v - xlo) / (xhi - xlo) * (x1 - x0);
    let py = |v: f64| y0 - (v - ylo) / (yhi - ylo) * (y0 - y1);
    for i in 0..=4 {
        let v = xlo + i as f64 / 4.0 * (xhi - xlo);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(v), y0 + 16.0, tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x.unwrap_or("row")));
    for (k, pts) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
        let ly = y1 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x1 - 150.0,
            x1 - 130.0,
            x1 - 126.0,
            ly + 4.0,
            escape(&ys[k])
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bars in order of first appearance of each label.
pub fn bar_chart(t: &Table, label: &str, value: &str, title: &str) -> Result<String> {
    let li = t.column(label)?;
    let vi = t.column(value)?;
    let mut groups: Vec<(String, f64, usize)> = Vec::new();
    for row in &t.rows {
        let (Some(l), Some(v)) = (row.get(li), row.get(vi).and_then(|c| c.parse::<f64>().ok())) else { continue };
        match groups.iter_mut().find(|g| &g.0 == l) {
            Some(g) => {
                g.1 += v;
                g.2 += 1;
            }
            None => groups.push((l.clone(), v, 1)),
        }
    }
    if groups.is_empty() {
        bail!("no numeric data in column `{value}`");
    }
    let means: Vec<(String, f64)> = groups.into_iter().map(|(l, sum, n)| (l, sum / n as f64)).collect();
    let (lo, hi) = bounds(means.iter().map(|m| m.1).chain(std::iter::once(0.0)));
    let mut s = String::new();
    frame(&mut s, title, lo, hi);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
    let py = |v: f64| y0 - (v - lo) / (hi - lo) * (y0 - y1);
    let slot = (x1 - x0) / means.len() as f64;
    for (k, (l, v)) in means.iter().enumerate() {
        let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
        let x = x0 + slot * (k as f64 + 0.15);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.7,
            (bottom - top).max(0.5),
            PALETTE[k % PALETTE.len()]
        );
        let cx = x0 + slot * (k as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, escape(l));
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, top - 4.0, tick(*v));
    }
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#, HEIGHT / 2.0, HEIGHT / 2.0, escape(value));
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> Table {
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').map(String::from).collect();
        let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        Table { header, rows }
    }

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let t = table("it,a,b\n1,0.5,2\n2,0.7,1\n3,nan,0\n");
        let svg = line_chart(&t, Some("it"), &["a".into(), "b".into()], "x<y").unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("stroke-width=\"1.5\"").count(), 2);
        assert!(svg.contains("x&lt;y"));
    }

    #[test]
    fn bar_chart_averages_groups() {
        let t = table("mode,v\nblind,1\nblind,3\nperceptive,1\n");
        let svg = bar_chart(&t, "mode", "v", "t").unwrap();
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert!(svg.contains(">2.000<"));
    }

    #[test]
    fn unknown_column_is_an_error() {
        let t = table("a\n1\n");
        assert!(line_chart(&t, None, &["b".into()], "t").is_err());
        assert!(bar_chart(&t, "a", "b", "t").is_err());
    }
}

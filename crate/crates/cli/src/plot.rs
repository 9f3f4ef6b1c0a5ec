//! Minimal SVG line plots of episode and training-log CSVs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 44.0;

struct Series {
    label: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: &'static str,
    x_label: &'static str,
    y_label: &'static str,
    series: Vec<Series>,
    equal_aspect: bool,
    log_y: bool,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let headers = r.headers()?.iter().map(str::to_string).collect();
        let rows = r.records().collect::<std::result::Result<_, _>>()?;
        Ok(Table { headers, rows })
    }

    fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column `{name}`"))?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().with_context(|| format!("bad number `{}` in `{name}`", &r[i])))
            .collect()
    }

    fn text(&self, name: &str) -> Result<Vec<String>> {
        let i = self
            .headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column `{name}`"))?;
        Ok(self.rows.iter().map(|r| r[i].to_string()).collect())
    }
}

/// Renders `input` (episode or training log) to `output`.
pub fn plot_file(input: &Path, output: &Path) -> Result<()> {
    let t = Table::read(input)?;
    let panels = if t.has("target_x") {
        episode_panels(&t)?
    } else if t.has("train_loss") {
        training_panels(&t)?
    } else {
        bail!("{}: not an episode or training log", input.display());
    };
    std::fs::write(output, render(&panels)).with_context(|| format!("writing {}", output.display()))
}

fn zip(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    a.iter().copied().zip(b.iter().copied()).collect()
}

fn episode_panels(t: &Table) -> Result<Vec<Panel>> {
    let track: Vec<bool> = t.text("phase")?.iter().map(|p| p == "track").collect();
    let pick = |name: &str| -> Result<Vec<f64>> {
        Ok(t.column(name)?.into_iter().zip(&track).filter(|(_, &k)| k).map(|(v, _)| v).collect())
    };
    let (tx, ty, tz) = (pick("target_x")?, pick("target_y")?, pick("target_z")?);
    let (hx, hy, hz) = (pick("ee_x")?, pick("ee_y")?, pick("ee_z")?);
    // The curve lies in a vertical plane: its horizontal axis is the
    // principal direction of the target's horizontal spread.
    let n = tx.len().max(1) as f64;
    let (mx, my) = (tx.iter().sum::<f64>() / n, ty.iter().sum::<f64>() / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in tx.iter().zip(&ty) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (c, s) = (angle.cos(), angle.sin());
    let along = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(x, y)| (x - mx) * c + (y - my) * s).collect() };

    let steps = t.column("step")?;
    let error_mm: Vec<f64> = t.column("error_m")?.iter().map(|e| e * 1e3).collect();
    Ok(vec![
        Panel {
            title: "Drawing plane",
            x_label: "lateral (m)",
            y_label: "height (m)",
            series: vec![
                Series {
                    label: "target",
                    color: "#888888",
                    points: zip(&along(&tx, &ty), &tz),
                },
                Series {
                    label: "hand",
                    color: "#1f5fbf",
                    points: zip(&along(&hx, &hy), &hz),
                },
            ],
            equal_aspect: true,
            log_y: false,
        },
        Panel {
            title: "Base path",
            x_label: "x (m)",
            y_label: "y (m)",
            series: vec![
                Series {
                    label: "base",
                    color: "#bf5f1f",
                    points: zip(&t.column("base_x")?, &t.column("base_y")?),
                },
                Series {
                    label: "target",
                    color: "#888888",
                    points: zip(&tx, &ty),
                },
            ],
            equal_aspect: true,
            log_y: false,
        },
        Panel {
            title: "Tracking error",
            x_label: "step",
            y_label: "error (mm)",
            series: vec![Series {
                label: "error",
                color: "#bf1f3f",
                points: zip(&steps, &error_mm),
            }],
            equal_aspect: false,
            log_y: false,
        },
    ])
}

fn training_panels(t: &Table) -> Result<Vec<Panel>> {
    let epoch = t.column("epoch")?;
    Ok(vec![Panel {
        title: "Training loss",
        x_label: "epoch",
        y_label: "loss (log)",
        series: vec![
            Series {
                label: "train",
                color: "#1f5fbf",
                points: zip(&epoch, &t.column("train_loss")?),
            },
            Series {
                label: "validation",
                color: "#bf5f1f",
                points: zip(&epoch, &t.column("validation_loss")?),
            },
        ],
        equal_aspect: false,
        log_y: true,
    }])
}

fn bounds(p: &Panel) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in &p.series {
        for &(x, y) in &s.points {
            b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let d = (hi - lo).max(1e-9) * 0.05;
        (lo - d, hi + d)
    };
    let (x0, x1) = pad(b.0, b.1);
    let (y0, y1) = pad(b.2, b.3);
    (x0, x1, y0, y1)
}

fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{PANEL_H}" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        render_panel(&mut out, p, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

fn render_panel(out: &mut String, p: &Panel, left: f64) {
    let ty = |y: f64| if p.log_y { y.max(1e-12).log10() } else { y };
    let transformed: Vec<Vec<(f64, f64)>> = p
        .series
        .iter()
        .map(|s| s.points.iter().map(|&(x, y)| (x, ty(y))).collect())
        .collect();
    let scaled = Panel {
        title: p.title,
        x_label: p.x_label,
        y_label: p.y_label,
        series: transformed
            .iter()
            .map(|pts| Series {
                label: "",
                color: "",
                points: pts.clone(),
            })
            .collect(),
        equal_aspect: p.equal_aspect,
        log_y: false,
    };
    let (mut x0, mut x1, mut y0, mut y1) = bounds(&scaled);
    let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    if p.equal_aspect {
        let scale = ((x1 - x0) / pw).max((y1 - y0) / ph);
        let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
        (x0, x1) = (cx - 0.5 * scale * pw, cx + 0.5 * scale * pw);
        (y0, y1) = (cy - 0.5 * scale * ph, cy + 0.5 * scale * ph);
    }
    let sx = |x: f64| left + MARGIN + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * ph;

    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
        left + MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        left + PANEL_W / 2.0,
        MARGIN - 16.0,
        p.title
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + PANEL_W / 2.0,
        PANEL_H - 8.0,
        p.x_label
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate({:.1},{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        left + 12.0,
        PANEL_H / 2.0,
        p.y_label
    );
    let fmt_y = |y: f64| if p.log_y { format!("{:.3}", 10f64.powf(y)) } else { format!("{y:.3}") };
    for (v, anchor, x, y) in [
        (format!("{x0:.3}"), "start", sx(x0), PANEL_H - MARGIN + 14.0),
        (format!("{x1:.3}"), "end", sx(x1), PANEL_H - MARGIN + 14.0),
    ] {
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v}</text>"#);
    }
    for (v, y) in [(fmt_y(y0), sy(y0)), (fmt_y(y1), sy(y1) + 10.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="start" font-size="9">{v}</text>"#,
            left + MARGIN + 2.0
        );
    }
    for (k, (s, pts)) in p.series.iter().zip(&transformed).enumerate() {
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if j == 0 { "" } else { " " }, sx(x), sy(y));
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{d}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            s.color
        );
        let ly = MARGIN + 14.0 + 14.0 * k as f64;
        let lx = left + PANEL_W - MARGIN - 70.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 4.0,
            lx + 14.0,
            ly - 4.0,
            s.color,
            lx + 18.0,
            s.label
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_log_renders_two_polylines() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("log.csv");
        std::fs::write(&input, "epoch,train_loss,validation_loss\n1,2.0,2.5\n2,1.0,1.5\n3,0.5,0.9\n").unwrap();
        let output = dir.path().join("log.svg");
        plot_file(&input, &output).unwrap();
        let svg = std::fs::read_to_string(output).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn unknown_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("x.csv");
        std::fs::write(&input, "a,b\n1,2\n").unwrap();
        assert!(plot_file(&input, &dir.path().join("x.svg")).is_err());
    }
}

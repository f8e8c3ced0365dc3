//! CSV tables and small hand-drawn SVG charts for run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dimension;
use crate::error::{Error, Result};
use crate::eval::{ActivationMatrix, F1Summary};

/// One point of a sweep: the swept value and the test scores at it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub seed: u64,
    pub scores: F1Summary,
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub fn activation_csv(m: &ActivationMatrix) -> Result<String> {
    if m.rows.nrows() == 0 {
        return Err(Error::Invalid("activation matrix has no experts".into()));
    }
    let mut out = String::from("expert");
    for d in Dimension::ALL {
        write!(out, ",{}", d.name()).expect("writing to a String");
    }
    out.push('\n');
    for (e, row) in m.rows.rows().into_iter().enumerate() {
        out.push_str(&e.to_string());
        for v in row {
            write!(out, ",{}", num(*v)).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-point rows, one per (x, seed), in input order.
pub fn sweep_csv(x_name: &str, points: &[SweepPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Invalid("empty sweep report".into()));
    }
    let mut out = format!("{x_name},seed,IE,SN,TF,PJ,avg\n");
    for p in points {
        let s = p.scores;
        writeln!(out, "{},{},{},{},{},{},{}", num(p.x), p.seed, num(s.ie), num(s.sn), num(s.tf), num(s.pj), num(s.avg))
            .expect("writing to a String");
    }
    Ok(out)
}

/// Mean average macro-F1 per distinct x, sorted by x.
pub fn sweep_means(points: &[SweepPoint]) -> Vec<(f64, f64)> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.into_iter()
        .map(|x| {
            let v: Vec<f64> = points.iter().filter(|p| p.x == x).map(|p| p.scores.avg).collect();
            (x, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

pub fn sweep_summary_csv(x_name: &str, points: &[SweepPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Invalid("empty sweep report".into()));
    }
    let mut out = format!("{x_name},avg\n");
    for (x, y) in sweep_means(points) {
        writeln!(out, "{},{}", num(x), num(y)).expect("writing to a String");
    }
    Ok(out)
}

/// Grey-scale heatmap, experts as rows and dimensions as columns.
pub fn activation_svg(m: &ActivationMatrix) -> Result<String> {
    let k = m.rows.nrows();
    if k == 0 {
        return Err(Error::Invalid("activation matrix has no experts".into()));
    }
    let (cell_w, cell_h, left, top) = (60.0, 16.0, 50.0, 30.0);
    let w = left + cell_w * 4.0 + 10.0;
    let h = top + cell_h * k as f64 + 10.0;
    let max = m.rows.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    s.push('\n');
    for (j, d) in Dimension::ALL.iter().enumerate() {
        let x = left + cell_w * (j as f64 + 0.5);
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, d.name()).expect("writing to a String");
    }
    for (e, row) in m.rows.rows().into_iter().enumerate() {
        let y = top + cell_h * e as f64;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{e}</text>"#, left - 6.0, y + cell_h - 4.0).expect("writing to a String");
        for (j, v) in row.iter().enumerate() {
            let shade = 255 - (255.0 * v / max).round() as i64;
            let x = left + cell_w * j as f64;
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="rgb({shade},{shade},{shade})"><title>{}</title></rect>"#, num(*v))
                .expect("writing to a String");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Line chart of mean average macro-F1 against the swept value.
pub fn sweep_svg(x_name: &str, points: &[SweepPoint]) -> Result<String> {
    let means = sweep_means(points);
    if means.is_empty() {
        return Err(Error::Invalid("empty sweep report".into()));
    }
    let (w, h, pad) = (400.0, 260.0, 40.0);
    let (x0, x1) = (means[0].0, means[means.len() - 1].0);
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| pad + (w - 2.0 * pad) * (x - x0) / span;
    let py = |y: f64| h - pad - (h - 2.0 * pad) * y.clamp(0.0, 1.0);
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    s.push('\n');
    writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .expect("writing to a String");
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_name}</text>"#, w / 2.0, h - 8.0).expect("writing to a String");
    let path: Vec<String> = means.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    writeln!(s, r#"<polyline fill="none" stroke="black" points="{}"/>"#, path.join(" ")).expect("writing to a String");
    for (x, y) in &means {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3"><title>{}: {}</title></circle>"#, px(*x), py(*y), num(*x), num(*y)).expect("writing to a String");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

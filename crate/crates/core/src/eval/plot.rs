use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::inversion::{Part, QuantileBounds};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 44.0;

const TRUE_OBS: &str = "#1f77b4";
const TRUE_TAR: &str = "#2ca02c";
const RECON_OBS: &str = "#ff7f0e";
const RECON_TAR: &str = "#d62728";
const BAND: &str = "#7f7f7f";

/// One reconstruction paired with its ground truth, ready for plotting.
#[derive(Clone, Debug)]
pub struct PlotInput {
    /// File stem; sample index and extension are appended.
    pub name: String,
    pub recon_obs: Tensor,
    pub recon_tar: Tensor,
    pub true_obs: Tensor,
    pub true_tar: Tensor,
    /// `permutation[i]`: reconstruction drawn against true sample `i`.
    pub permutation: Option<Vec<usize>>,
    pub bounds: Option<QuantileBounds>,
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let b = t.shape()[0];
    let w = t.numel() / b.max(1);
    t.data().chunks(w.max(1)).collect()
}

/// Writes `<name>_sample<i>.svg` for every sample; returns the paths in order.
pub fn emit_plots(inputs: &[PlotInput], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        let (to, tt) = (rows(&input.true_obs), rows(&input.true_tar));
        let (ro, rt) = (rows(&input.recon_obs), rows(&input.recon_tar));
        if to.len() != ro.len() || tt.len() != rt.len() || to.len() != tt.len() {
            return Err(Error::shape("emit_plots", format!("{}: batch sizes differ", input.name)));
        }
        for i in 0..to.len() {
            let j = input.permutation.as_ref().map_or(i, |p| p[i]);
            let svg = render(&Sample {
                true_obs: to[i],
                true_tar: tt[i],
                recon_obs: ro[j],
                recon_tar: rt[j],
                bounds: input.bounds.as_ref(),
            });
            let path = out_dir.join(format!("{}_sample{i}.svg", input.name));
            crate::io::ensure_parent(&path)?;
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

struct Sample<'a> {
    true_obs: &'a [f64],
    true_tar: &'a [f64],
    recon_obs: &'a [f64],
    recon_tar: &'a [f64],
    bounds: Option<&'a QuantileBounds>,
}

struct Frame {
    len: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, t: usize) -> f64 {
        MARGIN + (WIDTH - 2.0 * MARGIN) * t as f64 / (self.len.max(2) - 1) as f64
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - self.lo) / (self.hi - self.lo)
    }
}

fn polyline(svg: &mut String, f: &Frame, start: usize, values: &[f64], color: &str, dashed: bool) {
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| format!("{:.2},{:.2}", f.x(start + k), f.y(v)))
        .collect();
    let dash = if dashed { r#" stroke-dasharray="5 3""# } else { "" };
    let _ = writeln!(
        svg,
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
        pts.join(" ")
    );
}

fn band(svg: &mut String, f: &Frame, start: usize, lo: &Tensor, hi: &Tensor, opacity: f64) {
    let upper: Vec<String> = hi.data().iter().enumerate().map(|(k, &v)| format!("{:.2},{:.2}", f.x(start + k), f.y(v))).collect();
    let lower: Vec<String> = lo.data().iter().enumerate().rev().map(|(k, &v)| format!("{:.2},{:.2}", f.x(start + k), f.y(v))).collect();
    let _ = writeln!(
        svg,
        r#"<polygon fill="{BAND}" fill-opacity="{opacity:.2}" stroke="none" points="{} {}"/>"#,
        upper.join(" "),
        lower.join(" ")
    );
}

fn render(s: &Sample) -> String {
    let h = s.true_obs.len();
    let len = h + s.true_tar.len();
    let mut all: Vec<f64> = [s.true_obs, s.true_tar, s.recon_obs, s.recon_tar].concat();
    if let Some(b) = s.bounds {
        all.extend_from_slice(b.obs.data());
        all.extend_from_slice(b.tar.data());
    }
    let finite = all.iter().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let f = Frame {
        len,
        lo: lo - pad,
        hi: hi + pad,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    if let Some(b) = s.bounds {
        let pairs = b.pairs(Part::Obs);
        let n = pairs.len().max(1) as f64;
        for (k, (lo_q, hi_q)) in pairs.iter().enumerate() {
            band(&mut svg, &f, 0, lo_q, hi_q, 0.12 + 0.18 * k as f64 / n);
        }
        for (k, (lo_q, hi_q)) in b.pairs(Part::Tar).iter().enumerate() {
            band(&mut svg, &f, h, lo_q, hi_q, 0.12 + 0.18 * k as f64 / n);
        }
    }

    // Axes, horizon divider and a few y ticks.
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let xd = (f.x(h.saturating_sub(1)) + f.x(h)) / 2.0;
    let _ = writeln!(svg, r##"<line x1="{xd:.2}" y1="{y0}" x2="{xd:.2}" y2="{y1}" stroke="#999" stroke-dasharray="2 2"/>"##);
    for k in 0..=4 {
        let v = f.lo + (f.hi - f.lo) * k as f64 / 4.0;
        let y = f.y(v);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">t</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0);

    polyline(&mut svg, &f, 0, s.true_obs, TRUE_OBS, false);
    polyline(&mut svg, &f, h, s.true_tar, TRUE_TAR, false);
    polyline(&mut svg, &f, 0, s.recon_obs, RECON_OBS, true);
    polyline(&mut svg, &f, h, s.recon_tar, RECON_TAR, true);

    let legend = [
        (TRUE_OBS, "true obs"),
        (TRUE_TAR, "true tar"),
        (RECON_OBS, "recon obs"),
        (RECON_TAR, "recon tar"),
    ];
    for (k, (c, label)) in legend.iter().enumerate() {
        let x = MARGIN + 8.0 + 110.0 * k as f64;
        let _ = writeln!(svg, r#"<line x1="{x}" y1="20" x2="{:.1}" y2="20" stroke="{c}" stroke-width="2"/>"#, x + 18.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="24">{label}</text>"#, x + 22.0);
    }
    svg.push_str("</svg>\n");
    svg
}

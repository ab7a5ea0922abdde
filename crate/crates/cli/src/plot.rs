//! Small static SVG figures: skeleton trajectories, beat alignment and loss curves.

use std::fmt::Write as _;
use std::path::Path;

use baton::data::{JointLayout, PoseSequence, JOINTS};
use baton::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    body: String,
}

impl Frame {
    fn new(title: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let mut body = String::new();
        let _ = writeln!(
            body,
            r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(
            body,
            r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
            W / 2.0,
            PAD / 2.0 + 5.0,
            escape(title)
        );
        Self {
            x: widen(x),
            y: widen(y),
            body,
        }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn polyline(&mut self, pts: impl IntoIterator<Item = (f64, f64)>, color: &str) {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            s.trim_end()
        );
    }

    fn vline(&mut self, x: f64, color: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="{color}"{dash}/>"#,
            PAD,
            H - PAD,
            x = self.px(x)
        );
    }

    fn dot(&mut self, x: f64, y: f64, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
            self.px(x),
            self.py(y)
        );
    }

    fn label(&mut self, row: usize, text: &str, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            PAD + 6.0,
            PAD + 14.0 + 13.0 * row as f64,
            escape(text)
        );
    }

    fn axes(&mut self, x_name: &str, y_name: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{} ({:.3} .. {:.3})</text>"#,
            W / 2.0,
            H - 10.0,
            escape(x_name),
            self.x.0,
            self.x.1
        );
        let _ = writeln!(
            self.body,
            r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">{} ({:.3} .. {:.3})</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_name),
            self.y.0,
            self.y.1
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Wrist and elbow traces in the image plane over the skeleton of the first frame.
pub fn trajectory(motion: &PoseSequence, title: &str) -> String {
    let layout = JointLayout::default();
    let n = motion.n_frames();
    let all = (0..n).flat_map(|i| (0..JOINTS).map(move |j| (i, j)));
    let xs = range(all.clone().map(|(i, j)| motion.joint(i, j)[0] as f64));
    let ys = range(all.map(|(i, j)| motion.joint(i, j)[1] as f64));
    let mut f = Frame::new(title, xs, ys);
    for &(a, b) in &layout.bones {
        let (p, q) = (motion.joint(0, a), motion.joint(0, b));
        f.polyline([(p[0] as f64, p[1] as f64), (q[0] as f64, q[1] as f64)], "#bbb");
    }
    let (le, re) = layout.elbow_indices;
    let (lw, rw) = layout.wrist_indices;
    let traces = [(lw, "#d62728"), (rw, "#1f77b4"), (le, "#ff9896"), (re, "#aec7e8")];
    for (row, (j, color)) in traces.into_iter().enumerate() {
        f.polyline((0..n).map(|i| {
            let p = motion.joint(i, j);
            (p[0] as f64, p[1] as f64)
        }), color);
        f.label(row, &layout.names[j], color);
    }
    f.axes("x", "y");
    f.finish()
}

/// Smoothed kinetic velocity with music beats (dashed) and motion beats (dots).
pub fn beat_alignment(velocity: &[f64], motion_beats: &[usize], music_beats: &[usize], title: &str) -> String {
    let ys = range(velocity.iter().copied());
    let mut f = Frame::new(title, (0.0, velocity.len().saturating_sub(1) as f64), (ys.0.min(0.0), ys.1));
    for &b in music_beats {
        f.vline(b as f64, "#2ca02c", true);
    }
    f.polyline(velocity.iter().enumerate().map(|(i, &v)| (i as f64, v)), "#1f77b4");
    for &b in motion_beats {
        if let Some(&v) = velocity.get(b) {
            f.dot(b as f64, v, "#d62728");
        }
    }
    f.label(0, "kinetic velocity", "#1f77b4");
    f.label(1, "motion beats", "#d62728");
    f.label(2, "music beats", "#2ca02c");
    f.axes("frame", "velocity");
    f.finish()
}

/// Total loss per epoch on a log10 axis (non-positive values are skipped).
pub fn loss_curve(points: &[(usize, f64)], title: &str) -> String {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, v)| *v > 0.0 && v.is_finite())
        .map(|&(e, v)| (e as f64, v.log10()))
        .collect();
    let xs = range(logs.iter().map(|p| p.0));
    let ys = range(logs.iter().map(|p| p.1));
    let (xs, ys) = if logs.is_empty() { ((0.0, 1.0), (0.0, 1.0)) } else { (xs, ys) };
    let mut f = Frame::new(title, xs, ys);
    f.polyline(logs, "#1f77b4");
    f.axes("epoch", "log10 total loss");
    f.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use baton::data::generate_synthetic_clip_with;

    #[test]
    fn figures_are_well_formed() {
        let clip = generate_synthetic_clip_with(1, 30, 10, 0.8, 4).unwrap();
        for svg in [
            trajectory(&clip.motion, "clip <1>"),
            beat_alignment(&[0.1, 0.0, 0.2, 0.3], &[1], &[1, 3], "beats"),
            loss_curve(&[(1, 1.0), (2, 0.1)], "loss"),
            loss_curve(&[], "empty"),
        ] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN") && !svg.contains("inf"));
        }
        assert!(trajectory(&clip.motion, "a<b").contains("a&lt;b"));
    }
}

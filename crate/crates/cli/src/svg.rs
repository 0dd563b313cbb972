//! Minimal SVG output for trajectory overlays and learning curves.

use std::fmt::Write;

use stlseeker::world::{Polarity, Region, Shape, Trajectory};

const SIZE: f64 = 480.0;
const PAD: f64 = 30.0;

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn around(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        for i in 0..2 {
            if !(hi[i] > lo[i]) {
                lo[i] -= 1.0;
                hi[i] += 1.0;
            }
        }
        Frame { lo, hi }
    }

    fn scale(&self) -> f64 {
        (SIZE - 2.0 * PAD) / (self.hi[0] - self.lo[0]).max(self.hi[1] - self.lo[1])
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let s = self.scale();
        (PAD + (p[0] - self.lo[0]) * s, SIZE - PAD - (p[1] - self.lo[1]) * s)
    }
}

fn region_extent(r: &Region) -> [[f64; 2]; 2] {
    match &r.shape {
        Shape::Box { lo, hi } => [*lo, *hi],
        Shape::Disk { center, radius } => [
            [center[0] - radius, center[1] - radius],
            [center[0] + radius, center[1] + radius],
        ],
    }
}

/// Regions plus one polyline per trajectory. Filtered steps are marked red.
pub fn trajectories(regions: &[Region], runs: &[Trajectory]) -> String {
    let pts = regions
        .iter()
        .flat_map(|r| region_extent(r).into_iter())
        .chain(runs.iter().flat_map(|t| t.states.iter().map(|x| [x[0], x[1]])));
    let f = Frame::around(pts);
    let s = f.scale();
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for r in regions {
        let color = match r.polarity {
            Polarity::Target => "#9ecae1",
            Polarity::Obstacle => "#fc9272",
            Polarity::SafeInterior => "none",
        };
        match &r.shape {
            Shape::Box { lo, hi } => {
                let (x0, y1) = f.map(*lo);
                let (x1, y0) = f.map(*hi);
                let _ = writeln!(
                    out,
                    r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{color}" stroke="black"/>"#,
                    x1 - x0,
                    y1 - y0
                );
            }
            Shape::Disk { center, radius } => {
                let (cx, cy) = f.map(*center);
                let _ = writeln!(
                    out,
                    r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{:.2}" fill="{color}" stroke="black"/>"#,
                    radius * s
                );
            }
        }
        let [lo, hi] = region_extent(r);
        let (tx, ty) = f.map([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])]);
        let _ = writeln!(out, r#"<text x="{tx:.2}" y="{ty:.2}" font-size="12" text-anchor="middle">{}</text>"#, r.name);
    }
    for t in runs {
        let path: Vec<String> = t
            .states
            .iter()
            .map(|x| {
                let (a, b) = f.map([x[0], x[1]]);
                format!("{a:.2},{b:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, path.join(" "));
        for (i, rec) in t.filter.iter().enumerate() {
            let color = match rec {
                Some(r) if r.status != stlseeker::world::FilterStatus::Unmodified => "red",
                _ => "black",
            };
            let (a, b) = f.map([t.states[i][0], t.states[i][1]]);
            let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{b:.2}" r="2.5" fill="{color}"/>"#);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Line chart of `(x, y)` points with dashed vertical markers.
pub fn curve(points: &[(f64, f64)], markers: &[f64], y_label: &str) -> String {
    let f = Frame::around(points.iter().map(|&(x, y)| [x, y]));
    let w = SIZE - 2.0 * PAD;
    let sx = w / (f.hi[0] - f.lo[0]);
    let sy = w / (f.hi[1] - f.lo[1]);
    let map = |x: f64, y: f64| (PAD + (x - f.lo[0]) * sx, SIZE - PAD - (y - f.lo[1]) * sy);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = map(f.lo[0], f.lo[1]);
    let (x1, y1) = map(f.hi[0], f.hi[1]);
    let _ = writeln!(out, r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for &m in markers {
        let (mx, _) = map(m, 0.0);
        let _ = writeln!(out, r#"<line x1="{mx:.2}" y1="{y1:.2}" x2="{mx:.2}" y2="{y0:.2}" stroke="gray" stroke-dasharray="4,3"/>"#);
    }
    if f.lo[1] < 0.0 && f.hi[1] > 0.0 {
        let (_, zy) = map(0.0, 0.0);
        let _ = writeln!(out, r#"<line x1="{x0:.2}" y1="{zy:.2}" x2="{x1:.2}" y2="{zy:.2}" stroke="lightgray"/>"#);
    }
    let path: Vec<String> = points
        .iter()
        .filter(|(_, y)| y.is_finite())
        .map(|&(x, y)| {
            let (a, b) = map(x, y);
            format!("{a:.2},{b:.2}")
        })
        .collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.2"/>"#, path.join(" "));
    let _ = writeln!(out, r#"<text x="{PAD}" y="{:.2}" font-size="12">{y_label}: {:.3} .. {:.3}</text>"#, PAD - 10.0, f.lo[1], f.hi[1]);
    out.push_str("</svg>\n");
    out
}

//! Minimal deterministic SVG line charts.

use std::fmt::Write;

pub const WIDTH: f64 = 960.0;
pub const HEIGHT: f64 = 540.0;

const LEFT: f64 = 90.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 9] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    scale: Scale,
}

impl Axis {
    fn map(&self, v: f64) -> f64 {
        let (lo, hi, v) = match self.scale {
            Scale::Linear => (self.lo, self.hi, v),
            Scale::Log => (self.lo.log10(), self.hi.log10(), v.log10()),
        };
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    fn ticks(&self) -> Vec<f64> {
        match self.scale {
            Scale::Linear => {
                if self.hi <= self.lo {
                    return vec![self.lo];
                }
                let step = nice_step(self.hi - self.lo, 5);
                let first = (self.lo / step).ceil() as i64;
                let last = (self.hi / step).floor() as i64;
                (first..=last).map(|i| i as f64 * step).collect()
            }
            Scale::Log => {
                let first = self.lo.log10().ceil() as i32;
                let last = self.hi.log10().floor() as i32;
                let stride = ((last - first) / 8 + 1).max(1);
                (first..=last).step_by(stride as usize).map(|e| 10f64.powi(e)).collect()
            }
        }
    }
}

fn usable(scale: Scale, y: f64) -> bool {
    y.is_finite() && (scale == Scale::Linear || y > 0.0)
}

fn y_axis(curves: &[Curve], scale: Scale) -> Option<Axis> {
    let ys = curves.iter().flat_map(|c| c.points.iter().map(|p| p.1)).filter(|&y| usable(scale, y));
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !lo.is_finite() {
        return None;
    }
    Some(match scale {
        Scale::Linear => {
            let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1.0) * 0.5 };
            Axis {
                lo: lo - pad,
                hi: hi + pad,
                scale,
            }
        }
        Scale::Log => Axis {
            lo: 10f64.powf(lo.log10().floor()),
            hi: 10f64.powf(hi.log10().ceil().max(lo.log10().floor() + 1.0)),
            scale,
        },
    })
}

/// Renders `curves` on a fixed canvas. Points that cannot be drawn on the
/// chosen scale break the line. `comment` is embedded verbatim as an XML
/// comment.
pub fn line_chart(title: &str, y_label: &str, curves: &[Curve], scale: Scale, comment: &str) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );

    let xs = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).filter(|x| x.is_finite());
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let y = y_axis(curves, scale);
    let (Some(y), true) = (y, x_lo.is_finite()) else {
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" fill="#777">no data</text>"##,
            LEFT + plot_w / 2.0,
            TOP + plot_h / 2.0
        );
        s.push_str("</svg>\n");
        return s;
    };
    let x = Axis {
        lo: x_lo,
        hi: x_hi,
        scale: Scale::Linear,
    };
    let px = |v: f64| LEFT + x.map(v) * plot_w;
    let py = |v: f64| TOP + (1.0 - y.map(v)) * plot_h;

    for t in y.ticks() {
        let yy = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#e5e5e5"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            yy + 4.0,
            tick_label(t)
        );
    }
    for t in x.ticks() {
        let xx = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{xx:.2}" y1="{TOP:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##,
            TOP + plot_h
        );
        let _ = writeln!(
            s,
            r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h + 18.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 16.0
    );
    let scale_note = if scale == Scale::Log { " (log)" } else { "" };
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}{scale_note}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );

    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if !seg.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    seg.join(" ")
                );
                seg.clear();
            }
        };
        for &(xv, yv) in &curve.points {
            if xv.is_finite() && usable(scale, yv) {
                segment.push(format!("{:.2},{:.2}", px(xv), py(yv)));
            } else {
                flush(&mut segment, &mut s);
            }
        }
        flush(&mut segment, &mut s);

        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + plot_w + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&curve.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, ys: &[f64]) -> Curve {
        Curve {
            label: label.into(),
            points: ys.iter().enumerate().map(|(i, &y)| (i as f64 * 10.0, y)).collect(),
        }
    }

    #[test]
    fn fixed_canvas_and_deterministic() {
        let curves = [curve("a", &[1.0, 0.1, 0.01]), curve("b<c", &[2.0, 1.0, 0.5])];
        let one = line_chart("dist", "dist_f", &curves, Scale::Log, "seed=1");
        let two = line_chart("dist", "dist_f", &curves, Scale::Log, "seed=1");
        assert_eq!(one, two);
        assert!(one.contains(r#"width="960" height="540""#));
        assert!(one.contains("b&lt;c"));
        assert_eq!(one.matches("<polyline").count(), 2);
    }

    #[test]
    fn log_scale_breaks_on_nonpositive() {
        let curves = [curve("a", &[1.0, 0.0, 0.5, 0.25])];
        let svg = line_chart("t", "y", &curves, Scale::Log, "");
        assert_eq!(svg.matches("<polyline").count(), 2);
        let lin = line_chart("t", "y", &curves, Scale::Linear, "");
        assert_eq!(lin.matches("<polyline").count(), 1);
    }

    #[test]
    fn empty_chart_says_so() {
        let svg = line_chart("t", "y", &[], Scale::Linear, "");
        assert!(svg.contains("no data"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn ticks_are_round_numbers() {
        let axis = Axis {
            lo: 0.0,
            hi: 1000.0,
            scale: Scale::Linear,
        };
        assert_eq!(axis.ticks(), vec![0.0, 200.0, 400.0, 600.0, 800.0, 1000.0]);
        let log = Axis {
            lo: 1e-4,
            hi: 1.0,
            scale: Scale::Log,
        };
        assert_eq!(log.ticks().len(), 5);
    }
}

//! Plain SVG figures: grouped bars and polylines with simple axes.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    s
}

fn close(mut s: String) -> String {
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, names: &[String], dashed: &[bool]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let dash = if dashed.get(i).copied().unwrap_or(false) { r#" stroke-dasharray="5,3""# } else { "" };
        writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"{dash}/><text x="{}" y="{}">{}</text>"#,
            x + 18.0,
            COLORS[i % COLORS.len()],
            x + 24.0,
            y + 4.0,
            escape(name)
        )
        .unwrap();
    }
}

/// Linear or log axis mapping data values to pixels.
#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool, from: f64, to: f64) -> Self {
        let t = |v: f64| if log { v.log10() } else { v };
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .map(t)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil();
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Self { lo, hi, log, from, to }
    }

    fn px(&self, v: f64) -> f64 {
        let v = if self.log { v.max(1e-300).log10() } else { v };
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            (self.lo as i32..=self.hi as i32)
                .map(|e| (10f64.powi(e), format!("1e{e}")))
                .collect()
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

fn axes(s: &mut String, x: Option<&Axis>, y: &Axis, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for (v, label) in y.ticks() {
        let py = y.px(v);
        writeln!(
            s,
            r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##,
            x0 - 6.0,
            py + 4.0
        )
        .unwrap();
    }
    if let Some(x) = x {
        for (v, label) in x.ticks() {
            let px = x.px(v);
            writeln!(
                s,
                r#"<text x="{px:.2}" y="{}" text-anchor="middle">{label}</text>"#,
                y0 + 18.0
            )
            .unwrap();
        }
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

/// Bars of each series side by side within each group.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[(String, Vec<f64>)],
    reference: Option<f64>,
) -> String {
    let mut s = open(title);
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]).chain(reference);
    let y = Axis::new(values, false, H - BOTTOM, TOP);
    axes(&mut s, None, &y, "", y_label);
    let slot = (W - RIGHT - LEFT) / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + slot * g as f64 + slot * 0.1;
        for (k, (_, vals)) in series.iter().enumerate() {
            let Some(&v) = vals.get(g) else { continue };
            if !v.is_finite() {
                continue;
            }
            let (top, base) = (y.px(v.max(0.0)), y.px(v.min(0.0)));
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                bar * 0.95,
                base - top,
                COLORS[k % COLORS.len()]
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + slot * 0.4,
            H - BOTTOM + 18.0,
            escape(name)
        )
        .unwrap();
    }
    if let Some(r) = reference {
        let py = y.px(r);
        writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="black" stroke-dasharray="6,4"/>"#,
            W - RIGHT
        )
        .unwrap();
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut s, &names, &[]);
    close(s)
}

pub struct LineChart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    /// Dashed horizontal lines, drawn as extra legend entries.
    pub levels: Vec<(String, f64)>,
}

impl LineChart<'_> {
    pub fn render(&self) -> String {
        let mut s = open(self.title);
        let points = || self.series.iter().flat_map(|(_, p)| p.iter().copied());
        let x = Axis::new(points().map(|p| p.0), self.log_x, LEFT, W - RIGHT);
        let y = Axis::new(points().map(|p| p.1).chain(self.levels.iter().map(|l| l.1)), self.log_y, H - BOTTOM, TOP);
        axes(&mut s, Some(&x), &y, self.x_label, self.y_label);
        for (k, (_, pts)) in self.series.iter().enumerate() {
            let coords: Vec<String> = pts
                .iter()
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|&(a, b)| format!("{:.2},{:.2}", x.px(a), y.px(b)))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                coords.join(" "),
                COLORS[k % COLORS.len()]
            )
            .unwrap();
        }
        let n = self.series.len();
        for (k, (_, v)) in self.levels.iter().enumerate() {
            let py = y.px(*v);
            writeln!(
                s,
                r#"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="{}" stroke-width="2" stroke-dasharray="5,3"/>"#,
                W - RIGHT,
                COLORS[(n + k) % COLORS.len()]
            )
            .unwrap();
        }
        let mut names: Vec<String> = self.series.iter().map(|(n, _)| n.clone()).collect();
        names.extend(self.levels.iter().map(|(n, _)| n.clone()));
        let dashed: Vec<bool> = (0..names.len()).map(|i| i >= n).collect();
        legend(&mut s, &names, &dashed);
        close(s)
    }
}

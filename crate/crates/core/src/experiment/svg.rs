//! Minimal SVG line charts: axes with ticks, one polyline per series, legend.

use std::fmt::Write as _;

use super::output::shown_components;
use super::RunResult;
use crate::analysis::FeedbackKind;
use crate::sim::ControlledTrajectory;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 230.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Base-10 logarithmic y axis; non-positive values are dropped.
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// About five "round" tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1e6).round() / 1e6)
    }
}

impl LineChart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, label: impl Into<String>, points: Vec<(f64, f64)>, dashed: bool) {
        self.series.push(Series {
            label: label.into(),
            points,
            dashed,
        });
    }

    fn y(&self, v: f64) -> Option<f64> {
        match self.log_y {
            true if v > 0.0 => Some(v.log10()),
            true => None,
            false => v.is_finite().then_some(v),
        }
    }

    fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = xs;
        for (x, y) in self.series.iter().flat_map(|s| &s.points) {
            if let (true, Some(y)) = (x.is_finite(), self.y(*y)) {
                xs = (xs.0.min(*x), xs.1.max(*x));
                ys = (ys.0.min(y), ys.1.max(y));
            }
        }
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (y0, y1) = widen(ys);
        let pad = 0.05 * (y1 - y0);
        (widen(xs), (y0 - pad, y1 + pad))
    }

    pub fn render(&self) -> String {
        let ((x0, x1), (y0, y1)) = self.bounds();
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 16.0,
                label(t)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let text = if self.log_y { format!("1e{t}") } else { label(t) };
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{text}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 18.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        let line_h = (ph / self.series.len().max(1) as f64).min(16.0);
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let dash = if series.dashed {
                r#" stroke-dasharray="6 3""#
            } else {
                ""
            };
            let pts: Vec<String> = series
                .points
                .iter()
                .filter_map(|(x, y)| Some((*x, self.y(*y)?)))
                .map(|(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                pts.join(" ")
            );
            let ly = TOP + 8.0 + i as f64 * line_h;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}" font-size="{:.1}">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                (line_h - 2.0).clamp(6.0, 12.0),
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn subsampled(traj: &ControlledTrajectory, every: usize, f: impl Fn(usize) -> f64) -> Vec<(f64, f64)> {
    let last = traj.states.len() - 1;
    (0..=last)
        .filter(|k| k % every == 0 || *k == last)
        .map(|k| (traj.grid.node(k), f(k)))
        .collect()
}

fn feedback_tag(kind: FeedbackKind) -> String {
    match kind.convention() {
        Some(c) => format!("{}-{}", kind.label(), c.as_str()),
        None => kind.label().to_string(),
    }
}

/// All charts of a run, as `(file name, chart)`:
/// - `overview-*`: one series per test parameter and state component, per feedback;
/// - `trajectory-*`: one file per test parameter, every feedback and the target;
/// - `costs-*`: worst tracking cost over the test set against `ℓ`;
/// - `fields.svg`: sampled diffusion coefficients, when present.
pub fn charts(result: &RunResult) -> Vec<(String, LineChart)> {
    let every = result.config.trajectory_every;
    let mut out = Vec::new();
    for section in &result.sections {
        let table = &section.table;
        let shown = shown_components(section.target.dim());
        let mut kinds: Vec<FeedbackKind> = table.rows.keys().map(|k| k.2).collect();
        kinds.sort();
        kinds.dedup();

        for (li, &ell) in table.ells.iter().enumerate() {
            let kept: Vec<_> = table
                .rows
                .range((li, 0, FeedbackKind::Ensemble)..(li + 1, 0, FeedbackKind::Ensemble))
                .filter_map(|(_, r)| Some((r, r.result.as_ref().ok()?.trajectory.as_ref()?)))
                .collect();
            if kept.is_empty() {
                continue;
            }
            for &kind in &kinds {
                let tag = feedback_tag(kind);
                let mut chart = LineChart::new(format!("{}: {tag} feedback, ℓ = {ell}", section.name), "t", "state");
                for (row, traj) in kept.iter().filter(|(r, _)| r.feedback == kind) {
                    for &j in &shown {
                        let name = format!("test {} y{j}", row.test_id);
                        chart.push(name, subsampled(traj, every, |k| traj.states[k][j]), j % 2 == 1);
                    }
                }
                out.push((format!("overview-{}-ell{ell}-{tag}.svg", section.name), chart));
            }
            let mut tests: Vec<usize> = kept.iter().map(|(r, _)| r.test_id).collect();
            tests.dedup();
            for test in tests {
                let param = kept.iter().find(|(r, _)| r.test_id == test).map(|(r, _)| &r.test_param);
                let title = match (section.test_label, param) {
                    (super::TestLabel::Value, Some(p)) if p.len() == 1 => format!("σ = {}", p[0]),
                    (super::TestLabel::Draw { first }, _) => format!("test draw {}", first + test as u64),
                    _ => format!("test {test}"),
                };
                let mut chart = LineChart::new(format!("{}: ℓ = {ell}, {title}", section.name), "t", "state / control");
                for &j in &shown {
                    let target = &section.target;
                    let pts = (0..=target.grid().steps())
                        .filter(|k| k % every == 0 || *k == target.grid().steps())
                        .map(|k| (target.grid().node(k), target.value(k)[j]))
                        .collect();
                    chart.push(format!("target y{j}"), pts, true);
                }
                for (row, traj) in kept.iter().filter(|(r, _)| r.test_id == test) {
                    let tag = feedback_tag(row.feedback);
                    for &j in &shown {
                        chart.push(
                            format!("{tag} y{j}"),
                            subsampled(traj, every, |k| traj.states[k][j]),
                            false,
                        );
                    }
                    for j in 0..traj.controls[0].len() {
                        chart.push(
                            format!("{tag} u{j}"),
                            subsampled(traj, every, |k| traj.controls[k][j]),
                            true,
                        );
                    }
                }
                out.push((format!("trajectory-{}-ell{ell}-test{test}.svg", section.name), chart));
            }
        }

        let mut costs = LineChart::new(
            format!("{}: worst tracking cost over the test set", section.name),
            "ℓ",
            "tracking cost",
        );
        costs.log_y = true;
        for &kind in &kinds {
            let pts = (0..table.ells.len())
                .filter_map(|li| {
                    let worst = table
                        .rows
                        .iter()
                        .filter(|((l, _, k), _)| *l == li && *k == kind)
                        .filter_map(|(_, r)| r.result.as_ref().ok().map(|d| d.cost.tracking))
                        .reduce(f64::max)?;
                    Some((table.ells[li], worst))
                })
                .collect();
            costs.push(feedback_tag(kind), pts, false);
        }
        out.push((format!("costs-{}.svg", section.name), costs));
    }
    if !result.fields.is_empty() {
        let mut chart = LineChart::new("sampled diffusion coefficients", "s", "a(s)");
        for f in &result.fields {
            let pts = result
                .nodes
                .iter()
                .copied()
                .zip(f.sample.values.iter().copied())
                .collect();
            chart.push(
                format!("{} draw {} (ℓ = {})", f.set, f.draw, f.ell),
                pts,
                f.set != "training",
            );
        }
        out.push(("fields.svg".to_string(), chart));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_inside() {
        let t = ticks(0.0, 5.0);
        assert_eq!(t, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let t = ticks(-0.37, 1.9);
        assert!(t.iter().all(|v| (-0.37..=1.9).contains(v)));
        assert!(t.len() >= 3);
    }

    #[test]
    fn one_polyline_per_series() {
        let mut chart = LineChart::new("a < b", "t", "y");
        chart.push("one", vec![(0.0, 1.0), (1.0, 2.0)], false);
        chart.push("two", vec![(0.0, -1.0), (1.0, f64::NAN)], true);
        let svg = chart.render();
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn log_axis_drops_nonpositive_values() {
        let mut chart = LineChart::new("", "", "");
        chart.log_y = true;
        chart.push("c", vec![(0.0, 10.0), (1.0, 0.0), (2.0, 1000.0)], false);
        let svg = chart.render();
        let start = svg.find("points=\"").unwrap() + 8;
        let points = &svg[start..start + svg[start..].find('"').unwrap()];
        assert_eq!(points.split(' ').count(), 2);
    }

    #[test]
    fn overview_plot_has_one_series_per_test_and_component() {
        let run = crate::experiment::run_oscillator(&crate::experiment::output::tests::small()).unwrap();
        let charts = charts(&run);
        let (_, overview) = charts
            .iter()
            .find(|(name, _)| name.starts_with("overview-") && name.contains("ensemble"))
            .unwrap();
        assert_eq!(overview.series.len(), 12);
        assert_eq!(overview.render().matches("class=\"series\"").count(), 12);
        let per_test = charts
            .iter()
            .filter(|(name, _)| name.starts_with("trajectory-"))
            .count();
        assert_eq!(per_test, 6);
    }
}

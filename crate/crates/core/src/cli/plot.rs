//! SVG line chart of test AUC against adaptation size, log-scaled on x.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cohort::Feature;
use crate::evaluation::Backbone;

use super::files::SweepRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn colour(f: Feature) -> &'static str {
    match f {
        Feature::Rhr => "#d62728",
        Feature::Tib => "#1f77b4",
        Feature::Cal => "#2ca02c",
    }
}

/// Mean AUC per adaptation size over every successful row of `backbone`.
pub fn mean_curve(rows: &[SweepRow], backbone: Backbone) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.backbone == backbone) {
        if let Some(auc) = r.auc {
            let e = acc.entry(r.n_adaptation).or_default();
            e.0 += auc;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(n, (sum, k))| (n, sum / k as f64)).collect()
}

struct Axes {
    log_lo: f64,
    log_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Axes {
    fn x(&self, n: usize) -> f64 {
        let span = (self.log_hi - self.log_lo).max(1e-9);
        LEFT + ((n as f64).ln() - self.log_lo) / span * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, auc: f64) -> f64 {
        TOP + (self.y_hi - auc) / (self.y_hi - self.y_lo) * (HEIGHT - TOP - BOTTOM)
    }
}

/// One polyline per pretraining objective, averaged over seeds, plus a
/// dashed random-backbone path when present. X ticks sit at every
/// adaptation size in `rows`.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_adaptation).filter(|&n| n > 0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    let lo = aucs.iter().copied().fold(0.5, f64::min);
    let hi = aucs.iter().copied().fold(0.9, f64::max);
    let axes = Axes {
        log_lo: sizes.first().map_or(0.0, |&n| (n as f64).ln()),
        log_hi: sizes.last().map_or(1.0, |&n| (n as f64).ln()),
        y_lo: (lo * 10.0).floor() / 10.0,
        y_hi: ((hi * 10.0).ceil() / 10.0).min(1.0),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">Test AUC by adaptation size</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0
    );

    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (TOP, HEIGHT - BOTTOM);
    let _ = writeln!(svg, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y1:.1}" x2="{x1:.1}" y2="{y1:.1}"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}"/>"#);
    let _ = writeln!(svg, "</g>");

    for &n in &sizes {
        let x = axes.x(n);
        let _ = writeln!(
            svg,
            r#"<g class="x-tick"><line x1="{x:.1}" y1="{y1:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{n}</text></g>"#,
            y1 + 5.0,
            y1 + 20.0
        );
    }
    let steps = ((axes.y_hi - axes.y_lo) * 10.0).round() as usize;
    for i in 0..=steps {
        let v = axes.y_lo + i as f64 / 10.0;
        let y = axes.y(v);
        let _ = writeln!(
            svg,
            r##"<g class="y-tick"><line x1="{:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text></g>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">participants in adaptation set (log scale)</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 18.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">test AUC</text>"#,
        (y0 + y1) / 2.0
    );

    let mut legend = 0;
    let mut legend_entry = |svg: &mut String, label: &str, stroke: &str, dash: &str| {
        let y = TOP + 10.0 + 20.0 * legend as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{stroke}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            x1 + 15.0,
            x1 + 40.0,
            x1 + 46.0,
            y + 4.0
        );
        legend += 1;
    };

    for f in Feature::ALL {
        let curve = mean_curve(rows, Backbone::Pretrained(f));
        if curve.is_empty() {
            continue;
        }
        let points: Vec<String> = curve.iter().map(|&(n, a)| format!("{:.1},{:.1}", axes.x(n), axes.y(a))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="objective" data-objective="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            f.as_str(),
            colour(f),
            points.join(" ")
        );
        for &(n, a) in &curve {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                axes.x(n),
                axes.y(a),
                colour(f)
            );
        }
        legend_entry(&mut svg, f.as_str(), colour(f), "");
    }
    let baseline = mean_curve(rows, Backbone::Random);
    if !baseline.is_empty() {
        let d: Vec<String> = baseline
            .iter()
            .enumerate()
            .map(|(i, &(n, a))| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, axes.x(n), axes.y(a)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<path class="baseline" fill="none" stroke="#7f7f7f" stroke-width="2" stroke-dasharray="6 4" d="{}"/>"##,
            d.join(" ")
        );
        legend_entry(&mut svg, "random backbone", "#7f7f7f", r#" stroke-dasharray="6 4""#);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(with_baseline: bool) -> Vec<SweepRow> {
        let mut out = Vec::new();
        for (k, f) in Feature::ALL.into_iter().enumerate() {
            for (i, n) in [25, 50, 100, 200, 400].into_iter().enumerate() {
                for seed in 0..2 {
                    out.push(SweepRow {
                        backbone: Backbone::Pretrained(f),
                        n_adaptation: n,
                        auc: Some(0.55 + 0.05 * i as f64 + 0.01 * k as f64 + 0.02 * seed as f64),
                        seed,
                        reference_auc: None,
                    });
                }
            }
        }
        if with_baseline {
            for n in [25, 50, 100, 200, 400] {
                out.push(SweepRow {
                    backbone: Backbone::Random,
                    n_adaptation: n,
                    auc: Some(0.6),
                    seed: 9,
                    reference_auc: None,
                });
            }
        }
        out
    }

    #[test]
    fn three_polylines_and_five_ticks() {
        for baseline in [false, true] {
            let svg = sweep_svg(&rows(baseline));
            assert_eq!(svg.matches("<polyline").count(), 3);
            assert_eq!(svg.matches(r#"class="x-tick""#).count(), 5);
            assert_eq!(svg.matches(r#"class="baseline""#).count(), baseline as usize);
            for n in ["25", "400"] {
                assert!(svg.contains(&format!(">{n}</text>")));
            }
        }
    }

    #[test]
    fn ticks_are_log_spaced() {
        let svg = sweep_svg(&rows(false));
        let xs: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("x-tick"))
            .map(|l| {
                let start = l.find("x1=\"").unwrap() + 4;
                l[start..].split('"').next().unwrap().parse().unwrap()
            })
            .collect();
        let gaps: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        for g in &gaps {
            assert!((g - gaps[0]).abs() < 0.2, "{gaps:?}");
        }
    }

    #[test]
    fn curves_average_seeds_and_skip_failures() {
        let mut r = rows(false);
        r[0].auc = None;
        let curve = mean_curve(&r, Backbone::Pretrained(Feature::Rhr));
        assert_eq!(curve.len(), 5);
        assert!((curve[0].1 - 0.57).abs() < 1e-12);
        assert!((curve[1].1 - 0.61).abs() < 1e-12);
    }
}

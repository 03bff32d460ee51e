//! Accuracy-vs-size plot of an elimination trace.
//!
//! The SVG is text-stable: coordinates use fixed two-decimal formatting and
//! each point carries its accuracy exactly as the trace CSV prints it.

use std::fmt::Write;

use ensyth_core::EliminationTrace;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;

fn plot_w() -> f64 {
    WIDTH - LEFT - RIGHT
}

fn plot_h() -> f64 {
    HEIGHT - TOP - BOTTOM
}

/// Largest ensemble on the left, a single member on the right.
fn x_of(size: usize, largest: usize) -> f64 {
    if largest <= 1 {
        return LEFT + plot_w() / 2.0;
    }
    LEFT + (largest - size) as f64 / (largest - 1) as f64 * plot_w()
}

fn y_of(accuracy: f64) -> f64 {
    TOP + (1.0 - accuracy.clamp(0.0, 1.0)) * plot_h()
}

pub fn accuracy_vs_size_svg(trace: &EliminationTrace, baseline_accuracy: f64) -> String {
    let largest = trace.steps.iter().map(|s| s.ensemble.len()).max().unwrap_or(1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">Ensemble accuracy by size</text>"#,
        WIDTH / 2.0
    );

    let (x0, x1, y0, y1) = (LEFT, LEFT + plot_w(), TOP, TOP + plot_h());
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y0:.2} L{x0:.2},{y1:.2} L{x1:.2},{y1:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"##,
            x0 - 4.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let stride = largest.div_ceil(20).max(1);
    for size in (1..=largest).filter(|k| (largest - k) % stride == 0) {
        let x = x_of(size, largest);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y1:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{size}</text>"#,
            y1 + 4.0,
            y1 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Number of models</text>"#,
        LEFT + plot_w() / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.2}) rotate(-90)" text-anchor="middle">Accuracy</text>"#,
        TOP + plot_h() / 2.0
    );

    let yb = y_of(baseline_accuracy);
    let _ = writeln!(
        s,
        r##"<line class="baseline" x1="{x0:.2}" y1="{yb:.2}" x2="{x1:.2}" y2="{yb:.2}" stroke="#c0392b" stroke-dasharray="6,4" data-accuracy="{baseline_accuracy}"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="#c0392b">baseline {baseline_accuracy:.4}</text>"##,
        x1 - 4.0,
        yb - 6.0
    );

    let points: Vec<String> = trace
        .steps
        .iter()
        .map(|st| format!("{:.2},{:.2}", x_of(st.ensemble.len(), largest), y_of(st.accuracy)))
        .collect();
    if points.len() > 1 {
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#2c6fbb" stroke-width="2"/>"##,
            points.join(" ")
        );
    }
    for st in &trace.steps {
        let size = st.ensemble.len();
        let _ = writeln!(
            s,
            r##"<circle class="step" cx="{:.2}" cy="{:.2}" r="4" fill="#2c6fbb" data-size="{size}" data-accuracy="{}"><title>{size} models: {:.4}</title></circle>"##,
            x_of(size, largest),
            y_of(st.accuracy),
            st.accuracy,
            st.accuracy
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ensyth_core::ensemble::EliminationStep;
    use ensyth_core::Ensemble;

    fn trace(accs: &[f64]) -> EliminationTrace {
        let n = accs.len();
        EliminationTrace {
            steps: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| EliminationStep {
                    ensemble: Ensemble::new((i..n).collect(), n).unwrap(),
                    accuracy: a,
                    removed: (i + 1 < n).then_some(i),
                })
                .collect(),
        }
    }

    #[test]
    fn single_step_plot_has_one_point_and_a_baseline() {
        let svg = accuracy_vs_size_svg(&trace(&[0.5]), 0.75);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("<polyline"));
        assert!(svg.contains(r#"class="baseline""#));
        assert!(svg.contains(r#"data-accuracy="0.5""#));
    }

    #[test]
    fn larger_ensembles_sit_further_left() {
        let svg = accuracy_vs_size_svg(&trace(&[0.9, 0.8, 0.7]), 0.85);
        assert_eq!(svg, accuracy_vs_size_svg(&trace(&[0.9, 0.8, 0.7]), 0.85));
        let cx: Vec<f64> = svg
            .match_indices("cx=\"")
            .map(|(i, _)| {
                let rest = &svg[i + 4..];
                rest[..rest.find('"').unwrap()].parse().unwrap()
            })
            .collect();
        assert_eq!(cx.len(), 3);
        assert!(cx[0] < cx[1] && cx[1] < cx[2]);
    }
}

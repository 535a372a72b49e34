//! Top-down SVG of a run: markers, trajectories and merge events.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::geom::{DroneId, FrameId, Pose6D};
use crate::report::RunReport;

const SIZE: f64 = 800.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Transform taking a live frame's coordinates to the world for display.
fn frame_to_world(report: &RunReport, frame: FrameId) -> Pose6D {
    report
        .metrics
        .per_frame
        .iter()
        .find(|f| f.frame == frame)
        .and_then(|f| f.alignment)
        .or_else(|| {
            report
                .frame_origins
                .iter()
                .find(|o| o.frame == frame)
                .map(|o| o.pose)
        })
        .unwrap_or_else(Pose6D::identity)
}

struct View {
    min: [f64; 2],
    scale: f64,
}

impl View {
    fn fit(points: &[Vector3<f64>]) -> Self {
        let (mut lo, mut hi) = ([-1.0f64, -1.0f64], [1.0f64, 1.0f64]);
        if !points.is_empty() {
            lo = [f64::INFINITY; 2];
            hi = [f64::NEG_INFINITY; 2];
            for p in points {
                for i in 0..2 {
                    lo[i] = lo[i].min(p[i]);
                    hi[i] = hi[i].max(p[i]);
                }
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        let pad = 0.05 * span;
        let span = span + 2.0 * pad;
        Self {
            min: [lo[0] - pad, lo[1] - pad],
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn px(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            MARGIN + (p.x - self.min[0]) * self.scale,
            SIZE - MARGIN - (p.y - self.min[1]) * self.scale,
        )
    }

    fn world_x(&self, px: f64) -> f64 {
        self.min[0] + (px - MARGIN) / self.scale
    }

    fn world_y(&self, py: f64) -> f64 {
        self.min[1] + (SIZE - MARGIN - py) / self.scale
    }
}

pub fn render_svg(report: &RunReport) -> String {
    let mut truth_paths: BTreeMap<DroneId, Vec<Vector3<f64>>> = BTreeMap::new();
    let mut est_paths: BTreeMap<DroneId, Vec<Vector3<f64>>> = BTreeMap::new();
    for s in &report.trajectories {
        let (live, to_live) = report.resolve(s.frame);
        let w = frame_to_world(report, live).compose(&to_live);
        truth_paths.entry(s.drone_id).or_default().push(s.truth.t);
        est_paths
            .entry(s.drone_id)
            .or_default()
            .push(w.transform_point(&s.estimate.t));
    }
    let map_points: Vec<(u16, Vector3<f64>)> = report
        .final_map
        .iter()
        .map(|e| {
            (
                e.marker_id.0,
                frame_to_world(report, e.frame).transform_point(&e.pose.t),
            )
        })
        .collect();

    let mut all: Vec<Vector3<f64>> = report.truth_markers.iter().map(|m| m.pose.t).collect();
    all.extend(map_points.iter().map(|(_, p)| *p));
    all.extend(truth_paths.values().flatten());
    all.extend(est_paths.values().flatten());
    let view = View::fit(&all);

    let mut svg = String::new();
    let w = |svg: &mut String, s: String| svg.push_str(&s);
    w(
        &mut svg,
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
        ),
    );
    w(
        &mut svg,
        format!(
            "<title>{} (seed {})</title>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            escape(&report.scenario_name),
            report.seed
        ),
    );

    // axes with five ticks each
    svg.push_str("<g class=\"axes\" stroke=\"black\" stroke-width=\"1\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let (x0, y0, x1, y1) = (MARGIN, SIZE - MARGIN, SIZE - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        "<line class=\"axis x\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\"/>"
    );
    let _ = writeln!(
        svg,
        "<line class=\"axis y\" x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\"/>"
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let px = x0 + f * (x1 - x0);
        let py = y0 + f * (y1 - y0);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.1}\" y1=\"{y0}\" x2=\"{px:.1}\" y2=\"{:.1}\"/><text stroke=\"none\" x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.2}</text>",
            y0 + 5.0,
            y0 + 18.0,
            view.world_x(px)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{x0}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\"/><text stroke=\"none\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            view.world_y(py)
        );
    }
    let _ = writeln!(
        svg,
        "<text stroke=\"none\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">x (m)</text>",
        SIZE / 2.0,
        SIZE - 15.0
    );
    let _ = writeln!(
        svg,
        "<text stroke=\"none\" x=\"15\" y=\"{:.1}\" transform=\"rotate(-90 15 {:.1})\" text-anchor=\"middle\">y (m)</text>",
        SIZE / 2.0,
        SIZE / 2.0
    );
    svg.push_str("</g>\n");

    for (i, (drone, pts)) in truth_paths.iter().enumerate() {
        polyline(
            &mut svg,
            &view,
            "truth",
            *drone,
            pts,
            COLORS[i % COLORS.len()],
            None,
        );
    }
    for (i, (drone, pts)) in est_paths.iter().enumerate() {
        polyline(
            &mut svg,
            &view,
            "estimate",
            *drone,
            pts,
            COLORS[i % COLORS.len()],
            Some("6 4"),
        );
    }

    for m in &report.truth_markers {
        let (x, y) = view.px(&m.pose.t);
        let _ = writeln!(
            svg,
            "<rect class=\"marker-truth\" data-id=\"{}\" x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"none\" stroke=\"black\"/>",
            m.id.0,
            x - 5.0,
            y - 5.0
        );
    }
    for (id, p) in &map_points {
        let (x, y) = view.px(p);
        let _ = writeln!(
            svg,
            "<circle class=\"marker\" data-id=\"{id}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#444\"/>"
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{id}</text>",
            x + 6.0,
            y - 6.0
        );
    }

    for ev in &report.merges {
        let at = report
            .trajectories
            .iter()
            .filter(|s| s.drone_id == ev.drone)
            .min_by(|a, b| {
                (a.sim_time - ev.time)
                    .abs()
                    .total_cmp(&(b.sim_time - ev.time).abs())
            });
        let Some(s) = at else { continue };
        let (x, y) = view.px(&s.truth.t);
        let _ = writeln!(
            svg,
            "<g class=\"merge\"><circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"9\" fill=\"none\" stroke=\"#e377c2\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#e377c2\">merge {}\u{2192}{} t={:.1}s</text></g>",
            x + 11.0,
            y + 4.0,
            ev.notice.loser,
            ev.notice.winner,
            ev.time
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn polyline(
    svg: &mut String,
    view: &View,
    source: &str,
    drone: DroneId,
    pts: &[Vector3<f64>],
    color: &str,
    dash: Option<&str>,
) {
    let points: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = view.px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = dash
        .map(|d| format!(" stroke-dasharray=\"{d}\""))
        .unwrap_or_default();
    let _ = writeln!(
        svg,
        "<polyline class=\"trajectory {source}\" data-drone=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
        drone.0,
        points.join(" ")
    );
}

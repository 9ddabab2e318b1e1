//! Trajectory CSVs and the combined SVG plot.

use std::fmt::Write;

use privadmm_core::experiment::{ExperimentResult, Mode, Trajectory};

pub const CSV_HEADER: [&str; 6] = ["t", "agent", "y1", "y2", "u1", "u2"];

/// `t, agent, y1, y2, u1, u2`, one row per agent and step. Floats use the
/// shortest representation that round-trips.
pub fn trajectory_csv(traj: &Trajectory) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &traj.rows {
        w.write_record([
            r.t.to_string(),
            r.agent.to_string(),
            r.y[0].to_string(),
            r.y[1].to_string(),
            r.u[0].to_string(),
            r.u[1].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn mode_color(mode: Mode) -> &'static str {
    match mode {
        Mode::Centralized => "#2ca02c",
        Mode::Plain => "#d62728",
        Mode::Encrypted => "#1f77b4",
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const PAD: f64 = 40.0;

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    /// Fits all points with equal axis scaling; y grows upward.
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        if points.is_empty() {
            min = [-1.0, -1.0];
            max = [1.0, 1.0];
        }
        let span = [(max[0] - min[0]).max(1.0), (max[1] - min[1]).max(1.0)];
        let scale = ((WIDTH - 2.0 * PAD) / span[0]).min((HEIGHT - 2.0 * PAD) / span[1]);
        Self { min, scale }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (PAD + (p[0] - self.min[0]) * self.scale, HEIGHT - PAD - (p[1] - self.min[1]) * self.scale)
    }
}

/// One polyline per agent and mode, circles at the initial positions and
/// crosses at the ideal positions for the last step.
pub fn trajectory_svg(result: &ExperimentResult) -> String {
    let empty = result.steps == 0;
    let mut points: Vec<[f64; 2]> = Vec::new();
    if !empty {
        for t in result.trajectories.values() {
            points.extend(t.initial.iter().copied());
            points.extend(t.rows.iter().map(|r| r.y));
        }
        points.extend(result.ideal_final.iter().copied());
    }
    let frame = Frame::fit(&points);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<title>{} formation, {} steps, {} iterations per step</title>"#, result.scenario, result.steps, result.iterations);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for (mode, traj) in &result.trajectories {
        let _ = writeln!(s, r#"<g id="trajectories-{mode}" fill="none" stroke="{}" stroke-width="1.5">"#, mode_color(*mode));
        if !empty {
            let m = traj.initial.len();
            for agent in 1..=m {
                let path = std::iter::once(traj.initial[agent - 1])
                    .chain(traj.rows.iter().filter(|r| r.agent == agent).map(|r| r.y))
                    .map(|p| {
                        let (x, y) = frame.map(p);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(s, r#"<polyline data-agent="{agent}" points="{path}"/>"#);
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, r#"<g id="initial-positions" fill="black">"#);
    if let Some(traj) = result.trajectories.values().next().filter(|_| !empty) {
        for (idx, p) in traj.initial.iter().enumerate() {
            let (x, y) = frame.map(*p);
            let _ = writeln!(s, r#"<circle data-agent="{}" cx="{x:.2}" cy="{y:.2}" r="3"/>"#, idx + 1);
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="ideal-positions" stroke="black" stroke-width="1.5">"#);
    if !empty {
        for (idx, p) in result.ideal_final.iter().enumerate() {
            let (x, y) = frame.map(*p);
            let _ = writeln!(
                s,
                r#"<path data-agent="{}" d="M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}"/>"#,
                idx + 1,
                x - 4.0,
                y - 4.0,
                x + 4.0,
                y + 4.0,
                x - 4.0,
                y + 4.0,
                x + 4.0,
                y - 4.0
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="12">"#);
    for (row, mode) in result.trajectories.keys().enumerate() {
        let y = 20.0 + 16.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<line x1="10" y1="{y}" x2="30" y2="{y}" stroke="{}" stroke-width="2"/><text x="36" y="{}">{mode}</text>"#,
            mode_color(*mode),
            y + 4.0
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use privadmm_core::experiment::TrajectoryRow;

    #[test]
    fn csv_rows_round_trip_floats() {
        let traj = Trajectory {
            mode: Mode::Plain,
            initial: vec![[0.0, 0.0]],
            rows: vec![TrajectoryRow { t: 1, agent: 1, y: [0.1, -2.5], u: [1e-20, 3.0] }],
        };
        let csv = trajectory_csv(&traj).unwrap();
        assert_eq!(csv, "t,agent,y1,y2,u1,u2\n1,1,0.1,-2.5,0.00000000000000000001,3\n");
        let back: f64 = csv.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(back, 1e-20);
    }

    #[test]
    fn frame_keeps_points_inside() {
        let f = Frame::fit(&[[-10.0, 5.0], [30.0, -7.0]]);
        for p in [[-10.0, 5.0], [30.0, -7.0]] {
            let (x, y) = f.map(p);
            assert!((PAD - 1e-9..=WIDTH - PAD + 1e-9).contains(&x));
            assert!((PAD - 1e-9..=HEIGHT - PAD + 1e-9).contains(&y));
        }
        assert!(f.map([0.0, 1.0]).1 < f.map([0.0, 0.0]).1);
    }
}

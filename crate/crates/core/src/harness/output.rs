use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Maze};
use crate::diffusion::Trajectory;
use crate::specs::BarrierSpec;

pub const ARTIFACT: &str = "cbf-diffusion";

/// Provenance stamped on every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub artifact: String,
    pub version: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
}

impl ArtifactHeader {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            artifact: ARTIFACT.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    fn line(&self) -> String {
        format!(
            "artifact={} version={} kind={} config_hash={} seed={}",
            self.artifact, self.version, self.kind, self.config_hash, self.seed
        )
    }

    fn parse_line(line: &str) -> Option<Self> {
        let mut h = Self::new("", "", 0);
        h.artifact.clear();
        h.version.clear();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "artifact" => h.artifact = v.to_string(),
                "version" => h.version = v.to_string(),
                "kind" => h.kind = v.to_string(),
                "config_hash" => h.config_hash = v.to_string(),
                "seed" => h.seed = v.parse().ok()?,
                _ => {}
            }
        }
        (!h.artifact.is_empty()).then_some(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub header: ArtifactHeader,
    pub body: T,
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

pub fn emit_json<T: Serialize>(path: &Path, header: &ArtifactHeader, body: &T) -> Result<(), HarnessError> {
    let doc = Document {
        header: header.clone(),
        body,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| HarnessError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Document<T>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reports are plain JSON documents.
pub fn emit_report<T: Serialize>(path: &Path, header: &ArtifactHeader, report: &T) -> Result<(), HarnessError> {
    emit_json(path, header, report)
}

/// CSV with columns `k, x_1 .. x_d`, preceded by a `#` header line.
pub fn emit_trajectory(path: &Path, header: &ArtifactHeader, tau: &Trajectory) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    writeln!(buf, "# {}", header.line()).expect("write to vec");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut cols = vec!["k".to_string()];
        cols.extend((1..=tau.dim()).map(|i| format!("x_{i}")));
        let csv_err = |e: csv::Error| HarnessError::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        };
        w.write_record(&cols).map_err(csv_err)?;
        for k in 0..tau.len() {
            let mut rec = vec![k.to_string()];
            rec.extend(tau.state(k).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
    }
    write_file(path, &buf)
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, Option<ArtifactHeader>), HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let header = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .and_then(ArtifactHeader::parse_line);
    let parse_err = |message: String| HarnessError::Parse {
        what: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let k: usize = rec.get(0).unwrap_or("").parse().map_err(|_| parse_err(format!("bad k on row {i}")))?;
        if k != i {
            return Err(parse_err(format!("row {i} has k = {k}")));
        }
        let state = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        rows.push(state);
    }
    Ok((Trajectory::from_rows(&rows)?, header))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

/// Zero level set of `f` over a regular `nx x ny` cell grid. Saddle cells
/// are resolved with the cell-center average.
pub fn marching_squares<F: Fn(f64, f64) -> f64>(
    f: F,
    x: [f64; 2],
    y: [f64; 2],
    nx: usize,
    ny: usize,
) -> Vec<Segment> {
    let hx = (x[1] - x[0]) / nx as f64;
    let hy = (y[1] - y[0]) / ny as f64;
    let px = |i: usize| x[0] + i as f64 * hx;
    let py = |j: usize| y[0] + j as f64 * hy;
    let grid: Vec<Vec<f64>> = (0..=nx).map(|i| (0..=ny).map(|j| f(px(i), py(j))).collect()).collect();
    let mut out = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            // Corners counter-clockwise from the lower-left.
            let c = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v = c.map(|(a, b)| grid[a][b]);
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let inside = v.map(|x| x < 0.0);
            let mut cross: [Option<[f64; 2]>; 4] = [None; 4];
            for e in 0..4 {
                let (p, q) = (e, (e + 1) % 4);
                if inside[p] != inside[q] {
                    let t = v[p] / (v[p] - v[q]);
                    let (a, b) = (c[p], c[q]);
                    cross[e] = Some([
                        px(a.0) + t * (px(b.0) - px(a.0)),
                        py(a.1) + t * (py(b.1) - py(a.1)),
                    ]);
                }
            }
            let hits: Vec<usize> = (0..4).filter(|e| cross[*e].is_some()).collect();
            let mut push = |e1: usize, e2: usize| {
                out.push(Segment {
                    a: cross[e1].expect("crossing"),
                    b: cross[e2].expect("crossing"),
                })
            };
            match hits.len() {
                2 => push(hits[0], hits[1]),
                4 => {
                    let center = v.iter().sum::<f64>() / 4.0;
                    if (center < 0.0) == inside[0] {
                        push(0, 1);
                        push(2, 3);
                    } else {
                        push(3, 0);
                        push(1, 2);
                    }
                }
                _ => {}
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotLayer {
    pub label: String,
    /// World coordinates.
    pub points: Vec<[f64; 2]>,
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Maze cells, the `b = 0` contour of each spec (world coordinates) and
/// trajectories with start and goal markers.
pub fn render_svg(maze: &Maze, specs: &[BarrierSpec], layers: &[PlotLayer], header: &ArtifactHeader) -> String {
    let scale = 60.0 / maze.cell_size();
    let [w, h] = maze.extent();
    let legend = 18.0 * layers.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, "<!-- {} -->", header.line());
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.1} {:.1}">"#,
        w * scale,
        h * scale + legend,
        w * scale,
        h * scale + legend
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{:.1}" height="{:.1}" fill="white" stroke="black"/>"#, w * scale, h * scale);
    for r in 0..maze.rows() {
        for c in 0..maze.cols() {
            if maze.is_blocked(r, c) {
                let side = maze.cell_size() * scale;
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.1}" y="{:.1}" width="{side:.1}" height="{side:.1}" fill="#555"/>"##,
                    c as f64 * side,
                    r as f64 * side
                );
            }
        }
    }
    let n = (8.0 * w.max(h) / maze.cell_size() * 25.0) as usize;
    for spec in specs {
        let single = spec.terminal_fallback().unwrap_or_else(|| spec.clone());
        let segs = marching_squares(|x, y| single.eval(&[x, y], None).unwrap_or(f64::NAN), [0.0, w], [0.0, h], n, n);
        let mut d = String::new();
        for seg in segs {
            let _ = write!(
                d,
                "M{:.2} {:.2}L{:.2} {:.2}",
                seg.a[0] * scale,
                seg.a[1] * scale,
                seg.b[0] * scale,
                seg.b[1] * scale
            );
        }
        if !d.is_empty() {
            let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#e377c2" stroke-width="2"/>"##);
        }
    }
    for (i, layer) in layers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let (Some(first), Some(last)) = (layer.points.first(), layer.points.last()) {
            let pts: Vec<String> = layer
                .points
                .iter()
                .map(|p| format!("{:.2},{:.2}", p[0] * scale, p[1] * scale))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            for p in &layer.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, p[0] * scale, p[1] * scale);
            }
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="6" fill="#2ca02c" stroke="black"/>"##,
                first[0] * scale,
                first[1] * scale
            );
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="12" height="12" fill="#d62728" stroke="black"/>"##,
                last[0] * scale - 6.0,
                last[1] * scale - 6.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="6" y="{:.1}" font-size="13" fill="{color}">{}</text>"#,
            h * scale + 14.0 + 18.0 * i as f64,
            escape(&layer.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_plot(
    path: &Path,
    header: &ArtifactHeader,
    maze: &Maze,
    specs: &[BarrierSpec],
    layers: &[PlotLayer],
) -> Result<(), HarnessError> {
    write_file(path, render_svg(maze, specs, layers, header).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::MazeConfig;
    use crate::specs::make_ellipse;

    fn header() -> ArtifactHeader {
        ArtifactHeader::new("test", "abc123", 42)
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let tau = Trajectory::from_rows(&[
            vec![0.1, -1.0 / 3.0],
            vec![1e-17, 2.5e300],
            vec![-0.0, std::f64::consts::PI],
        ])
        .unwrap();
        emit_trajectory(&path, &header(), &tau).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# artifact=cbf-diffusion"));
        assert!(text.lines().nth(1).unwrap() == "k,x_1,x_2");
        let (back, h) = read_trajectory(&path).unwrap();
        assert_eq!(back.as_flat(), tau.as_flat());
        assert_eq!(h.unwrap(), header());
    }

    #[test]
    fn json_documents_carry_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/r.json");
        emit_report(&path, &header(), &vec![1.5, 2.0]).unwrap();
        let doc: Document<Vec<f64>> = read_json(&path).unwrap();
        assert_eq!(doc.header, header());
        assert_eq!(doc.body, vec![1.5, 2.0]);
        assert!(read_json::<Vec<f64>>(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn unit_circle_contour() {
        let segs = marching_squares(|x, y| x * x + y * y - 1.0, [-1.5, 1.5], [-1.5, 1.5], 300, 300);
        assert!(segs.len() > 100);
        for s in &segs {
            for p in [s.a, s.b] {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn saddle_cell_gives_two_segments() {
        let segs = marching_squares(|x, y| x * y, [-1.0, 1.0], [-1.0, 1.0], 1, 1);
        assert_eq!(segs.len(), 2);
        assert!(marching_squares(|_, _| 1.0, [0.0, 1.0], [0.0, 1.0], 4, 4).is_empty());
    }

    #[test]
    fn svg_with_and_without_trajectories() {
        let maze = Maze::from_config(&MazeConfig::default()).unwrap();
        let empty = render_svg(&maze, &[], &[], &header());
        assert!(empty.contains("<svg") && empty.trim_end().ends_with("</svg>"));
        assert!(empty.contains("config_hash=abc123"));
        assert!(!empty.contains("polyline"));
        let spec = make_ellipse([4.0, 4.0], [0.7, 0.7]).unwrap();
        let layer = PlotLayer {
            label: "ros <1>".into(),
            points: vec![[0.5, 0.5], [4.0, 3.0], [7.5, 7.5]],
        };
        let full = render_svg(&maze, &[spec], &[layer], &header());
        assert!(full.contains("polyline") && full.contains("<path"));
        assert!(full.contains("ros &lt;1&gt;"));
    }
}

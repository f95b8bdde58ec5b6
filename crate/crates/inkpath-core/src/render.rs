//! Static top-down rendering of boards, episodes and score-map overlays as
//! binary PPM (P6) rasters or SVG documents. Output is deterministic:
//! identical inputs produce byte-identical files.

use thiserror::Error;

use crate::grid::Pos;
use crate::object::ObjectKind;
use crate::observe::ScoreMap;
use crate::planner::Path3D;
use crate::scenario::{CircuitLabel, ElectrodeId, Scenario};
use crate::task::EpisodeResult;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("cannot write {path}: {msg}")]
    UnwritableOutput { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary portable pixmap (P6).
    Ppm,
    /// Scalable vector document.
    Svg,
}

impl ImageFormat {
    /// Picks the format from a file extension; PPM is the fallback.
    pub fn from_path(path: &std::path::Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("svg") => ImageFormat::Svg,
            _ => ImageFormat::Ppm,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderSpec {
    pub format: ImageFormat,
    /// Pixels per cell.
    pub scale: u32,
    pub show_heights: bool,
    pub show_zones: bool,
    pub show_objects: bool,
    pub show_traces: bool,
    pub show_electrodes: bool,
    pub show_waste: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            format: ImageFormat::Ppm,
            scale: 2,
            show_heights: true,
            show_zones: true,
            show_objects: true,
            show_traces: true,
            show_electrodes: true,
            show_waste: true,
        }
    }
}

type Rgb = [u8; 3];

const BOARD: Rgb = [232, 227, 212];
const FORBIDDEN: Rgb = [150, 96, 58];
const WASTE: Rgb = [96, 120, 200];
const TRACE_A: Rgb = [24, 24, 24];
const TRACE_B: Rgb = [36, 64, 160];
const ROBOT_ELECTRODE: Rgb = [32, 140, 52];
const SOURCE_ELECTRODE: Rgb = [190, 42, 42];

fn trace_color(label: CircuitLabel) -> Rgb {
    match label {
        CircuitLabel::A => TRACE_A,
        CircuitLabel::B => TRACE_B,
    }
}

fn electrode_color(id: ElectrodeId) -> Rgb {
    match id {
        ElectrodeId::RobotA | ElectrodeId::RobotB => ROBOT_ELECTRODE,
        ElectrodeId::SourceA | ElectrodeId::SourceB => SOURCE_ELECTRODE,
    }
}

fn shade(c: Rgb, factor: f64) -> Rgb {
    c.map(|v| ((v as f64) * factor).round().clamp(0.0, 255.0) as u8)
}

fn blend(base: Rgb, over: Rgb, alpha: f64) -> Rgb {
    [0, 1, 2].map(|i| {
        (base[i] as f64 * (1.0 - alpha) + over[i] as f64 * alpha)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

/// Heat color for a normalized score in [0, 1]: blue through red to yellow.
fn heat(v: f64) -> Rgb {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * (v * 2.0).min(1.0)).round() as u8;
    let g = (255.0 * (v - 0.5).max(0.0) * 2.0).round() as u8;
    let b = (160.0 * (1.0 - v)).round() as u8;
    [r, g, b]
}

/// Flat per-cell colorization of the world; the common base for both
/// output formats.
fn cell_colors(
    scenario: &Scenario,
    traces: &[(CircuitLabel, Path3D)],
    spec: &RenderSpec,
    overlay: Option<&ScoreMap>,
) -> Vec<Rgb> {
    let (w, h) = (
        scenario.grid.width_cells as i32,
        scenario.grid.height_cells as i32,
    );
    let mut cells = vec![BOARD; (w * h) as usize];
    let idx = |p: Pos| (p.y * w + p.x) as usize;

    if spec.show_zones {
        for p in scenario.forbidden_cells() {
            cells[idx(p)] = FORBIDDEN;
        }
    }
    if spec.show_waste {
        // Outline only, in the style of a marked drop-off square.
        let z = scenario.waste_zone;
        for p in z.cells() {
            if !scenario.grid.contains(p) {
                continue;
            }
            let edge = p.x == z.x
                || p.y == z.y
                || p.x == z.x + z.w as i32 - 1
                || p.y == z.y + z.h as i32 - 1;
            if edge {
                cells[idx(p)] = WASTE;
            }
        }
    }
    if spec.show_objects {
        for object in &scenario.objects {
            let raster = object.raster(scenario.rotation_bins);
            for fc in &raster.cells {
                let p = Pos::new(object.pose.x + fc.dx, object.pose.y + fc.dy);
                if !scenario.grid.contains(p) {
                    continue;
                }
                let color = match object.kind {
                    ObjectKind::Obstacle { .. } => object.color,
                    ObjectKind::Ramp { .. } => {
                        if object.is_deck_cell(fc.local_j) {
                            shade(object.color, 0.75)
                        } else {
                            shade(object.color, 1.1)
                        }
                    }
                };
                cells[idx(p)] = color;
            }
        }
    }
    if spec.show_heights {
        let surface = scenario.effective_surface();
        for y in 0..h {
            for x in 0..w {
                let p = Pos::new(x, y);
                let hm = surface.height_mm(p);
                if hm > 0.0 {
                    let factor = 1.0 - (hm / 40.0).min(0.35);
                    cells[idx(p)] = shade(cells[idx(p)], factor);
                }
            }
        }
    }
    if spec.show_traces {
        for (label, path) in traces {
            for pc in &path.cells {
                let p = pc.pos();
                if scenario.grid.contains(p) {
                    cells[idx(p)] = trace_color(*label);
                }
            }
        }
        // Traces already committed into the scenario but not passed as
        // paths (e.g. a loaded scenario) still render.
        for trace in &scenario.traces {
            for (p, _) in &trace.cells {
                cells[idx(*p)] = trace_color(trace.label);
            }
        }
    }
    if spec.show_electrodes {
        for e in &scenario.electrodes {
            cells[idx(e.cell)] = electrode_color(e.id);
        }
    }
    if let Some(map) = overlay {
        // Per-cell max over rotation bins, normalized to the map's range.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in map.raw() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let span = (hi - lo).max(1e-12);
        for y in 0..h.min(map.height as i32) {
            for x in 0..w.min(map.width as i32) {
                let mut best = f64::NEG_INFINITY;
                for bin in 0..map.bins {
                    best = best.max(map.get(x as u32, y as u32, bin));
                }
                let norm = (best - lo) / span;
                cells[idx(Pos::new(x, y))] =
                    blend(cells[idx(Pos::new(x, y))], heat(norm), 0.45);
            }
        }
    }
    cells
}

fn ppm_bytes(scenario: &Scenario, cells: &[Rgb], scale: u32) -> Vec<u8> {
    let (w, h) = (scenario.grid.width_cells, scenario.grid.height_cells);
    let (pw, ph) = (w * scale, h * scale);
    let mut out = Vec::with_capacity(32 + (pw * ph * 3) as usize);
    out.extend_from_slice(format!("P6\n{pw} {ph}\n255\n").as_bytes());
    for py in 0..ph {
        let y = (py / scale) as usize;
        for px in 0..pw {
            let x = (px / scale) as usize;
            out.extend_from_slice(&cells[y * w as usize + x]);
        }
    }
    out
}

fn svg_bytes(scenario: &Scenario, cells: &[Rgb], scale: u32) -> Vec<u8> {
    let (w, h) = (
        scenario.grid.width_cells as usize,
        scenario.grid.height_cells as usize,
    );
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\" shape-rendering=\"crispEdges\">\n",
        w as u32 * scale,
        h as u32 * scale,
        w,
        h
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"{}\"/>\n",
        hex(BOARD)
    ));
    // Row-wise runs of non-background cells keep the document compact.
    for y in 0..h {
        let mut x = 0usize;
        while x < w {
            let color = cells[y * w + x];
            if color == BOARD {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && cells[y * w + x] == color {
                x += 1;
            }
            svg.push_str(&format!(
                "<rect x=\"{start}\" y=\"{y}\" width=\"{}\" height=\"1\" fill=\"{}\"/>\n",
                x - start,
                hex(color)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg.into_bytes()
}

fn hex(c: Rgb) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Renders a bare scenario.
pub fn render_scenario(
    scenario: &Scenario,
    spec: &RenderSpec,
    overlay: Option<&ScoreMap>,
) -> Vec<u8> {
    let cells = cell_colors(scenario, &[], spec, overlay);
    match spec.format {
        ImageFormat::Ppm => ppm_bytes(scenario, &cells, spec.scale),
        ImageFormat::Svg => svg_bytes(scenario, &cells, spec.scale),
    }
}

/// Renders a finished episode: final board plus the drawn circuits.
pub fn render_episode(
    result: &EpisodeResult,
    spec: &RenderSpec,
    overlay: Option<&ScoreMap>,
) -> Vec<u8> {
    let cells = cell_colors(&result.final_scenario, &result.traces, spec, overlay);
    match spec.format {
        ImageFormat::Ppm => ppm_bytes(&result.final_scenario, &cells, spec.scale),
        ImageFormat::Svg => svg_bytes(&result.final_scenario, &cells, spec.scale),
    }
}

pub fn write_image(path: &std::path::Path, bytes: &[u8]) -> Result<(), RenderError> {
    std::fs::write(path, bytes).map_err(|e| RenderError::UnwritableOutput {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::task::{generate, TaskKind};

    #[test]
    fn empty_scenario_renders_uniform_background_at_expected_size() {
        let s = Scenario::empty(GridSpec::default(), TaskKind::RemoveObstacle, 0, false);
        let spec = RenderSpec {
            show_electrodes: false,
            show_waste: false,
            ..RenderSpec::default()
        };
        let bytes = render_scenario(&s, &spec, None);
        let header = b"P6\n640 480\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 640 * 480 * 3);
        assert!(body.chunks(3).all(|px| px == BOARD));
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = generate(TaskKind::AllInOne, 12).unwrap();
        let spec = RenderSpec::default();
        assert_eq!(
            render_scenario(&s, &spec, None),
            render_scenario(&s, &spec, None)
        );
        let svg_spec = RenderSpec {
            format: ImageFormat::Svg,
            ..spec
        };
        assert_eq!(
            render_scenario(&s, &svg_spec, None),
            render_scenario(&s, &svg_spec, None)
        );
    }

    #[test]
    fn svg_is_wellformed_enough() {
        let s = generate(TaskKind::BridgeForbiddenZone, 1).unwrap();
        let spec = RenderSpec {
            format: ImageFormat::Svg,
            ..RenderSpec::default()
        };
        let bytes = render_scenario(&s, &spec, None);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.ends_with("</svg>\n"));
        assert!(text.contains(&format!("fill=\"{}\"", hex(FORBIDDEN))));
    }

    #[test]
    fn overlay_changes_pixels() {
        let s = generate(TaskKind::RemoveObstacle, 2).unwrap();
        let mut map = crate::observe::ScoreMap::zeros(
            s.grid.width_cells,
            s.grid.height_cells,
            1,
        );
        map.set(100, 100, 0, 5.0);
        let spec = RenderSpec::default();
        let plain = render_scenario(&s, &spec, None);
        let with = render_scenario(&s, &spec, Some(&map));
        assert_ne!(plain, with);
        assert_eq!(plain.len(), with.len());
    }
}

//! Circle packing in the unit square, scored by the sum of radii.
//!
//! Text format (one circle per line, decimal literals, any ASCII whitespace
//! between fields, surrounding whitespace and trailing blank lines ignored):
//!
//! ```text
//! n=<k>
//! <x> <y> <r>      (k lines)
//! ```
//!
//! A packing is valid when every circle lies inside the square and no two
//! circles overlap, each up to [`PACKING_TOLERANCE`]. Invalid packings score
//! `sum(r) - penalty * (total overlap depth + total boundary excess)`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::eval::{Evaluator, EvaluatorIdentity, FnEvaluator};
use crate::model::{ImageRef, Score, SideInfo, SideInfoValue, TableRow};

pub const PACKING_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_PENALTY: f64 = 10.0;
pub const DEFAULT_CIRCLE_COUNT: usize = 26;
pub const RENDER_SIZE: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packing {
    pub circles: Vec<Circle>,
}

impl Packing {
    pub fn parse(text: &str, expected: Option<usize>) -> Result<Self, String> {
        let mut lines = text.lines().map(str::trim).enumerate();
        let (_, header) = lines.next().ok_or("empty packing text")?;
        let n: usize = header
            .strip_prefix("n=")
            .ok_or_else(|| format!("header must be \"n=<k>\", got {header:?}"))?
            .trim()
            .parse()
            .map_err(|e| format!("bad circle count in header: {e}"))?;
        if let Some(want) = expected {
            if n != want {
                return Err(format!("expected {want} circles, header declares {n}"));
            }
        }
        let mut circles = Vec::with_capacity(n);
        let mut trailing_blank = false;
        for (i, line) in lines {
            if line.is_empty() {
                trailing_blank = true;
                continue;
            }
            if trailing_blank {
                return Err(format!("line {}: content after a blank line", i + 1));
            }
            let fields: Vec<&str> = line.split_ascii_whitespace().collect();
            if fields.len() != 3 {
                return Err(format!("line {}: expected \"x y r\", got {line:?}", i + 1));
            }
            let mut v = [0.0; 3];
            for (slot, field) in v.iter_mut().zip(&fields) {
                *slot = field
                    .parse::<f64>()
                    .map_err(|e| format!("line {}: {field:?}: {e}", i + 1))?;
                if !slot.is_finite() {
                    return Err(format!("line {}: non-finite value {field:?}", i + 1));
                }
            }
            if v[2] <= 0.0 {
                return Err(format!("line {}: radius must be positive", i + 1));
            }
            circles.push(Circle {
                x: v[0],
                y: v[1],
                r: v[2],
            });
        }
        if circles.len() != n {
            return Err(format!("header declares {n} circles, found {}", circles.len()));
        }
        Ok(Self { circles })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n={}\n", self.circles.len());
        for c in &self.circles {
            let _ = writeln!(out, "{} {} {}", c.x, c.y, c.r);
        }
        out
    }

    pub fn sum_radii(&self) -> f64 {
        self.circles.iter().map(|c| c.r).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackingReport {
    pub sum_radii: f64,
    /// `(i, j, depth)` for pairs overlapping by more than the tolerance.
    pub overlaps: Vec<(usize, usize, f64)>,
    /// `(i, excess)` for circles crossing the boundary by more than the tolerance.
    pub boundary: Vec<(usize, f64)>,
}

impl PackingReport {
    pub fn is_valid(&self) -> bool {
        self.overlaps.is_empty() && self.boundary.is_empty()
    }

    pub fn total_overlap(&self) -> f64 {
        self.overlaps.iter().map(|o| o.2).sum()
    }

    pub fn total_boundary_excess(&self) -> f64 {
        self.boundary.iter().map(|b| b.1).sum()
    }
}

pub fn check_packing(packing: &Packing, tolerance: f64) -> PackingReport {
    let cs = &packing.circles;
    let mut overlaps = Vec::new();
    let mut boundary = Vec::new();
    for (i, c) in cs.iter().enumerate() {
        let room = c.x.min(1.0 - c.x).min(c.y).min(1.0 - c.y);
        let excess = c.r - room;
        if excess > tolerance {
            boundary.push((i, excess));
        }
        for (j, d) in cs.iter().enumerate().skip(i + 1) {
            let depth = c.r + d.r - (c.x - d.x).hypot(c.y - d.y);
            if depth > tolerance {
                overlaps.push((i, j, depth));
            }
        }
    }
    PackingReport {
        sum_radii: packing.sum_radii(),
        overlaps,
        boundary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub expected_circles: Option<usize>,
    pub penalty: f64,
    pub tolerance: f64,
    pub render: bool,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self {
            expected_circles: Some(DEFAULT_CIRCLE_COUNT),
            penalty: DEFAULT_PENALTY,
            tolerance: PACKING_TOLERANCE,
            render: true,
        }
    }
}

fn row(cells: &[(&str, String)]) -> TableRow {
    cells.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Scores packing text. Parse failures are returned as `Err` so the
/// evaluation host floors them with an `Error` entry.
pub fn score_packing(text: &str, config: &PackingConfig) -> Result<(Score, SideInfo), String> {
    let packing = Packing::parse(text, config.expected_circles)?;
    let report = check_packing(&packing, config.tolerance);
    let score = if report.is_valid() {
        report.sum_radii
    } else {
        report.sum_radii - config.penalty * (report.total_overlap() + report.total_boundary_excess())
    };
    let mut si = SideInfo::new();
    let mut put = |name: &str, v: SideInfoValue| si.insert(name, v).map_err(|e| e.to_string());
    put("sum_radii", SideInfoValue::Number(report.sum_radii))?;
    put(
        "valid",
        SideInfoValue::Text(if report.is_valid() { "yes" } else { "no" }.into()),
    )?;
    put("total_overlap", SideInfoValue::Number(report.total_overlap()))?;
    put(
        "total_boundary_excess",
        SideInfoValue::Number(report.total_boundary_excess()),
    )?;
    put(
        "overlaps",
        SideInfoValue::Table(
            report
                .overlaps
                .iter()
                .map(|(i, j, d)| row(&[("i", i.to_string()), ("j", j.to_string()), ("depth", d.to_string())]))
                .collect(),
        ),
    )?;
    put(
        "boundary_violations",
        SideInfoValue::Table(
            report
                .boundary
                .iter()
                .map(|(i, e)| row(&[("i", i.to_string()), ("excess", e.to_string())]))
                .collect(),
        ),
    )?;
    put(
        "circles",
        SideInfoValue::Table(
            packing
                .circles
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    row(&[
                        ("i", i.to_string()),
                        ("x", c.x.to_string()),
                        ("y", c.y.to_string()),
                        ("r", c.r.to_string()),
                    ])
                })
                .collect(),
        ),
    )?;
    if config.render {
        put(
            "render",
            SideInfoValue::ImageRef(ImageRef::from_bytes("image/png", &render_packing(&packing))),
        )?;
    }
    let score = Score::new(score).map_err(|e| e.to_string())?;
    Ok((score, si))
}

/// Grayscale PNG: white background, black circle outlines, y axis up.
pub fn render_packing(packing: &Packing) -> Vec<u8> {
    let size = RENDER_SIZE as i64;
    let mut pixels = vec![255u8; (size * size) as usize];
    let scale = (size - 1) as f64;
    let mut plot = |px: i64, py: i64| {
        if (0..size).contains(&px) && (0..size).contains(&py) {
            pixels[(py * size + px) as usize] = 0;
        }
    };
    for c in &packing.circles {
        let cx = (c.x * scale).round() as i64;
        let cy = ((1.0 - c.y) * scale).round() as i64;
        let radius = (c.r * scale).round().min(4.0 * scale) as i64;
        // Midpoint circle.
        let (mut x, mut y, mut err) = (radius, 0i64, 1 - radius);
        while x >= y {
            for (dx, dy) in [(x, y), (y, x), (-y, x), (-x, y), (-x, -y), (-y, -x), (y, -x), (x, -y)] {
                plot(cx + dx, cy + dy);
            }
            y += 1;
            if err < 0 {
                err += 2 * y + 1;
            } else {
                x -= 1;
                err += 2 * (y - x) + 1;
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, RENDER_SIZE, RENDER_SIZE);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header to memory");
        writer.write_image_data(&pixels).expect("png data to memory");
        writer.finish().expect("png finish to memory");
    }
    out
}

pub fn packing_evaluator(config: PackingConfig) -> Arc<dyn Evaluator> {
    Arc::new(FnEvaluator::new(
        EvaluatorIdentity::new("bench.circle_packing", "1"),
        move |text, _example| score_packing(text, &config).map(|(s, si)| (s.value(), si)),
    ))
}

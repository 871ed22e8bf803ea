//! Point-cloud files, normalization and synthetic datasets.
//!
//! Text formats only:
//!
//! * **xyz** — one point per line, `x y z [label]`, whitespace separated.
//!   Lines starting with `#` are comments.
//! * **ascii ply** — standard header; float `x y z`, optional uchar
//!   `red green blue` and int `label`. Other properties are skipped with a
//!   warning.
//! * **csv** — header row naming the columns (`x,y,z`, optionally
//!   `red,green,blue` and `label`); unknown columns are skipped with a warning.
//!
//! Loaded features are the positions, followed by colors in `[0, 1]` when the
//! file has them. Coordinates are written in shortest round-trip notation, so
//! a save/load cycle reproduces positions exactly.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Point, PointCloud};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Xyz,
    Ply,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::Config(format!("cannot infer format of {}", path.display())))?
            .parse()
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Xyz => "xyz",
            Format::Ply => "ply",
            Format::Csv => "csv",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" | "txt" | "xyz-text" => Ok(Format::Xyz),
            "ply" | "ascii-ply" => Ok(Format::Ply),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown point-cloud format {other:?}"))),
        }
    }
}

struct Raw {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    labels: Option<Vec<usize>>,
}

impl Raw {
    fn into_cloud<T: Scalar>(self, path: &Path) -> Result<PointCloud<T>> {
        if self.positions.is_empty() {
            return Err(parse_err(path, 0, "no points"));
        }
        let n = self.positions.len();
        let width = if self.colors.is_some() { 6 } else { 3 };
        let mut feats = Vec::with_capacity(n * width);
        let positions: Vec<Point<T>> = self.positions.iter().map(|p| p.map(cast)).collect();
        for (i, p) in positions.iter().enumerate() {
            feats.extend_from_slice(p);
            if let Some(c) = &self.colors {
                feats.extend(c[i].iter().map(|&v| cast::<T>(v)));
            }
        }
        let cloud = PointCloud::new(positions, Tensor::new(vec![n, width], feats)?)?;
        match self.labels {
            Some(l) => cloud.with_labels(l),
            None => Ok(cloud),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_num<V: FromStr>(path: &Path, line: usize, tok: &str) -> Result<V> {
    tok.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {tok:?} as a number")))
}

pub fn load_cloud<T: Scalar>(path: &Path, format: Format) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
    let raw = match format {
        Format::Xyz => parse_xyz(path, &text)?,
        Format::Ply => parse_ply(path, &text)?,
        Format::Csv => parse_csv(path, &text)?,
    };
    raw.into_cloud(path)
}

fn parse_xyz(path: &Path, text: &str) -> Result<Raw> {
    let mut positions = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 4 {
            return Err(parse_err(path, ln, format!("expected 3 or 4 columns, got {}", toks.len())));
        }
        let has_label = toks.len() == 4;
        if *labeled.get_or_insert(has_label) != has_label {
            return Err(parse_err(path, ln, "inconsistent label column"));
        }
        positions.push([
            parse_num(path, ln, toks[0])?,
            parse_num(path, ln, toks[1])?,
            parse_num(path, ln, toks[2])?,
        ]);
        if has_label {
            labels.push(parse_num(path, ln, toks[3])?);
        }
    }
    Ok(Raw {
        positions,
        colors: None,
        labels: (labeled == Some(true)).then_some(labels),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Column {
    X,
    Y,
    Z,
    R,
    G,
    B,
    Label,
    Skip,
}

fn column_for(name: &str) -> Column {
    match name.trim().to_ascii_lowercase().as_str() {
        "x" => Column::X,
        "y" => Column::Y,
        "z" => Column::Z,
        "red" | "r" => Column::R,
        "green" | "g" => Column::G,
        "blue" | "b" => Column::B,
        "label" => Column::Label,
        _ => Column::Skip,
    }
}

fn collect_columns(
    path: &Path,
    cols: &[Column],
    rows: impl Iterator<Item = (usize, Vec<String>)>,
) -> Result<Raw> {
    for need in [Column::X, Column::Y, Column::Z] {
        if !cols.contains(&need) {
            return Err(parse_err(path, 1, "missing x, y or z column"));
        }
    }
    let has_color = [Column::R, Column::G, Column::B].iter().all(|c| cols.contains(c));
    let has_label = cols.contains(&Column::Label);
    let mut raw = Raw {
        positions: Vec::new(),
        colors: has_color.then(Vec::new),
        labels: has_label.then(Vec::new),
    };
    for (ln, toks) in rows {
        if toks.len() != cols.len() {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} values, got {}", cols.len(), toks.len()),
            ));
        }
        let mut p = [0.0; 3];
        let mut c = [0.0; 3];
        for (col, tok) in cols.iter().zip(&toks) {
            match col {
                Column::X => p[0] = parse_num(path, ln, tok)?,
                Column::Y => p[1] = parse_num(path, ln, tok)?,
                Column::Z => p[2] = parse_num(path, ln, tok)?,
                Column::R => c[0] = parse_num::<f64>(path, ln, tok)? / 255.0,
                Column::G => c[1] = parse_num::<f64>(path, ln, tok)? / 255.0,
                Column::B => c[2] = parse_num::<f64>(path, ln, tok)? / 255.0,
                Column::Label => {
                    if let Some(l) = raw.labels.as_mut() {
                        l.push(parse_num(path, ln, tok)?)
                    }
                }
                Column::Skip => {}
            }
        }
        raw.positions.push(p);
        if let Some(cs) = raw.colors.as_mut() {
            cs.push(c);
        }
    }
    Ok(raw)
}

fn parse_ply(path: &Path, text: &str) -> Result<Raw> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing ply magic")),
    }
    let mut count = None;
    let mut cols = Vec::new();
    let mut in_vertex = false;
    loop {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(path, 0, "unterminated header"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(path, ln, format!("unsupported ply format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(parse_num::<usize>(path, ln, n)?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => {
                return Err(parse_err(path, ln, "list properties on vertices are not supported"))
            }
            ["property", _, name] if in_vertex => {
                let c = column_for(name);
                if c == Column::Skip {
                    log::warn!("{}: skipping unknown vertex property {name}", path.display());
                }
                cols.push(c);
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(parse_err(path, ln, format!("unexpected header line {line:?}"))),
        }
    }
    let n = count.ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let rows: Vec<(usize, Vec<String>)> = lines
        .filter(|(_, l)| !l.is_empty())
        .take(n)
        .map(|(ln, l)| (ln, l.split_whitespace().map(str::to_string).collect()))
        .collect();
    if rows.len() != n {
        return Err(parse_err(path, 0, format!("header declares {n} vertices, found {}", rows.len())));
    }
    collect_columns(path, &cols, rows.into_iter())
}

fn parse_csv(path: &Path, text: &str) -> Result<Raw> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<Column> = headers
        .iter()
        .map(|h| {
            let c = column_for(h);
            if c == Column::Skip {
                log::warn!("{}: skipping unknown column {h}", path.display());
            }
            c
        })
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let ln = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((ln, rec.iter().map(str::to_string).collect()));
    }
    collect_columns(path, &cols, rows.into_iter())
}

/// Maps a scalar field onto a blue → white → red ramp; min and max hit the ends.
///
/// A constant field maps every point to the low end.
pub fn color_ramp<T: Scalar>(values: &[T]) -> Vec<[u8; 3]> {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            let t = if span > T::zero() {
                ((v - lo) / span).to_f64().unwrap_or(0.0)
            } else {
                0.0
            };
            ramp(t)
        })
        .collect()
}

pub const RAMP_LOW: [u8; 3] = [59, 76, 192];
pub const RAMP_HIGH: [u8; 3] = [180, 4, 38];
const RAMP_MID: [u8; 3] = [221, 221, 221];

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (a, b, u) = if t < 0.5 {
        (RAMP_LOW, RAMP_MID, t * 2.0)
    } else {
        (RAMP_MID, RAMP_HIGH, (t - 0.5) * 2.0)
    };
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * u).round() as u8;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a cloud; `scalar_field` replaces any colors with the ramp, and
/// `comments` go into the header (ply/xyz) before the data.
pub fn save_cloud<T: Scalar>(
    cloud: &PointCloud<T>,
    path: &Path,
    format: Format,
    scalar_field: Option<&[T]>,
    comments: &[String],
) -> Result<()> {
    let n = cloud.len();
    if let Some(s) = scalar_field {
        if s.len() != n {
            return Err(Error::Shape {
                op: "scalar field",
                left: vec![n],
                right: vec![s.len()],
            });
        }
    }
    let colors: Option<Vec<[u8; 3]>> = match scalar_field {
        Some(s) => Some(color_ramp(s)),
        None if cloud.feature_width() >= 6 => Some(
            (0..n)
                .map(|i| {
                    let r = cloud.features.row(i);
                    [3, 4, 5].map(|c| to_u8(r[c].to_f64().unwrap_or(0.0)))
                })
                .collect(),
        ),
        None => None,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::at_path(path, e))?);
    let labels = cloud.labels.as_ref();
    match format {
        Format::Xyz => {
            for c in comments {
                writeln!(w, "# {c}")?;
            }
            for (i, p) in cloud.positions.iter().enumerate() {
                write!(w, "{} {} {}", p[0], p[1], p[2])?;
                if let Some(l) = labels {
                    write!(w, " {}", l[i])?;
                }
                writeln!(w)?;
            }
        }
        Format::Ply => {
            writeln!(w, "ply\nformat ascii 1.0")?;
            for c in comments {
                writeln!(w, "comment {c}")?;
            }
            writeln!(w, "element vertex {n}")?;
            writeln!(w, "property float x\nproperty float y\nproperty float z")?;
            if colors.is_some() {
                writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
            }
            if labels.is_some() {
                writeln!(w, "property int label")?;
            }
            writeln!(w, "end_header")?;
            for (i, p) in cloud.positions.iter().enumerate() {
                write!(w, "{} {} {}", p[0], p[1], p[2])?;
                if let Some(c) = &colors {
                    write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
                }
                if let Some(l) = labels {
                    write!(w, " {}", l[i])?;
                }
                writeln!(w)?;
            }
        }
        Format::Csv => {
            let mut header = vec!["x", "y", "z"];
            if colors.is_some() {
                header.extend(["red", "green", "blue"]);
            }
            if labels.is_some() {
                header.push("label");
            }
            if scalar_field.is_some() {
                header.push("value");
            }
            writeln!(w, "{}", header.join(","))?;
            for (i, p) in cloud.positions.iter().enumerate() {
                write!(w, "{},{},{}", p[0], p[1], p[2])?;
                if let Some(c) = &colors {
                    write!(w, ",{},{},{}", c[i][0], c[i][1], c[i][2])?;
                }
                if let Some(l) = labels {
                    write!(w, ",{}", l[i])?;
                }
                if let Some(s) = scalar_field {
                    write!(w, ",{}", s[i])?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Centers on the centroid and scales so the farthest point has norm 1.
///
/// The leading three feature columns are replaced by the new positions when
/// they held the old ones.
pub fn normalize_unit_ball<T: Scalar>(cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
    if cloud.is_empty() {
        return Err(Error::InsufficientPoints {
            needed: 1,
            available: 0,
        });
    }
    let c = geometry::centroid(&cloud.positions);
    let centered: Vec<Point<T>> = cloud.positions.iter().map(|p| geometry::sub(p, &c)).collect();
    let r = centered.iter().map(geometry::norm).fold(T::zero(), T::max);
    if !(r > T::zero()) {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    let positions: Vec<Point<T>> = centered.iter().map(|p| p.map(|v| v / r)).collect();
    let mut out = cloud.clone();
    if cloud.feature_width() >= 3 && (0..cloud.len()).all(|i| cloud.features.row(i)[..3] == cloud.positions[i]) {
        for (i, p) in positions.iter().enumerate() {
            out.features.row_mut(i)[..3].copy_from_slice(p);
        }
    }
    out.positions = positions;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    /// Cylinder body (part 0) with a hemispherical cap (part 1).
    CappedCylinder,
    /// Cube body (part 0) with a cylindrical post (part 1) on its top face.
    CubePost,
}

impl ShapeFamily {
    pub fn is_composite(self) -> bool {
        matches!(self, ShapeFamily::CappedCylinder | ShapeFamily::CubePost)
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphere" => Ok(Self::Sphere),
            "cube" => Ok(Self::Cube),
            "torus" => Ok(Self::Torus),
            "cylinder" => Ok(Self::Cylinder),
            "capped_cylinder" => Ok(Self::CappedCylinder),
            "cube_post" => Ok(Self::CubePost),
            other => Err(Error::Config(format!("unknown shape family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Classification,
    PartSegmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub shapes: Vec<ShapeFamily>,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: SyntheticTask::Classification,
            shapes: vec![ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus],
            points_per_cloud: 1024,
            noise_sigma: 0.01,
            train: 500,
            test: 100,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.points_per_cloud == 0 {
            return Err(Error::Config("synthetic data needs shapes and points".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.task == SyntheticTask::PartSegmentation && !self.shapes.iter().all(|s| s.is_composite()) {
            return Err(Error::Config(
                "part segmentation needs composite shapes (capped_cylinder, cube_post)".into(),
            ));
        }
        Ok(())
    }

    /// Class count: shape families for classification, parts for segmentation.
    pub fn num_classes(&self) -> usize {
        match self.task {
            SyntheticTask::Classification => self.shapes.len(),
            SyntheticTask::PartSegmentation => 2 * self.shapes.len(),
        }
    }
}

/// One example: the cloud plus its class (classification) or per-point
/// part labels and distances to the analytic part boundary (segmentation).
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub cloud: PointCloud<T>,
    /// Class id, or the object category for segmentation.
    pub label: usize,
    pub boundary_distance: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub train: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
    pub num_classes: usize,
    pub num_categories: usize,
    /// Part ids belonging to each category (segmentation only).
    pub category_parts: Vec<Vec<usize>>,
}

struct Shape {
    points: Vec<[f64; 3]>,
    parts: Vec<usize>,
    boundary: Vec<f64>,
}

fn unit_normal(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = geometry::norm(&v);
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

fn sample_cube(rng: &mut impl Rng, half: f64) -> [f64; 3] {
    let face = rng.random_range(0..6);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    for (a, v) in p.iter_mut().enumerate() {
        *v = if a == axis { sign * half } else { rng.random_range(-half..half) };
    }
    p
}

/// Point on a closed cylinder of radius `r` spanning `z0..z1`; caps optional.
fn sample_cylinder(rng: &mut impl Rng, r: f64, z0: f64, z1: f64, bottom: bool, top: bool) -> [f64; 3] {
    let side = 2.0 * std::f64::consts::PI * r * (z1 - z0);
    let cap = std::f64::consts::PI * r * r;
    let total = side + cap * (bottom as u8 + top as u8) as f64;
    let u = rng.random_range(0.0..total);
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    if u < side {
        return [r * t.cos(), r * t.sin(), rng.random_range(z0..z1)];
    }
    let rho = r * rng.random::<f64>().sqrt();
    let z = if bottom && (u < side + cap || !top) { z0 } else { z1 };
    [rho * t.cos(), rho * t.sin(), z]
}

fn generate_shape(family: ShapeFamily, n: usize, rng: &mut impl Rng) -> Shape {
    let mut points = Vec::with_capacity(n);
    let mut parts = vec![0; n];
    let mut boundary = vec![f64::INFINITY; n];
    match family {
        ShapeFamily::Sphere => points.extend((0..n).map(|_| unit_normal(rng))),
        ShapeFamily::Cube => {
            let half = 1.0 / 3f64.sqrt();
            points.extend((0..n).map(|_| sample_cube(rng, half)));
        }
        ShapeFamily::Torus => {
            let (big, small) = (1.0, rng.random_range(0.25..0.45));
            while points.len() < n {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let w = big + small * v.cos();
                if rng.random::<f64>() * (big + small) > w {
                    continue;
                }
                points.push([w * u.cos(), w * u.sin(), small * v.sin()]);
            }
            let s = 1.0 / (big + small);
            points.iter_mut().for_each(|p| *p = p.map(|c| c * s));
        }
        ShapeFamily::Cylinder => {
            let h: f64 = rng.random_range(0.6..1.4);
            let s = 1.0 / (1.0 + h * h).sqrt();
            points.extend((0..n).map(|_| sample_cylinder(rng, 1.0, -h, h, true, true).map(|c| c * s)));
        }
        ShapeFamily::CappedCylinder => {
            // body z in [-h, 0], cap hemisphere of radius 1 above z = 0
            let h: f64 = rng.random_range(0.8..1.6);
            let side = 2.0 * std::f64::consts::PI * h;
            let bottom = std::f64::consts::PI;
            let dome = 2.0 * std::f64::consts::PI;
            for i in 0..n {
                let u = rng.random_range(0.0..side + bottom + dome);
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let p = if u < side {
                    [t.cos(), t.sin(), rng.random_range(-h..0.0)]
                } else if u < side + bottom {
                    let rho = rng.random::<f64>().sqrt();
                    [rho * t.cos(), rho * t.sin(), -h]
                } else {
                    let d = unit_normal(rng);
                    parts[i] = 1;
                    [d[0], d[1], d[2].abs()]
                };
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                boundary[i] = ((rho - 1.0).powi(2) + p[2] * p[2]).sqrt();
                points.push(p);
            }
            let zc = (1.0 - h) / 2.0;
            let r = (1.0 + (h + zc).powi(2)).sqrt().max(1.0 - zc);
            recentre(&mut points, &mut boundary, [0.0, 0.0, zc], r);
        }
        ShapeFamily::CubePost => {
            // cube [-1,1]^3 with a post of radius a on the top face up to z = 1 + l
            let a: f64 = rng.random_range(0.35..0.6);
            let l: f64 = rng.random_range(0.8..1.4);
            let post_side = 2.0 * std::f64::consts::PI * a * l;
            let post_top = std::f64::consts::PI * a * a;
            let cube = 24.0 - post_top;
            for i in 0..n {
                let u = rng.random_range(0.0..cube + post_side + post_top);
                let p = if u < cube {
                    loop {
                        let q = sample_cube(rng, 1.0);
                        if !(q[2] == 1.0 && q[0] * q[0] + q[1] * q[1] < a * a) {
                            break q;
                        }
                    }
                } else {
                    parts[i] = 1;
                    sample_cylinder(rng, a, 1.0, 1.0 + l, false, true)
                };
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                boundary[i] = ((rho - a).powi(2) + (p[2] - 1.0).powi(2)).sqrt();
                points.push(p);
            }
            let top = 1.0 + l;
            let zc = (top - 1.0) / 2.0;
            let r = (2.0f64 + (1.0 + zc).powi(2)).sqrt().max(a.hypot(top - zc));
            recentre(&mut points, &mut boundary, [0.0, 0.0, zc], r);
        }
    }
    Shape {
        points,
        parts,
        boundary,
    }
}

/// Moves `center` to the origin and scales by `1/radius`, boundary distances included.
fn recentre(points: &mut [[f64; 3]], boundary: &mut [f64], center: [f64; 3], radius: f64) {
    for p in points.iter_mut() {
        *p = geometry::sub(p, &center).map(|c| c / radius);
    }
    boundary.iter_mut().for_each(|d| *d /= radius);
}

fn rotate_z(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

fn make_sample<T: Scalar>(
    spec: &SyntheticTaskSpec,
    family_idx: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample<T>> {
    let family = spec.shapes[family_idx];
    let shape = generate_shape(family, spec.points_per_cloud, rng);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let positions: Vec<Point<T>> = shape
        .points
        .iter()
        .map(|&p| {
            let mut q = rotate_z(p, angle);
            if spec.noise_sigma > 0.0 {
                q.iter_mut().for_each(|c| *c += noise.sample(rng));
            }
            q.map(cast)
        })
        .collect();
    let mut cloud = PointCloud::from_positions(positions)?;
    match spec.task {
        SyntheticTask::Classification => Ok(Sample {
            cloud,
            label: family_idx,
            boundary_distance: None,
        }),
        SyntheticTask::PartSegmentation => {
            let offset = 2 * family_idx;
            cloud = cloud.with_labels(shape.parts.iter().map(|&p| p + offset).collect())?;
            let mut onehot = vec![T::zero(); spec.shapes.len()];
            onehot[family_idx] = T::one();
            cloud.object_class = Some(onehot);
            Ok(Sample {
                cloud,
                label: family_idx,
                boundary_distance: Some(shape.boundary.iter().map(|&d| cast(d)).collect()),
            })
        }
    }
}

/// Deterministic synthetic dataset; each sample draws from its own RNG stream.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticTaskSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let split = |stream: u64, count: usize| -> Result<Vec<Sample<T>>> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream((stream << 32) | i as u64);
                make_sample(spec, i % spec.shapes.len(), &mut rng)
            })
            .collect()
    };
    let num_categories = spec.shapes.len();
    Ok(Dataset {
        train: split(1, spec.train)?,
        test: split(2, spec.test)?,
        num_classes: spec.num_classes(),
        num_categories,
        category_parts: match spec.task {
            SyntheticTask::Classification => Vec::new(),
            SyntheticTask::PartSegmentation => (0..num_categories).map(|c| vec![2 * c, 2 * c + 1]).collect(),
        },
    })
}

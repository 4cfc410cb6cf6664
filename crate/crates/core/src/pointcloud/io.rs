use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointFormat {
    XyzAscii,
    Off,
    PlyAscii,
}

impl PointFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(PointFormat::XyzAscii),
            "off" => Some(PointFormat::Off),
            "ply" => Some(PointFormat::PlyAscii),
            _ => None,
        }
    }
}

impl FromStr for PointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-ascii" | "xyz" => Ok(PointFormat::XyzAscii),
            "off" => Ok(PointFormat::Off),
            "ply-ascii" | "ply" => Ok(PointFormat::PlyAscii),
            other => Err(Error::config(format!("unknown point format '{other}'"))),
        }
    }
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Lines {
            path,
            inner: text.lines().enumerate(),
        }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Some((i + 1, t));
            }
        }
        None
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let last = usize::MAX;
        self.next_content()
            .ok_or_else(|| self.err(last, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_xyz_row(lines: &Lines<'_>, line_no: usize, line: &str, min_fields: usize) -> Result<[f64; 3]> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < min_fields.max(3) {
        return Err(lines.err(
            line_no,
            format!("expected at least 3 coordinates, found {}", fields.len()),
        ));
    }
    let mut out = [0.0; 3];
    for (d, f) in fields.iter().take(3).enumerate() {
        out[d] = f
            .parse()
            .map_err(|_| lines.err(line_no, format!("invalid number '{f}'")))?;
    }
    Ok(out)
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = Lines::new(path, text);
    let mut pts = Vec::new();
    while let Some((n, line)) = lines.next_content() {
        pts.push(parse_xyz_row(&lines, n, line, 3)?);
    }
    Ok(pts)
}

fn parse_off(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = Lines::new(path, text);
    let (n, header) = lines.expect("OFF header")?;
    // Some exporters glue the counts onto the header line ("OFF4 4 0").
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| lines.err(n, "missing OFF header"))?
        .trim();
    let (count_line, counts) = if rest.is_empty() {
        lines.expect("vertex/face counts")?
    } else {
        (n, rest)
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| lines.err(count_line, format!("invalid count '{f}'"))))
        .collect::<Result<_>>()?;
    let vertices = *nums
        .first()
        .ok_or_else(|| lines.err(count_line, "missing vertex count"))?;
    let mut pts = Vec::with_capacity(vertices);
    for _ in 0..vertices {
        let (n, line) = lines.expect("vertex row")?;
        pts.push(parse_xyz_row(&lines, n, line, 3)?);
    }
    Ok(pts)
}

fn parse_ply(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = Lines::new(path, text);
    let (n, magic) = lines.expect("ply magic")?;
    if magic != "ply" {
        return Err(lines.err(n, "missing 'ply' magic line"));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    loop {
        let (n, line) = lines.expect("end_header")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(lines.err(n, format!("unsupported ply format '{fmt}'")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| lines.err(n, format!("invalid count '{count}'")))?,
                    );
                }
            }
            ["property", "list", ..] => {}
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => break,
            _ => return Err(lines.err(n, format!("unrecognized header line '{line}'"))),
        }
    }
    let count = vertex_count.ok_or_else(|| lines.err(0, "no vertex element"))?;
    let col = |axis: &str| {
        props
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| lines.err(0, format!("vertex element lacks property '{axis}'")))
    };
    let cols = [col("x")?, col("y")?, col("z")?];
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = lines.expect("vertex row")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < props.len() {
            return Err(lines.err(
                n,
                format!("expected {} values, found {}", props.len(), fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (d, &c) in cols.iter().enumerate() {
            p[d] = fields[c]
                .parse()
                .map_err(|_| lines.err(n, format!("invalid number '{}'", fields[c])))?;
        }
        pts.push(p);
    }
    Ok(pts)
}

/// Reads the vertices of a point file. Faces are ignored and nothing is
/// resampled.
pub fn load_point_file(path: impl AsRef<Path>, format: PointFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let pts = match format {
        PointFormat::XyzAscii => parse_xyz(path, &text)?,
        PointFormat::Off => parse_off(path, &text)?,
        PointFormat::PlyAscii => parse_ply(path, &text)?,
    };
    if pts.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no vertices", path.display())));
    }
    let points = Array2::from_shape_vec((pts.len(), 3), pts.into_iter().flatten().collect())
        .expect("rows of three");
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PointCloud::new(points, None, id)
}

pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 40);
    for r in cloud.points.rows() {
        out.push_str(&format!("{:e} {:e} {:e}\n", r[0], r[1], r[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes one xyz file per cloud plus `labels.csv` (`id,label,class_name`).
pub fn export_dataset(clouds: &[PointCloud], class_names: &[String], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = fs::File::create(dir.join("labels.csv"))?;
    writeln!(labels, "id,label,class_name")?;
    for cloud in clouds {
        write_xyz(cloud, dir.join(format!("{}.xyz", cloud.id)))?;
        match cloud.label {
            Some(l) => {
                let name = class_names.get(l).map(String::as_str).unwrap_or("");
                writeln!(labels, "{},{},{}", cloud.id, l, name)?;
            }
            None => writeln!(labels, "{},,", cloud.id)?,
        }
    }
    Ok(())
}

/// Loads a directory written by [`export_dataset`], returning the clouds in
/// `labels.csv` order and the class names indexed by label.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<(Vec<PointCloud>, Vec<String>)> {
    let dir = dir.as_ref();
    let labels_path: PathBuf = dir.join("labels.csv");
    let text = fs::read_to_string(&labels_path)?;
    let mut clouds = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = |message: String| Error::Parse {
            path: labels_path.clone(),
            line: i + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let label = if fields[1].is_empty() {
            None
        } else {
            let l: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("invalid label '{}'", fields[1])))?;
            if names.len() <= l {
                names.resize(l + 1, String::new());
            }
            names[l] = fields[2].to_string();
            Some(l)
        };
        let mut cloud = load_point_file(dir.join(format!("{}.xyz", fields[0])), PointFormat::XyzAscii)?;
        cloud.id = fields[0].to_string();
        cloud.label = label;
        clouds.push(cloud);
    }
    Ok((clouds, names))
}

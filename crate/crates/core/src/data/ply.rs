//! ASCII PLY reading and writing for point clouds.
//!
//! Writing emits `element vertex N` with double x/y/z at 9 significant
//! digits. Reading accepts any ASCII PLY whose vertex element carries
//! scalar x, y, z properties (extras like color are skipped).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::DataError;
use crate::cloud::PointCloud;

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    if cloud.is_empty() {
        return Err(DataError::EmptyCloud);
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "end_header")?;
    for p in cloud.iter() {
        writeln!(w, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2])?;
    }
    Ok(())
}

struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<String>,
}

pub fn read_ply(path: &Path) -> Result<PointCloud, DataError> {
    let mut lines = BufReader::new(File::open(path)?).lines();

    let magic = lines
        .next()
        .transpose()?
        .ok_or_else(|| DataError::MalformedPly("empty file".into()))?;
    if magic.trim() != "ply" {
        return Err(DataError::MalformedPly("missing ply magic".into()));
    }

    let mut elements: Vec<ElementDecl> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = lines
            .next()
            .transpose()?
            .ok_or_else(|| DataError::MalformedPly("header ended before end_header".into()))?;
        let line = line.trim().to_string();
        if line.is_empty() || line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        if line == "end_header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("format") => {
                let kind = parts.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(DataError::MalformedPly(format!(
                        "unsupported format '{kind}' (only ascii)"
                    )));
                }
                format_seen = true;
            }
            Some("element") => {
                let name = parts
                    .next()
                    .ok_or_else(|| DataError::MalformedPly("element without name".into()))?
                    .to_string();
                let count: usize = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| DataError::MalformedPly("element without count".into()))?;
                elements.push(ElementDecl {
                    name,
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let decl = elements
                    .last_mut()
                    .ok_or_else(|| DataError::MalformedPly("property before element".into()))?;
                let ty = parts
                    .next()
                    .ok_or_else(|| DataError::MalformedPly("property without type".into()))?;
                if ty == "list" {
                    if decl.name == "vertex" {
                        return Err(DataError::MalformedPly(
                            "list property in vertex element".into(),
                        ));
                    }
                    // skipped elements may carry lists; remember a marker
                    decl.properties.push("__list__".into());
                    continue;
                }
                let name = parts
                    .next()
                    .ok_or_else(|| DataError::MalformedPly("property without name".into()))?;
                decl.properties.push(name.to_string());
            }
            Some(other) => {
                return Err(DataError::MalformedPly(format!(
                    "unexpected header line '{other}'"
                )));
            }
            None => {}
        }
    }
    if !format_seen {
        return Err(DataError::MalformedPly("missing format line".into()));
    }

    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| DataError::MalformedPly("no vertex element".into()))?;
    let axis_index = |axis: &str| -> Result<usize, DataError> {
        vertex
            .properties
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| DataError::MalformedPly(format!("vertex lacks property {axis}")))
    };
    let (xi, yi, zi) = (axis_index("x")?, axis_index("y")?, axis_index("z")?);

    let mut cloud = PointCloud::default();
    for element in &elements {
        let is_vertex = element.name == "vertex";
        for row in 0..element.count {
            let line = lines.next().transpose()?.ok_or(DataError::TruncatedPly {
                expected: element.count,
                got: row,
            })?;
            if !is_vertex {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < element.properties.len() {
                return Err(DataError::MalformedPly(format!(
                    "vertex row {row} has {} of {} values",
                    tokens.len(),
                    element.properties.len()
                )));
            }
            let parse = |i: usize| -> Result<f64, DataError> {
                let v: f64 = tokens[i]
                    .parse()
                    .map_err(|_| DataError::MalformedPly(format!("bad number '{}'", tokens[i])))?;
                if !v.is_finite() {
                    return Err(DataError::NonFiniteValue);
                }
                Ok(v)
            };
            cloud.push([parse(xi)?, parse(yi)?, parse(zi)?]);
        }
        if is_vertex {
            break;
        }
    }
    Ok(cloud)
}

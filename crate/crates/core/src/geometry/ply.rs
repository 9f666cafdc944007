//! ASCII PLY with `x y z` and optional `nx ny nz` float vertex properties.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, ply_string(cloud))?;
    Ok(())
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let normals = cloud.normals();
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    if normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            let _ = writeln!(s, "property float {p}");
        }
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        if let Some(ns) = normals {
            let n = ns[i];
            let _ = write!(s, " {} {} {}", n[0] as f32, n[1] as f32, n[2] as f32);
        }
        s.push('\n');
    }
    s
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read_to_string(path)?)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, other)) => {
            return Err(parse_err(
                n,
                format!("expected 'ply' magic, found '{other}'"),
            ))
        }
        None => return Err(parse_err(1, "empty file")),
    }

    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => {
                return Err(parse_err(n, format!("unsupported format '{other}'")))
            }
            ["element", "vertex", c] => {
                count = Some(
                    c.parse()
                        .map_err(|_| parse_err(n, format!("bad vertex count '{c}'")))?,
                );
                in_vertex = true;
            }
            ["element", name, _] => {
                if count.is_none() {
                    return Err(parse_err(
                        n,
                        format!("element '{name}' before vertex element"),
                    ));
                }
                in_vertex = false;
            }
            ["property", ty, name] if in_vertex => {
                if !matches!(*ty, "float" | "float32" | "double" | "float64") {
                    return Err(parse_err(
                        n,
                        format!("unsupported vertex property type '{ty}'"),
                    ));
                }
                props.push((*name).to_string());
            }
            ["property", ..] => {}
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(parse_err(n, format!("malformed header line '{line}'"))),
        }
    }
    let header_end =
        header_end.ok_or_else(|| parse_err(text.lines().count() + 1, "missing end_header"))?;
    let count = count.ok_or_else(|| parse_err(header_end, "no vertex element declared"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (Some(x), Some(y), Some(z)) = (col("x"), col("y"), col("z")) else {
        return Err(parse_err(
            header_end,
            "vertex element lacks x, y, z properties",
        ));
    };
    let normal_cols = match (col("nx"), col("ny"), col("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };

    let mut points: Vec<Point3> = Vec::with_capacity(count);
    let mut normals: Vec<Point3> = Vec::new();
    let mut last_line = header_end;
    for (n, line) in lines {
        last_line = n;
        if line.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(parse_err(
                n,
                format!("more than the declared {count} vertices"),
            ));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(n, format!("bad number '{t}'")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(parse_err(
                n,
                format!("expected {} values, found {}", props.len(), vals.len()),
            ));
        }
        points.push([vals[x], vals[y], vals[z]]);
        if let Some([a, b, c]) = normal_cols {
            let v = [vals[a], vals[b], vals[c]];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len > 0.0 {
                normals.push(v.map(|q| q / len));
            } else {
                return Err(parse_err(n, "zero-length normal"));
            }
        }
    }
    if points.len() != count {
        return Err(parse_err(
            last_line + 1,
            format!("declared {count} vertices but found {}", points.len()),
        ));
    }
    let cloud =
        PointCloud::from_points(points).map_err(|e| parse_err(header_end, e.to_string()))?;
    if normal_cols.is_some() {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

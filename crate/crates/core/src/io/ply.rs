//! ASCII PLY point clouds. Only the `vertex` element is read; its `x y z`
//! properties may appear among others in any order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

pub fn parse_ply(text: &str, origin: &Path) -> Result<Vec<Vector3<f64>>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(origin, 1, "missing `ply` magic")),
    }

    // (name, count, property names) per element, in file order.
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_done = false;
    for (idx, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::parse(
                    origin,
                    idx + 1,
                    format!("only ASCII PLY is supported, found `{fmt}`"),
                ))
            }
            ["format", ..] | ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(origin, idx + 1, format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(origin, idx + 1, "property before element"))?;
                if el.0 == "vertex" {
                    return Err(Error::parse(
                        origin,
                        idx + 1,
                        "list properties on vertices are not supported",
                    ));
                }
                el.2.push("<list>".into());
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(origin, idx + 1, "property before element"))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => {
                return Err(Error::parse(
                    origin,
                    idx + 1,
                    format!("unexpected header line `{line}`"),
                ))
            }
        }
    }
    if !header_done {
        return Err(Error::parse(origin, 0, "missing end_header"));
    }

    let mut points = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            // Skip one line per element of other kinds (faces etc.).
            for _ in 0..*count {
                lines.next();
            }
            continue;
        }
        let col = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| Error::parse(origin, 0, format!("vertex element lacks `{axis}`")))
        };
        let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..*count {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "fewer vertices than declared"))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() < props.len() {
                return Err(Error::parse(origin, idx + 1, "vertex line has too few values"));
            }
            let num = |i: usize| -> Result<f64> {
                vals[i]
                    .parse()
                    .map_err(|_| Error::parse(origin, idx + 1, format!("bad coordinate `{}`", vals[i])))
            };
            points.push(Vector3::new(num(cx)?, num(cy)?, num(cz)?));
        }
    }
    Ok(points)
}

pub fn encode_ply(points: &[Vector3<f64>]) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    fs::write(path, encode_ply(points)).map_err(|e| Error::io(path, e))
}

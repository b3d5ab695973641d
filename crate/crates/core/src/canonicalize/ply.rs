use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Frame, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn header(out: &mut Vec<u8>, format: PlyFormat, frame: Frame, vertices: usize, faces: Option<usize>) {
    let f = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    out.extend_from_slice(format!("ply\nformat {f} 1.0\ncomment frame {}\n", frame.name()).as_bytes());
    out.extend_from_slice(
        format!("element vertex {vertices}\nproperty float x\nproperty float y\nproperty float z\n").as_bytes(),
    );
    if let Some(n) = faces {
        out.extend_from_slice(format!("element face {n}\nproperty list uchar int vertex_indices\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
}

fn encode(format: PlyFormat, frame: Frame, points: &[[f64; 3]], faces: Option<&[[usize; 3]]>) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, format, frame, points.len(), faces.map(<[_]>::len));
    match format {
        PlyFormat::Ascii => {
            for p in points {
                out.extend_from_slice(format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32).as_bytes());
            }
            for f in faces.unwrap_or_default() {
                out.extend_from_slice(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in points {
                for c in p {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            for f in faces.unwrap_or_default() {
                out.push(3);
                for i in f {
                    out.extend_from_slice(&(*i as i32).to_le_bytes());
                }
            }
        }
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Point cloud as PLY with float32 `x y z` vertex properties.
pub fn write_ply(path: &Path, pc: &PointCloud, format: PlyFormat) -> Result<()> {
    write_bytes(path, &encode(format, pc.frame, &pc.points, None))
}

/// Triangle mesh as PLY: the vertex block matches [`write_ply`], followed by
/// a face element.
pub fn write_ply_mesh(
    path: &Path,
    vertices: &[[f64; 3]],
    triangles: &[[usize; 3]],
    frame: Frame,
    format: PlyFormat,
) -> Result<()> {
    write_bytes(path, &encode(format, frame, vertices, Some(triangles)))
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    /// Text values are parsed at the declared precision.
    fn parse_text(self, w: &str) -> Option<f64> {
        match self {
            Scalar::F32 => w.parse::<f32>().ok().map(f64::from),
            _ => w.parse::<f64>().ok(),
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("PLY: {}", msg.into()))
}

/// Reads the vertex positions of an ASCII or binary little-endian PLY file.
/// Elements after the vertex block are ignored. The frame comes from a
/// `comment frame <name>` header line, defaulting to camera.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut r)? != "ply" {
        return Err(bad("missing magic"));
    }
    let mut format = None;
    let mut frame = Frame::Camera;
    let mut count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next(&mut r)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", "frame", name] => {
                frame = Frame::from_name(name).ok_or_else(|| bad(format!("unknown frame {name}")))?
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(bad("duplicate vertex element"));
                    }
                    count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                    seen_vertex = true;
                } else if !seen_vertex {
                    return Err(bad("vertex element must come first"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list property on vertices")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(bad(format!("unexpected header line '{l}'"))),
        }
    }
    let format = format.ok_or_else(|| bad("missing format line"))?;
    let n = count.ok_or_else(|| bad("no vertex element"))?;
    let slot = |axis: &str| {
        props
            .iter()
            .position(|(p, _)| p == axis)
            .ok_or_else(|| bad(format!("missing property {axis}")))
    };
    let idx = [slot("x")?, slot("y")?, slot("z")?];
    let mut points = Vec::with_capacity(n);
    match format {
        PlyFormat::Ascii => {
            let mut l = String::new();
            for i in 0..n {
                l.clear();
                r.read_line(&mut l).map_err(|e| Error::io(path, e))?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .zip(&props)
                    .map(|(w, (_, s))| s.parse_text(w))
                    .collect::<Option<_>>()
                    .ok_or_else(|| bad(format!("vertex {i} is not numeric")))?;
                if vals.len() < props.len() {
                    return Err(bad(format!("vertex {i} has too few values")));
                }
                points.push([vals[idx[0]], vals[idx[1]], vals[idx[2]]]);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let offsets: Vec<usize> = props
                .iter()
                .scan(0, |o, (_, s)| {
                    let cur = *o;
                    *o += s.size();
                    Some(cur)
                })
                .collect();
            let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
            let mut buf = vec![0u8; stride];
            for i in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| bad(format!("truncated at vertex {i}")))?;
                let get = |k: usize| props[k].1.decode(&buf[offsets[k]..]);
                points.push([get(idx[0]), get(idx[1]), get(idx[2])]);
            }
        }
    }
    let pc = PointCloud::new(points, frame);
    if let Some(i) = pc.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
        return Err(bad(format!("vertex {i} is not finite")));
    }
    Ok(pc)
}

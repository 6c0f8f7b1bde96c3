//! OFF and OBJ triangle-mesh loading with fan triangulation.

use std::path::Path;

use crate::error::{Error, Result};

/// Faces below this area are dropped at load time.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn parse(s: &str) -> Result<MeshFormat> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(MeshFormat::Off),
            "obj" => Ok(MeshFormat::Obj),
            other => Err(Error::config(format!("unknown mesh format '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn face_area(&self, face: usize) -> f64 {
        triangle_area(
            self.vertices[self.faces[face][0]],
            self.vertices[self.faces[face][1]],
            self.vertices[self.faces[face][2]],
        )
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|i| self.face_area(i)).sum()
    }
}

pub fn triangle_area(a: [f32; 3], b: [f32; 3], c: [f32; 3]) -> f64 {
    let u = [
        b[0] as f64 - a[0] as f64,
        b[1] as f64 - a[1] as f64,
        b[2] as f64 - a[2] as f64,
    ];
    let v = [
        c[0] as f64 - a[0] as f64,
        c[1] as f64 - a[1] as f64,
        c[2] as f64 - a[2] as f64,
    ];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

/// Loads and triangulates a mesh; polygons are fan-triangulated and
/// degenerate faces dropped (count reported through a warning).
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let raw = match format {
        MeshFormat::Off => parse_off(&text, &name),
        MeshFormat::Obj => parse_obj(&text, &name),
    }?;
    Ok(drop_degenerate(raw, &name))
}

/// Parses mesh text directly (handy for tests and converters).
pub fn parse_mesh(text: &str, format: MeshFormat, name: &str) -> Result<TriangleMesh> {
    let raw = match format {
        MeshFormat::Off => parse_off(text, name),
        MeshFormat::Obj => parse_obj(text, name),
    }?;
    Ok(drop_degenerate(raw, name))
}

fn drop_degenerate(mut mesh: TriangleMesh, name: &str) -> TriangleMesh {
    let before = mesh.faces.len();
    let vertices = mesh.vertices.clone();
    mesh.faces
        .retain(|f| triangle_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]) > DEGENERATE_AREA);
    let dropped = before - mesh.faces.len();
    if dropped > 0 {
        log::warn!("{}: dropped {} degenerate faces", name, dropped);
    }
    mesh
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            iter: text.lines().enumerate(),
        }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next_content(&mut self, comment: char) -> Option<(usize, &'a str)> {
        for (idx, line) in self.iter.by_ref() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with(comment) {
                continue;
            }
            return Some((idx + 1, trimmed));
        }
        None
    }
}

fn parse_off(text: &str, path: &str) -> Result<TriangleMesh> {
    let mut lines = Lines::new(text);
    let (hdr_no, header) = lines
        .next_content('#')
        .ok_or_else(|| parse_err(path, 1, "empty OFF file"))?;
    if !header.starts_with("OFF") {
        return Err(parse_err(path, hdr_no, "missing OFF header"));
    }
    // Counts may share the header line ("OFF v f e") or follow it.
    let rest = header["OFF".len()..].trim();
    let (counts_no, counts_line) = if rest.is_empty() {
        lines
            .next_content('#')
            .ok_or_else(|| parse_err(path, hdr_no, "missing vertex/face counts"))?
    } else {
        (hdr_no, rest)
    };
    let counts: Vec<usize> = counts_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(path, counts_no, "counts must be non-negative integers"))?;
    if counts.len() < 2 {
        return Err(parse_err(path, counts_no, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = lines
            .next_content('#')
            .ok_or_else(|| parse_err(path, counts_no, "unexpected end of vertex list"))?;
        let coords: Vec<f32> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, no, "vertex coordinates must be numbers"))?;
        if coords.len() != 3 {
            return Err(parse_err(path, no, "vertex line needs 3 coordinates"));
        }
        vertices.push([coords[0], coords[1], coords[2]]);
    }

    let mut faces = Vec::new();
    for _ in 0..nf {
        let (no, line) = lines
            .next_content('#')
            .ok_or_else(|| parse_err(path, counts_no, "unexpected end of face list"))?;
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, no, "face indices must be non-negative integers"))?;
        if fields.is_empty() || fields.len() != fields[0] + 1 {
            return Err(parse_err(path, no, "face line does not match its vertex count"));
        }
        let poly = &fields[1..];
        if poly.len() < 3 {
            return Err(parse_err(path, no, "faces need at least 3 vertices"));
        }
        for &v in poly {
            if v >= vertices.len() {
                return Err(parse_err(
                    path,
                    no,
                    format!("face index {} out of range for {} vertices", v, vertices.len()),
                ));
            }
        }
        fan_triangulate(poly, &mut faces);
    }
    Ok(TriangleMesh { vertices, faces })
}

fn parse_obj(text: &str, path: &str) -> Result<TriangleMesh> {
    let mut vertices: Vec<[f32; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f32> = tokens
                    .by_ref()
                    .take(3)
                    .map(|t| t.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(path, no, "vertex coordinates must be numbers"))?;
                if coords.len() != 3 {
                    return Err(parse_err(path, no, "vertex line needs 3 coordinates"));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in tokens {
                    // "v", "v/vt", "v/vt/vn", "v//vn" — only the vertex index matters.
                    let first = tok.split('/').next().unwrap_or("");
                    let one_based: usize = first
                        .parse()
                        .map_err(|_| parse_err(path, no, format!("bad face index '{}'", tok)))?;
                    if one_based == 0 || one_based > vertices.len() {
                        return Err(parse_err(
                            path,
                            no,
                            format!(
                                "face index {} out of range for {} vertices",
                                one_based,
                                vertices.len()
                            ),
                        ));
                    }
                    poly.push(one_based - 1);
                }
                if poly.len() < 3 {
                    return Err(parse_err(path, no, "faces need at least 3 vertices"));
                }
                fan_triangulate(&poly, &mut faces);
            }
            // Normals, texcoords, groups, materials: ignored.
            _ => {}
        }
    }
    Ok(TriangleMesh { vertices, faces })
}

fn fan_triangulate(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for i in 1..poly.len() - 1 {
        out.push([poly[0], poly[i], poly[i + 1]]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_off_file() {
        let mesh = parse_mesh(
            "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
            MeshFormat::Off,
            "min.off",
        )
        .unwrap();
        assert_eq!(mesh.vertices.len(), 3);
        assert_eq!(mesh.faces.len(), 1);
    }

    #[test]
    fn off_counts_on_header_line() {
        let mesh = parse_mesh(
            "OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
            MeshFormat::Off,
            "hdr.off",
        )
        .unwrap();
        assert_eq!(mesh.faces.len(), 1);
    }

    #[test]
    fn obj_quad_becomes_two_triangles() {
        let mesh = parse_mesh(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
            MeshFormat::Obj,
            "quad.obj",
        )
        .unwrap();
        assert_eq!(mesh.faces.len(), 2);
        assert_eq!(mesh.faces[0], [0, 1, 2]);
        assert_eq!(mesh.faces[1], [0, 2, 3]);
    }

    #[test]
    fn face_index_at_vertex_count_is_parse_error_with_line() {
        let err = parse_mesh(
            "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n",
            MeshFormat::Off,
            "bad.off",
        )
        .unwrap_err();
        match err {
            crate::error::Error::Parse { line, .. } => assert_eq!(line, 6),
            other => panic!("expected parse error, got {}", other),
        }
    }

    #[test]
    fn obj_slash_indices_and_one_based() {
        let mesh = parse_mesh(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3\n",
            MeshFormat::Obj,
            "slash.obj",
        )
        .unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn degenerate_faces_are_dropped() {
        let mesh = parse_mesh(
            "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n2 0 0\n3 0 1 2\n3 0 1 3\n",
            MeshFormat::Off,
            "degen.off",
        )
        .unwrap();
        // The second face is collinear (area 0) and vanishes.
        assert_eq!(mesh.faces.len(), 1);
    }
}

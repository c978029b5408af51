//! Point-cloud file formats: whitespace XYZ and an ASCII-PLY subset.
//!
//! Coordinates are written with Rust's shortest-round-trip float formatting,
//! so save→load is value-exact and save→load→save is byte-identical. Colors
//! travel as 0–255 integers mapped to `[0, 1]` on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::patchify::PatchSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Xyz,
    Ply,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> FileFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => FileFormat::Ply,
            _ => FileFormat::Xyz,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    match FileFormat::from_path(path) {
        FileFormat::Xyz => load_xyz(path),
        FileFormat::Ply => load_ply(path),
    }
}

pub fn save_point_cloud(pc: &PointCloud, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Xyz => save_xyz(pc, path),
        FileFormat::Ply => save_ply(pc, path),
    }
}

// ── XYZ ────────────────────────────────────────────────────────────

fn load_xyz(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut coords = Vec::new();
    let mut colors: Vec<f64> = Vec::new();
    let mut has_color: Option<bool> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 6 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 or 6 fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 6];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("bad number `{f}`")))?;
        }
        let with_color = fields.len() == 6;
        match has_color {
            None => has_color = Some(with_color),
            Some(expected) if expected != with_color => {
                return Err(parse_err(path, lineno, "inconsistent column count"));
            }
            _ => {}
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if with_color {
            colors.extend([vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0]);
        }
    }
    if coords.is_empty() {
        return Err(parse_err(path, 1, "no points in file"));
    }
    let pc = PointCloud::new(coords)?;
    if has_color == Some(true) {
        pc.with_extras(3, colors)
    } else {
        Ok(pc)
    }
}

fn color_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn save_xyz(pc: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for (i, p) in pc.coords().iter().enumerate() {
            write!(w, "{} {} {}", p[0], p[1], p[2])?;
            if let Some(extras) = pc.extras() {
                debug_assert_eq!(extras.width, 3, "xyz files carry rgb extras");
                let row = &extras.data[i * 3..(i + 1) * 3];
                write!(
                    w,
                    " {} {} {}",
                    color_byte(row[0]),
                    color_byte(row[1]),
                    color_byte(row[2])
                )?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

// ── ASCII PLY subset ───────────────────────────────────────────────

fn load_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let mut next_content = |expect: &str| -> Result<(usize, String)> {
        for (lineno, line) in lines.by_ref() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            let t = line.trim().to_string();
            if t.is_empty() {
                continue;
            }
            return Ok((lineno + 1, t));
        }
        Err(parse_err(
            path,
            0,
            format!("unexpected end of file, expected {expect}"),
        ))
    };

    let (lineno, magic) = next_content("ply magic")?;
    if magic != "ply" {
        return Err(parse_err(
            path,
            lineno,
            "not a ply file (missing `ply` magic)",
        ));
    }
    let (lineno, format) = next_content("format line")?;
    if format != "format ascii 1.0" {
        if format.starts_with("format binary") {
            return Err(Error::UnsupportedPly(
                "binary ply (only ascii 1.0 is supported)".into(),
            ));
        }
        return Err(parse_err(
            path,
            lineno,
            format!("bad format line `{format}`"),
        ));
    }

    let mut vertex_count: Option<usize> = None;
    let mut float_props: Vec<String> = Vec::new();
    let mut uchar_props: Vec<String> = Vec::new();
    loop {
        let (lineno, line) = next_content("header line")?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["comment", ..] => continue,
            ["end_header"] => break,
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse()
                        .map_err(|_| parse_err(path, lineno, format!("bad vertex count `{n}`")))?,
                );
            }
            ["element", other, ..] => {
                return Err(Error::UnsupportedPly(format!(
                    "element `{other}` (only vertex)"
                )));
            }
            ["property", ty @ ("float" | "float32" | "double" | "float64"), name] => {
                let _ = ty;
                float_props.push((*name).to_string());
            }
            ["property", ty @ ("uchar" | "uint8"), name] => {
                let _ = ty;
                uchar_props.push((*name).to_string());
            }
            ["property", ty, name] => {
                return Err(Error::UnsupportedPly(format!(
                    "property `{name}` of type `{ty}`"
                )));
            }
            _ => return Err(parse_err(path, lineno, format!("bad header line `{line}`"))),
        }
    }

    if float_props != ["x", "y", "z"] {
        return Err(Error::UnsupportedPly(format!(
            "vertex float properties {float_props:?} (need exactly x, y, z)"
        )));
    }
    let has_color = if uchar_props.is_empty() {
        false
    } else if uchar_props == ["red", "green", "blue"] {
        true
    } else {
        return Err(Error::UnsupportedPly(format!(
            "vertex uchar properties {uchar_props:?} (need red, green, blue)"
        )));
    };
    let n = vertex_count.ok_or_else(|| parse_err(path, 0, "missing `element vertex`"))?;
    if n == 0 {
        return Err(parse_err(path, 0, "vertex count is zero"));
    }

    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(if has_color { n * 3 } else { 0 });
    for _ in 0..n {
        let (lineno, line) = next_content("vertex line")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let want = if has_color { 6 } else { 3 };
        if fields.len() != want {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {want} fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0f64; 6];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("bad number `{f}`")))?;
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if has_color {
            colors.extend([vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0]);
        }
    }
    let pc = PointCloud::new(coords)?;
    if has_color {
        pc.with_extras(3, colors)
    } else {
        Ok(pc)
    }
}

fn save_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let has_color = pc.extras().is_some();
    let res: std::io::Result<()> = (|| {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", pc.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        if has_color {
            writeln!(w, "property uchar red")?;
            writeln!(w, "property uchar green")?;
            writeln!(w, "property uchar blue")?;
        }
        writeln!(w, "end_header")?;
        for (i, p) in pc.coords().iter().enumerate() {
            write!(w, "{} {} {}", p[0], p[1], p[2])?;
            if let Some(extras) = pc.extras() {
                let row = &extras.data[i * 3..(i + 1) * 3];
                write!(
                    w,
                    " {} {} {}",
                    color_byte(row[0]),
                    color_byte(row[1]),
                    color_byte(row[2])
                )?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

// ── patch-colored output ───────────────────────────────────────────

/// Distinct colors, one per patch: golden-ratio hue walk from a seeded
/// start, with a probe step on (rare) quantized collisions.
pub fn patch_colors(m: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = Rng::new(seed);
    let mut hue = rng.uniform();
    let mut used = std::collections::HashSet::new();
    let mut colors = Vec::with_capacity(m);
    for _ in 0..m {
        hue = (hue + 0.618_033_988_749_895) % 1.0;
        let mut h = hue;
        let mut rgb = hsv_to_rgb(h, 0.65, 0.95);
        while !used.insert((color_byte(rgb[0]), color_byte(rgb[1]), color_byte(rgb[2]))) {
            h = (h + 0.01) % 1.0;
            rgb = hsv_to_rgb(h, 0.65, 0.95);
        }
        colors.push(rgb);
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let sector = h6 as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// The gathered `M × K` patch points as one cloud, every patch painted with
/// its own color.
pub fn patch_colored_cloud(pc: &PointCloud, ps: &PatchSet, seed: u64) -> Result<PointCloud> {
    let colors = patch_colors(ps.num_patches(), seed);
    let mut coords = Vec::with_capacity(ps.num_patches() * ps.k);
    let mut extras = Vec::with_capacity(ps.num_patches() * ps.k * 3);
    for (m, color) in colors.iter().enumerate() {
        for &i in ps.patch(m) {
            coords.push(pc.coords()[i]);
            extras.extend_from_slice(color);
        }
    }
    PointCloud::new(coords)?.with_extras(3, extras)
}

/// Writes the assignment matrix as text: one patch per line, the key's
/// source index, a colon, then the K assigned point indices.
pub fn save_assignments(ps: &PatchSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for m in 0..ps.num_patches() {
            write!(w, "{}:", ps.keys.source_indices[m])?;
            for &i in ps.patch(m) {
                write!(w, " {i}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("pointplain-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn xyz_basic_two_points() {
        let p = tmp("basic.xyz");
        std::fs::write(&p, "0 0 0\n1 0 0\n").unwrap();
        let pc = load_point_cloud(&p).unwrap();
        assert_eq!(pc.len(), 2);
        assert!(pc.extras().is_none());
    }

    #[test]
    fn xyz_color_mapping_255_to_unit() {
        let p = tmp("color.xyz");
        std::fs::write(&p, "0 0 0 255 0 0\n").unwrap();
        let pc = load_point_cloud(&p).unwrap();
        let e = pc.extras().unwrap();
        assert_eq!(e.data, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn xyz_comments_and_blank_lines_ignored() {
        let p = tmp("comments.xyz");
        std::fs::write(&p, "# header\n\n1 2 3 # trailing\n").unwrap();
        let pc = load_point_cloud(&p).unwrap();
        assert_eq!(pc.coords(), &[[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn xyz_malformed_line_reports_line_number() {
        let p = tmp("bad.xyz");
        std::fs::write(&p, "0 0 0\n1 2\n").unwrap();
        let err = load_point_cloud(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn xyz_round_trip_exact_and_idempotent() {
        let mut rng = Rng::new(1);
        let coords: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.range(-5.0, 5.0),
                    rng.range(-5.0, 5.0),
                    rng.range(-5.0, 5.0),
                ]
            })
            .collect();
        let colors: Vec<f64> = (0..64 * 3).map(|_| rng.below(256) as f64 / 255.0).collect();
        let pc = PointCloud::new(coords)
            .unwrap()
            .with_extras(3, colors)
            .unwrap();

        let p1 = tmp("rt1.xyz");
        save_point_cloud(&pc, &p1, FileFormat::Xyz).unwrap();
        let back = load_point_cloud(&p1).unwrap();
        assert_eq!(pc, back, "xyz save→load must be value-exact");

        let p2 = tmp("rt2.xyz");
        save_point_cloud(&back, &p2, FileFormat::Xyz).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ply_round_trip_exact_and_idempotent() {
        let mut rng = Rng::new(2);
        let coords: Vec<[f64; 3]> = (0..32)
            .map(|_| {
                [
                    rng.range(-2.0, 2.0),
                    rng.range(-2.0, 2.0),
                    rng.range(-2.0, 2.0),
                ]
            })
            .collect();
        let colors: Vec<f64> = (0..32 * 3).map(|_| rng.below(256) as f64 / 255.0).collect();
        let pc = PointCloud::new(coords)
            .unwrap()
            .with_extras(3, colors)
            .unwrap();

        let p1 = tmp("rt1.ply");
        save_point_cloud(&pc, &p1, FileFormat::Ply).unwrap();
        let back = load_point_cloud(&p1).unwrap();
        assert_eq!(pc, back);

        let p2 = tmp("rt2.ply");
        save_point_cloud(&back, &p2, FileFormat::Ply).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ply_comments_accepted() {
        let p = tmp("comments.ply");
        std::fs::write(
            &p,
            "ply\nformat ascii 1.0\ncomment made somewhere\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.5 1.5 -2.5\n",
        )
        .unwrap();
        let pc = load_point_cloud(&p).unwrap();
        assert_eq!(pc.coords(), &[[0.5, 1.5, -2.5]]);
    }

    #[test]
    fn ply_binary_is_unsupported() {
        let p = tmp("binary.ply");
        std::fs::write(&p, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(
            load_point_cloud(&p),
            Err(Error::UnsupportedPly(_))
        ));
    }

    #[test]
    fn ply_extra_elements_unsupported() {
        let p = tmp("faces.ply");
        std::fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nelement face 0\nend_header\n0 0 0\n",
        )
        .unwrap();
        assert!(matches!(
            load_point_cloud(&p),
            Err(Error::UnsupportedPly(_))
        ));
    }

    #[test]
    fn patch_colors_distinct() {
        for m in [2usize, 7, 64] {
            let colors = patch_colors(m, 5);
            let mut quantized: Vec<[u8; 3]> = colors
                .iter()
                .map(|c| [color_byte(c[0]), color_byte(c[1]), color_byte(c[2])])
                .collect();
            quantized.sort_unstable();
            quantized.dedup();
            assert_eq!(quantized.len(), m);
        }
    }

    #[test]
    fn two_patch_colored_cloud_has_two_colors() {
        let pc = PointCloud::new(vec![
            [0.0; 3],
            [0.1, 0.0, 0.0],
            [5.0, 0.0, 0.0],
            [5.1, 0.0, 0.0],
        ])
        .unwrap();
        let keys = crate::geom::farthest_point_sampling(&pc, 2).unwrap();
        let ps = crate::patchify::fpc_group(&pc, &keys, 2).unwrap();
        let colored = patch_colored_cloud(&pc, &ps, 7).unwrap();
        let e = colored.extras().unwrap();
        let mut palette: Vec<[u8; 3]> = e
            .data
            .chunks(3)
            .map(|c| [color_byte(c[0]), color_byte(c[1]), color_byte(c[2])])
            .collect();
        palette.sort_unstable();
        palette.dedup();
        assert_eq!(palette.len(), 2);
    }
}

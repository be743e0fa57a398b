use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::image::Image;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Shortest-form decimal with 9 significant digits.
fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{e}")
    }
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + cloud.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {axis}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {c}");
    }
    s.push_str("end_header\n");
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            fmt_sig9(p[0]),
            fmt_sig9(p[1]),
            fmt_sig9(p[2]),
            c[0],
            c[1],
            c[2]
        );
    }
    s
}

/// Splits `text` into lines, keeping the byte offset of each line start.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |raw| {
        let start = offset;
        offset += raw.len();
        (start, raw.trim_end_matches(['\n', '\r']))
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
    Other,
}

/// Parses an ASCII PLY with per-vertex `x y z` and optional `red green
/// blue` (defaulting to mid-gray). Other elements must come after the
/// vertices and are ignored.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = lines_with_offsets(text);
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(0, "missing 'ply' magic")),
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex = false;
    let mut columns = Vec::new();
    let mut header_done = false;
    let mut body_offset = 0;
    for (off, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(off, "only 'format ascii 1.0' is supported"));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(off, "element without a name"))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(off, "element count is not an integer"))?;
                in_vertex = name == "vertex";
                if in_vertex {
                    if vertex_count.is_some() {
                        return Err(parse_err(off, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                } else if vertex_count.is_none() {
                    return Err(parse_err(off, "elements before 'vertex' are not supported"));
                }
            }
            Some("property") => {
                let ty = tok
                    .next()
                    .ok_or_else(|| parse_err(off, "property without a type"))?;
                if ty == "list" {
                    if in_vertex {
                        return Err(parse_err(off, "list properties on vertices are not supported"));
                    }
                    continue;
                }
                let name = tok
                    .next()
                    .ok_or_else(|| parse_err(off, "property without a name"))?;
                if in_vertex {
                    let col = match name {
                        "x" => Column::X,
                        "y" => Column::Y,
                        "z" => Column::Z,
                        "red" => Column::R,
                        "green" => Column::G,
                        "blue" => Column::B,
                        _ => Column::Other,
                    };
                    columns.push(col);
                }
            }
            Some("end_header") => {
                header_done = true;
                body_offset = off + line.len() + 1;
                break;
            }
            Some(other) => return Err(parse_err(off, format!("unknown header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(parse_err(text.len(), "missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| parse_err(body_offset, "no vertex element"))?;
    for need in [Column::X, Column::Y, Column::Z] {
        if !columns.contains(&need) {
            return Err(parse_err(body_offset, "vertex element lacks x, y or z"));
        }
    }
    let mut cloud = PointCloud::default();
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for v in 0..n {
        let (off, line) = body
            .next()
            .ok_or_else(|| parse_err(text.len(), format!("truncated body: {v} of {n} vertices")))?;
        let mut p = [0.0; 3];
        let mut c = [128u8; 3];
        let mut tokens = line.split_whitespace();
        for &col in &columns {
            let t = tokens
                .next()
                .ok_or_else(|| parse_err(off, format!("vertex {v} has too few values")))?;
            let bad = || parse_err(off, format!("vertex {v}: cannot parse '{t}'"));
            match col {
                Column::X | Column::Y | Column::Z => {
                    let k = col as usize;
                    p[k] = t.parse::<f64>().map_err(|_| bad())?;
                    if !p[k].is_finite() {
                        return Err(bad());
                    }
                }
                Column::R | Column::G | Column::B => {
                    c[col as usize - 3] = t.parse::<u8>().map_err(|_| bad())?;
                }
                Column::Other => {
                    t.parse::<f64>().map_err(|_| bad())?;
                }
            }
        }
        if tokens.next().is_some() {
            return Err(parse_err(off, format!("vertex {v} has too many values")));
        }
        cloud.points.push(p);
        cloud.colors.push(c);
    }
    Ok(cloud)
}

pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// Parses a binary PPM (`P6`, maxval 255). Header comments are allowed.
pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(0, "missing 'P6' magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(start, format!("expected header field {}", k + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(pos, format!("maxval {maxval} is not supported")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(pos, "zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() - pos < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: {} of {need} bytes", bytes.len() - pos),
        ));
    }
    Image::from_rgb8(w, h, &bytes[pos..pos + need])
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    atomic_write(path, ply_string(cloud).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(e.valid_up_to(), "file is not UTF-8"))?;
    parse_ply(text)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &ppm_bytes(img))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    parse_ppm(&std::fs::read(path)?)
}

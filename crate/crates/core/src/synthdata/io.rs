//! On-disk dataset format: 16-bit binary PGM for images and density maps,
//! CSV for head points, plus a plain-text manifest of sample basenames.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::scene::SceneSample;

const MAXVAL: u32 = 65535;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Writes a P5 PGM with maxval 65535 (big-endian samples). Values are
/// divided by `scale` before quantization; the scale is recorded in a
/// header comment so the reader can undo it. Images use scale 1; density
/// maps use max(1, max value) so arbitrary masses survive the trip.
pub fn write_pgm16(path: &Path, data: &[f64], w: usize, h: usize, scale: f64) -> Result<()> {
    assert_eq!(data.len(), w * h, "write_pgm16: shape mismatch");
    assert!(scale > 0.0, "write_pgm16: scale must be positive");
    let mut bytes = Vec::with_capacity(32 + 2 * data.len());
    bytes.extend_from_slice(format!("P5\n# scale={scale:?}\n{w} {h}\n{MAXVAL}\n").as_bytes());
    for &v in data {
        let q = ((v / scale) * MAXVAL as f64).round().clamp(0.0, MAXVAL as f64) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a P5 PGM written by [`write_pgm16`]. Returns (data, width, height)
/// with the recorded scale already applied.
pub fn read_pgm16(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut line = 1usize;
    let mut scale = 1.0f64;

    // whitespace-separated header tokens; '#' starts a comment to EOL
    let mut next_token = |bytes: &[u8], pos: &mut usize, line: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && (bytes[*pos] as char).is_ascii_whitespace() {
                if bytes[*pos] == b'\n' {
                    *line += 1;
                }
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return None;
            }
            if bytes[*pos] == b'#' {
                let mut comment = String::new();
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    comment.push(bytes[*pos] as char);
                    *pos += 1;
                }
                if let Some(v) = comment.strip_prefix("# scale=") {
                    if let Ok(s) = v.trim().parse::<f64>() {
                        scale = s;
                    }
                }
                continue;
            }
            let start = *pos;
            while *pos < bytes.len() && !(bytes[*pos] as char).is_ascii_whitespace() {
                *pos += 1;
            }
            return Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned());
        }
    };

    let magic = next_token(&bytes, &mut pos, &mut line)
        .ok_or_else(|| parse_err(path, line, "missing field: magic"))?;
    if magic != "P5" {
        return Err(parse_err(path, line, format!("bad magic {magic:?}, expected P5")));
    }
    let mut header_num = |name: &str, pos: &mut usize, line: &mut usize| -> Result<usize> {
        let tok = next_token(&bytes, pos, line)
            .ok_or_else(|| parse_err(path, *line, format!("missing field: {name}")))?;
        tok.parse::<usize>()
            .map_err(|_| parse_err(path, *line, format!("bad {name} {tok:?}")))
    };
    let w = header_num("width", &mut pos, &mut line)?;
    let h = header_num("height", &mut pos, &mut line)?;
    let maxval = header_num("maxval", &mut pos, &mut line)?;
    if maxval != MAXVAL as usize {
        return Err(parse_err(path, line, format!("unsupported maxval {maxval}, expected {MAXVAL}")));
    }
    // exactly one whitespace byte separates the header from the samples
    if pos >= bytes.len() {
        return Err(parse_err(path, line, "missing field: pixel data"));
    }
    pos += 1;
    let need = 2 * w * h;
    if bytes.len() - pos < need {
        return Err(parse_err(
            path,
            line,
            format!("truncated pixel data: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let q = u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]);
        data.push(q as f64 / MAXVAL as f64 * scale);
    }
    Ok((data, w, h))
}

/// Writes head points as CSV with an `x,y` header; `{:?}` formatting keeps
/// the f64 round-trip exact.
pub fn write_points_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "x,y")?;
    for &(x, y) in points {
        writeln!(f, "{x:?},{y:?}")?;
    }
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "x,y" => {}
        Some((i, header)) => {
            return Err(parse_err(path, i + 1, format!("bad header {header:?}, expected \"x,y\"")))
        }
        None => return Err(parse_err(path, 1, "missing field: header")),
    }
    let mut points = Vec::new();
    for (i, l) in lines {
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let (xs, ys) = l
            .split_once(',')
            .ok_or_else(|| parse_err(path, i + 1, format!("expected \"x,y\", got {l:?}")))?;
        let x: f64 = xs.trim().parse().map_err(|_| parse_err(path, i + 1, format!("bad x {xs:?}")))?;
        let y: f64 = ys.trim().parse().map_err(|_| parse_err(path, i + 1, format!("bad y {ys:?}")))?;
        points.push((x, y));
    }
    Ok(points)
}

pub fn image_path(dir: &Path, base: &str) -> PathBuf {
    dir.join(format!("{base}_img.pgm"))
}

pub fn density_path(dir: &Path, base: &str) -> PathBuf {
    dir.join(format!("{base}_den.pgm"))
}

pub fn points_path(dir: &Path, base: &str) -> PathBuf {
    dir.join(format!("{base}_pts.csv"))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

/// Saves one scene as three files under `dir`.
pub fn save_scene(dir: &Path, base: &str, sample: &SceneSample) -> Result<()> {
    let (h, w) = (sample.image.dims()[0], sample.image.dims()[1]);
    write_pgm16(&image_path(dir, base), sample.image.data(), w, h, 1.0)?;
    let dmax = sample.density.data().iter().copied().fold(0.0f64, f64::max);
    let dscale = if dmax > 1.0 { dmax } else { 1.0 };
    let (dh, dw) = (sample.density.dims()[0], sample.density.dims()[1]);
    write_pgm16(&density_path(dir, base), sample.density.data(), dw, dh, dscale)?;
    write_points_csv(&points_path(dir, base), &sample.points)?;
    Ok(())
}

pub fn load_scene(dir: &Path, base: &str) -> Result<SceneSample> {
    let (img, w, h) = read_pgm16(&image_path(dir, base))?;
    let (den, dw, dh) = read_pgm16(&density_path(dir, base))?;
    let points = read_points_csv(&points_path(dir, base))?;
    Ok(SceneSample {
        image: Tensor::new(vec![h, w], img).map_err(|e| Error::contract(e.to_string()))?,
        density: Tensor::new(vec![dh, dw], den).map_err(|e| Error::contract(e.to_string()))?,
        points,
    })
}

/// One basename per line.
pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let mut body = String::new();
    for n in names {
        body.push_str(n);
        body.push('\n');
    }
    fs::write(manifest_path(dir), body)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path)?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect())
}

/// Loads every sample listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    read_manifest(dir)?
        .iter()
        .map(|base| load_scene(dir, base))
        .collect()
}

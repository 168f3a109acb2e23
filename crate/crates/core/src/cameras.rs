//! Plain-text camera file.
//!
//! One record per camera, introduced by a line reading `camera`, followed by
//! `key value...` lines with fields fx, fy, cx, cy, width, height and a
//! 16-element row-major `w2c` array. Floats are written in Rust's shortest
//! round-trip decimal form, so write/read is lossless.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;
use thiserror::Error;

use crate::geometry::{CameraParams, GeometryError};

#[derive(Debug, Error)]
pub enum CameraFileError {
    #[error("camera {record}: missing field {field}")]
    MissingField { record: usize, field: &'static str },
    #[error("camera {record}: {msg}")]
    Malformed { record: usize, msg: String },
    #[error("line {0}: content outside a camera record")]
    StrayLine(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_cameras(cams: &[CameraParams], path: &Path) -> Result<(), CameraFileError> {
    let mut out = String::new();
    for cam in cams {
        out.push_str("camera\n");
        let _ = writeln!(out, "fx {}", cam.fx);
        let _ = writeln!(out, "fy {}", cam.fy);
        let _ = writeln!(out, "cx {}", cam.cx);
        let _ = writeln!(out, "cy {}", cam.cy);
        let _ = writeln!(out, "width {}", cam.width);
        let _ = writeln!(out, "height {}", cam.height);
        out.push_str("w2c");
        let m = cam.w2c();
        for r in 0..4 {
            for c in 0..4 {
                let _ = write!(out, " {}", m[(r, c)]);
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraParams>, CameraFileError> {
    let text = std::fs::read_to_string(path)?;
    parse_cameras(&text)
}

pub fn parse_cameras(text: &str) -> Result<Vec<CameraParams>, CameraFileError> {
    #[derive(Default)]
    struct Partial {
        fx: Option<f64>,
        fy: Option<f64>,
        cx: Option<f64>,
        cy: Option<f64>,
        width: Option<u32>,
        height: Option<u32>,
        w2c: Option<Matrix4<f64>>,
    }

    fn finish(p: Partial, record: usize) -> Result<CameraParams, CameraFileError> {
        let field = |f: Option<f64>, name: &'static str| {
            f.ok_or(CameraFileError::MissingField {
                record,
                field: name,
            })
        };
        let fx = field(p.fx, "fx")?;
        let fy = field(p.fy, "fy")?;
        let cx = field(p.cx, "cx")?;
        let cy = field(p.cy, "cy")?;
        let width = p.width.ok_or(CameraFileError::MissingField {
            record,
            field: "width",
        })?;
        let height = p.height.ok_or(CameraFileError::MissingField {
            record,
            field: "height",
        })?;
        let w2c = p.w2c.ok_or(CameraFileError::MissingField {
            record,
            field: "w2c",
        })?;
        Ok(CameraParams::new(fx, fy, cx, cy, w2c, width, height)?)
    }

    let mut cams = Vec::new();
    let mut current: Option<Partial> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "camera" {
            if let Some(p) = current.take() {
                cams.push(finish(p, cams.len())?);
            }
            current = Some(Partial::default());
            continue;
        }
        let record = cams.len();
        let Some(p) = current.as_mut() else {
            return Err(CameraFileError::StrayLine(lineno + 1));
        };
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default();
        let parse_f64 = |tok: Option<&str>| -> Result<f64, CameraFileError> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| CameraFileError::Malformed {
                    record,
                    msg: format!("bad value for {key}"),
                })
        };
        match key {
            "fx" => p.fx = Some(parse_f64(tokens.next())?),
            "fy" => p.fy = Some(parse_f64(tokens.next())?),
            "cx" => p.cx = Some(parse_f64(tokens.next())?),
            "cy" => p.cy = Some(parse_f64(tokens.next())?),
            "width" | "height" => {
                let v: u32 =
                    tokens
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| CameraFileError::Malformed {
                            record,
                            msg: format!("bad value for {key}"),
                        })?;
                if key == "width" {
                    p.width = Some(v);
                } else {
                    p.height = Some(v);
                }
            }
            "w2c" => {
                let vals: Vec<f64> = tokens.map(|t| t.parse()).collect::<Result<_, _>>().map_err(
                    |_| CameraFileError::Malformed {
                        record,
                        msg: "non-numeric w2c entry".into(),
                    },
                )?;
                if vals.len() != 16 {
                    return Err(CameraFileError::Malformed {
                        record,
                        msg: format!("w2c needs 16 values, got {}", vals.len()),
                    });
                }
                p.w2c = Some(Matrix4::from_row_slice(&vals));
            }
            other => {
                return Err(CameraFileError::Malformed {
                    record,
                    msg: format!("unknown field {other}"),
                })
            }
        }
    }
    if let Some(p) = current.take() {
        cams.push(finish(p, cams.len())?);
    }
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Point3, Vector3};

    #[test]
    fn round_trip_preserves_every_bit() {
        let cams = vec![
            CameraParams::from_look_at(
                Point3::new(0.3, -3.7, 2.2),
                Point3::origin(),
                Vector3::z(),
                549.31,
                548.77,
                255.5,
                255.5,
                512,
                512,
            )
            .unwrap(),
            CameraParams::new(
                100.0,
                100.0,
                31.5,
                31.5,
                Matrix4::identity(),
                64,
                64,
            )
            .unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cameras.txt");
        write_cameras(&cams, &p).unwrap();
        let back = read_cameras(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cams.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_field_is_reported() {
        let text = "camera\nfx 1\nfy 1\ncx 0\ncy 0\nwidth 4\nheight 4\n";
        assert!(matches!(
            parse_cameras(text),
            Err(CameraFileError::MissingField { field: "w2c", .. })
        ));
    }

    #[test]
    fn stray_line_is_an_error() {
        assert!(matches!(
            parse_cameras("fx 1\n"),
            Err(CameraFileError::StrayLine(1))
        ));
    }
}

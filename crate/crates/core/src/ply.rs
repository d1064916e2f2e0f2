//! Binary little-endian PLY in the layout used by 3DGS viewers.
//!
//! Colors are stored as zeroth-order SH coefficients, opacity as a logit and
//! scales as logs. Fields are `float` (f32), so a round trip is exact to
//! single precision.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::GaussianScene;

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

pub const PLY_FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

/// Exact header written for a scene of `n` vertices.
pub fn ply_header(n: usize) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {n}\n"));
    for f in PLY_FIELDS {
        h.push_str(&format!("property float {f}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn color_to_sh(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

pub fn sh_to_color(f: f64) -> f64 {
    f * SH_C0 + 0.5
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn write_ply(scene: &GaussianScene, mut out: impl Write) -> Result<()> {
    scene.validate()?;
    out.write_all(ply_header(scene.len()).as_bytes())?;
    let mut row = Vec::with_capacity(PLY_FIELDS.len() * 4);
    for i in 0..scene.len() {
        row.clear();
        let p = scene.positions[i];
        let c = scene.colors[i];
        let s = scene.log_scales[i];
        let q = scene.rotations[i];
        let vals = [
            p[0],
            p[1],
            p[2],
            color_to_sh(c[0]),
            color_to_sh(c[1]),
            color_to_sh(c[2]),
            logit(scene.opacities[i]),
            s[0],
            s[1],
            s[2],
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in vals {
            row.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn export_ply(scene: &GaussianScene, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(scene, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn import_ply(path: &Path) -> Result<GaussianScene> {
    read_ply(BufReader::new(File::open(path)?))
}

/// Reads any binary little-endian PLY whose vertex element has (at least)
/// the fields in [`PLY_FIELDS`] as `float` or `double`. Extra properties are
/// skipped, so files with higher-order SH coefficients load too.
pub fn read_ply(mut r: impl BufRead) -> Result<GaussianScene> {
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props: Vec<(String, usize)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported PLY format `{fmt}`")));
                }
            }
            ["element", name, n] => {
                if count.is_none() && *name != "vertex" {
                    return Err(Error::Format(format!("element `{name}` precedes the vertex element")));
                }
                in_vertex = *name == "vertex";
                if in_vertex {
                    if count.is_some() {
                        return Err(Error::Format("duplicate vertex element".into()));
                    }
                    count = Some(n.parse::<usize>().map_err(|_| Error::Format(format!("bad vertex count `{n}`")))?);
                }
            }
            ["property", ty, name] if in_vertex => {
                let size = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    other => return Err(Error::Format(format!("unsupported property type `{other}`"))),
                };
                props.push((name.to_string(), size));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ if !in_vertex => {}
            _ => return Err(Error::Format(format!("unrecognized header line `{l}`"))),
        }
    }
    let n = count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let mut offsets = [0usize; 14];
    let mut sizes = [0usize; 14];
    let stride: usize = props.iter().map(|p| p.1).sum();
    for (k, field) in PLY_FIELDS.iter().enumerate() {
        let mut off = 0;
        let mut found = false;
        for (name, size) in &props {
            if name == field {
                offsets[k] = off;
                sizes[k] = *size;
                found = true;
                break;
            }
            off += size;
        }
        if !found {
            return Err(Error::Format(format!("PLY is missing field `{field}`")));
        }
    }
    let mut scene = GaussianScene::with_capacity(n);
    let mut buf = vec![0u8; stride];
    for i in 0..n {
        r.read_exact(&mut buf).map_err(|e| Error::Format(format!("vertex {i}: {e}")))?;
        let mut v = [0.0f64; 14];
        for k in 0..14 {
            let b = &buf[offsets[k]..offsets[k] + sizes[k]];
            v[k] = if sizes[k] == 4 {
                f32::from_le_bytes(b.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(b.try_into().unwrap())
            };
            if v[k].is_nan() {
                return Err(Error::Validation(format!("vertex {i}: field `{}` is NaN", PLY_FIELDS[k])));
            }
        }
        scene.push(
            [v[0], v[1], v[2]],
            [v[10], v[11], v[12], v[13]],
            [v[7], v[8], v[9]],
            [sh_to_color(v[3]), sh_to_color(v[4]), sh_to_color(v[5])],
            cgs_autodiff::sigmoid(v[6]),
        );
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_scene(n: usize, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = GaussianScene::with_capacity(n);
        for _ in 0..n {
            let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            let nq = crate::scene::quat_normalize(&q).unwrap();
            s.push(
                [0; 3].map(|_| rng.random_range(-0.5..0.5)),
                nq,
                [0; 3].map(|_| rng.random_range(-6.0..-2.0)),
                [0; 3].map(|_| rng.random_range(0.0..1.0)),
                rng.random_range(0.01..0.99),
            );
        }
        s
    }

    #[test]
    fn sh_and_logit_zero_points() {
        assert_eq!(color_to_sh(0.5), 0.0);
        assert_eq!(logit(0.5), 0.0);
    }

    #[test]
    fn round_trip_through_bytes() {
        let s = random_scene(100, 4);
        let mut bytes = Vec::new();
        write_ply(&s, &mut bytes).unwrap();
        let back = read_ply(&bytes[..]).unwrap();
        assert_eq!(back.len(), 100);
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            for k in 0..3 {
                worst = worst.max((s.positions[i][k] - back.positions[i][k]).abs());
                worst = worst.max((s.colors[i][k] - back.colors[i][k]).abs());
                worst = worst.max((s.log_scales[i][k] - back.log_scales[i][k]).abs());
            }
            for k in 0..4 {
                worst = worst.max((s.rotations[i][k] - back.rotations[i][k]).abs());
            }
            worst = worst.max((s.opacities[i] - back.opacities[i]).abs());
        }
        assert!(worst < 1e-6, "worst field error {worst}");
    }

    #[test]
    fn header_is_exact() {
        let mut bytes = Vec::new();
        write_ply(&random_scene(3, 0), &mut bytes).unwrap();
        let h = ply_header(3);
        assert!(bytes.starts_with(h.as_bytes()));
        assert_eq!(bytes.len(), h.len() + 3 * 14 * 4);
    }

    #[test]
    fn missing_field_is_format_error() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(read_ply(text.as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn nan_is_validation_error() {
        let mut bytes = ply_header(1).into_bytes();
        for k in 0..14 {
            let v = if k == 2 { f32::NAN } else { 0.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(read_ply(&bytes[..]), Err(Error::Validation(_))));
    }

    #[test]
    fn extra_properties_are_skipped() {
        let s = random_scene(2, 9);
        let mut text = String::from("ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 2\n");
        text.push_str("property float nx\n");
        for f in PLY_FIELDS {
            text.push_str(&format!("property float {f}\n"));
        }
        text.push_str("property float f_rest_0\nend_header\n");
        let mut bytes = text.into_bytes();
        let mut plain = Vec::new();
        write_ply(&s, &mut plain).unwrap();
        let body = &plain[ply_header(2).len()..];
        for i in 0..2 {
            bytes.extend_from_slice(&7f32.to_le_bytes());
            bytes.extend_from_slice(&body[i * 56..(i + 1) * 56]);
            bytes.extend_from_slice(&1f32.to_le_bytes());
        }
        let back = read_ply(&bytes[..]).unwrap();
        assert!((back.positions[1][2] - s.positions[1][2]).abs() < 1e-6);
    }
}

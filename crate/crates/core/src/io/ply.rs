//! Binary little-endian PLY in the common splat layout: `x y z`, `f_dc_*`,
//! channel-major `f_rest_*`, `opacity`, `scale_*`, `rot_*` as f32, plus a
//! `uint id` property. Log-scales and opacity logits are stored raw.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Gaussian3D, GaussianCloud, Quat, Vec3};
use crate::sh;

pub const PLY_VERSION: u32 = 1;
const VERSION_COMMENT: &str = "gs4d_version";

fn rest_count(degree: usize) -> usize {
    3 * (sh::coeff_count(degree) - 1)
}

fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    names.extend((0..rest_count(degree)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn save_cloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let degree = cloud.sh_degree;
    let rest = sh::coeff_count(degree) - 1;
    let names = property_names(degree);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "comment {VERSION_COMMENT} {PLY_VERSION}")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for n in &names {
        writeln!(w, "property float {n}")?;
    }
    writeln!(w, "property uint id")?;
    writeln!(w, "end_header")?;
    for (g, id) in cloud.gaussians.iter().zip(&cloud.ids) {
        let mut vals: Vec<f64> = vec![g.mu.x, g.mu.y, g.mu.z, g.sh[0], g.sh[1], g.sh[2]];
        for c in 0..3 {
            for k in 1..=rest {
                vals.push(g.sh[3 * k + c]);
            }
        }
        vals.push(g.opacity_logit);
        vals.extend(g.log_scale.iter());
        vals.extend(g.rot.to_array());
        for v in vals {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Property {
    name: String,
    kind: Scalar,
    offset: usize,
}

/// Loads a splat PLY. Unknown vertex properties are skipped with a
/// warning; ids default to the vertex index when absent.
pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    let bytes = super::read_artifact(path)?;
    let bad = |m: String| Error::format(path, m);
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("no end_header line".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[end + marker.len()..];
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0;
    let mut in_vertex = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", f, ..] => return Err(bad(format!("unsupported format {f}"))),
            ["comment", key, v] if *key == VERSION_COMMENT => {
                let found: u32 = v.parse().map_err(|_| bad(format!("bad version {v}")))?;
                if found > PLY_VERSION {
                    return Err(Error::UnsupportedVersion { path: path.into(), found, supported: PLY_VERSION });
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if in_vertex || count.is_some() && *name != "vertex" {
                    // elements after the vertex block are never read
                    in_vertex = false;
                    continue;
                }
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
                } else {
                    return Err(bad(format!("element {name} precedes the vertex element")));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let kind = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                props.push(Property { name: name.to_string(), kind, offset: stride });
                stride += kind.size();
            }
            ["property", ..] => {}
            _ => return Err(bad(format!("unexpected header line '{line}'"))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let rest = props.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    let degree = (0..=sh::MAX_DEGREE)
        .find(|&d| rest_count(d) == rest)
        .ok_or_else(|| bad(format!("{rest} f_rest properties match no SH degree")))?;
    let wanted = property_names(degree);
    let mut index = Vec::with_capacity(wanted.len());
    for name in &wanted {
        let p = props.iter().find(|p| &p.name == name).ok_or_else(|| bad(format!("missing property {name}")))?;
        index.push(p);
    }
    let id_prop = props.iter().find(|p| p.name == "id");
    let extras: Vec<&str> =
        props.iter().filter(|p| p.name != "id" && !wanted.contains(&p.name)).map(|p| p.name.as_str()).collect();
    if !extras.is_empty() {
        log::warn!("{}: ignoring extra vertex properties {}", path.display(), extras.join(", "));
    }
    if body.len() < n * stride {
        return Err(bad(format!("truncated payload: {} bytes for {n} vertices of {stride}", body.len())));
    }
    let k = sh::coeff_count(degree);
    let mut cloud = GaussianCloud::new(degree);
    for v in 0..n {
        let rec = &body[v * stride..(v + 1) * stride];
        let val = |p: &Property| p.kind.read(&rec[p.offset..]);
        let vals: Vec<f64> = index.iter().map(|p| val(p)).collect();
        let mut shc = vec![0.0; 3 * k];
        shc[..3].copy_from_slice(&vals[3..6]);
        let mut i = 6;
        for c in 0..3 {
            for kk in 1..k {
                shc[3 * kk + c] = vals[i];
                i += 1;
            }
        }
        let g = Gaussian3D {
            mu: Vec3::new(vals[0], vals[1], vals[2]),
            opacity_logit: vals[i],
            log_scale: Vec3::new(vals[i + 1], vals[i + 2], vals[i + 3]),
            rot: Quat::new(vals[i + 4], vals[i + 5], vals[i + 6], vals[i + 7]),
            sh: shc,
        };
        let id = id_prop.map_or(v as u32, |p| val(p) as u32);
        cloud.push(id, g);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_cloud(degree: usize, n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = || rng.gen_range(-2.0f32..2.0) as f64;
        let k = sh::coeff_count(degree);
        let mut c = GaussianCloud::new(degree);
        for i in 0..n {
            c.push(
                7 * i as u32 + 3,
                Gaussian3D {
                    mu: Vec3::new(r(), r(), r()),
                    rot: Quat::new(r(), r(), r(), r()),
                    log_scale: Vec3::new(r(), r(), r()),
                    opacity_logit: r(),
                    sh: (0..3 * k).map(|_| r()).collect(),
                },
            );
        }
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for degree in 0..=3 {
            let c = f32_cloud(degree, 17, degree as u64);
            let p = dir.path().join(format!("c{degree}.ply"));
            save_cloud(&c, &p).unwrap();
            let back = load_cloud(&p).unwrap();
            assert_eq!(back, c);
            let p2 = dir.path().join("again.ply");
            save_cloud(&back, &p2).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn degree_zero_has_no_rest_properties() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        save_cloud(&f32_cloud(0, 2, 1), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains("f_rest"));
    }

    #[test]
    fn foreign_file_with_extras_loads() {
        // normals, an extra uchar and no id, as other splat tools write them
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("foreign.ply");
        let mut names: Vec<String> = vec!["x".into(), "y".into(), "z".into(), "nx".into(), "ny".into(), "nz".into()];
        names.extend(property_names(1).into_iter().skip(3));
        let mut out = Vec::new();
        out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n");
        for n in &names {
            out.extend_from_slice(format!("property float {n}\n").as_bytes());
        }
        out.extend_from_slice(b"property uchar flag\nend_header\n");
        for v in 0..2 {
            for (i, _) in names.iter().enumerate() {
                out.extend_from_slice(&((v * 100 + i) as f32).to_le_bytes());
            }
            out.push(9);
        }
        std::fs::write(&p, out).unwrap();
        let c = load_cloud(&p).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sh_degree, 1);
        assert_eq!(c.ids, vec![0, 1]);
        assert_eq!(c.gaussians[1].mu, Vec3::new(100.0, 101.0, 102.0));
        // f_dc_0 sits after the three normals
        assert_eq!(c.gaussians[0].sh[0], 6.0);
        // f_rest_0 is coefficient 1 of the red channel
        assert_eq!(c.gaussians[0].sh[3], 9.0);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        std::fs::write(&p, b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n").unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::Format { .. })));
        let good = dir.path().join("good.ply");
        save_cloud(&f32_cloud(0, 3, 2), &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::Format { .. })));
        let text = String::from_utf8_lossy(&std::fs::read(&good).unwrap()).replace("gs4d_version 1", "gs4d_version 9");
        std::fs::write(&p, text.as_bytes()).unwrap();
        assert!(matches!(load_cloud(&p), Err(Error::UnsupportedVersion { found: 9, .. })));
    }
}

//! Binary little-endian PLY in the layout 3DGS trainers export.
//!
//! Raw storage keeps opacity as a logit, scale as a log, and color as the
//! degree-0 spherical-harmonic coefficient `f_dc`. Activations are evaluated
//! in f64 from the f32 file values, so `save ∘ load` reproduces the stored
//! f32 bits and `load ∘ save ∘ load` is the identity on loaded splats.

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{Gaussian, GaussianSplat, IDENTITY_QUAT};
use crate::math::{self, logit, sigmoid};
use crate::{Error, Result};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const OPACITY_EPS: f64 = 1e-6;

/// Property order written by [`save_ply`].
const LAYOUT: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyReport {
    /// Vertex properties present in the file but not used (e.g. `f_rest_*`, normals).
    pub ignored_properties: Vec<String>,
    /// All-zero quaternions replaced by the identity.
    pub zero_quaternions: usize,
    /// Quaternions whose norm differed from 1 by more than 1e-6.
    pub renormalized: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SaveReport {
    /// Opacities outside the open interval (0, 1) clamped before the logit.
    pub clamped_opacities: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => f64::from(b[0] as i8),
            Self::U8 => f64::from(b[0]),
            Self::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Self::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Self::I32 => f64::from(i32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::U32 => f64::from(u32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::F32 => f64::from(f32::from_le_bytes(b[..4].try_into().unwrap())),
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("missing end_header".into()))?;
    let mut body_start = end + END.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) != Some(&b'\n') {
        return Err(Error::Format("end_header not followed by newline".into()));
    }
    body_start += 1;

    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("header is not valid UTF-8".into()))?;
    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            Some("format") => {
                if tok.get(1) != Some(&"binary_little_endian") {
                    return Err(Error::Format(format!(
                        "unsupported format '{}', expected binary_little_endian",
                        tok.get(1).unwrap_or(&"")
                    )));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let (name, count) = match tok.as_slice() {
                    [_, name, count] => (*name, count),
                    _ => return Err(Error::Format(format!("bad element line '{line}'"))),
                };
                let count = count
                    .parse()
                    .map_err(|_| Error::Format(format!("bad element count in '{line}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before any element".into()))?;
                match tok.as_slice() {
                    [_, "list", ..] => {
                        return Err(Error::Format(format!(
                            "list property in element '{}' is not supported",
                            el.name
                        )))
                    }
                    [_, ty, name] => {
                        let ty = ScalarType::parse(ty)
                            .ok_or_else(|| Error::Format(format!("unknown property type '{ty}'")))?;
                        el.props.push((name.to_string(), ty));
                    }
                    _ => return Err(Error::Format(format!("bad property line '{line}'"))),
                }
            }
            Some(other) => return Err(Error::Format(format!("unexpected header keyword '{other}'"))),
            None => {}
        }
    }
    if !saw_format {
        return Err(Error::Format("missing format line".into()));
    }
    Ok((elements, body_start))
}

/// Parses a splat from PLY bytes, returning non-fatal findings alongside.
pub fn read_ply(bytes: &[u8]) -> Result<(GaussianSplat, PlyReport)> {
    let (elements, mut offset) = parse_header(bytes)?;
    let mut report = PlyReport::default();

    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        offset += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| Error::Format("no vertex element".into()))?;

    let mut slots = [(0usize, ScalarType::F32); 14];
    let mut prop_offset = 0;
    let mut found = [false; 14];
    for (name, ty) in &vertex.props {
        match LAYOUT.iter().position(|p| p == name) {
            Some(i) => {
                slots[i] = (prop_offset, *ty);
                found[i] = true;
            }
            None => report.ignored_properties.push(name.clone()),
        }
        prop_offset += ty.size();
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(Error::Format(format!("missing vertex property '{}'", LAYOUT[i])));
    }
    let stride = vertex.stride();
    let needed = offset + vertex.count * stride;
    if bytes.len() < needed {
        return Err(Error::Format(format!(
            "truncated vertex data: need {needed} bytes, file has {}",
            bytes.len()
        )));
    }

    let mut gaussians = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let row = &bytes[offset + i * stride..offset + (i + 1) * stride];
        let mut raw = [0.0f64; 14];
        for (k, (off, ty)) in slots.iter().enumerate() {
            raw[k] = ty.read(&row[*off..]);
        }
        if let Some(k) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite '{}' at vertex {i}",
                LAYOUT[k]
            )));
        }
        let g = activate(&raw, &mut report);
        let values = g.to_array();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "activation of vertex {i} overflowed (field {k})"
            )));
        }
        gaussians.push(g);
    }
    if !report.ignored_properties.is_empty() {
        log::warn!(
            "ignoring vertex properties: {}",
            report.ignored_properties.join(", ")
        );
    }
    if report.zero_quaternions > 0 {
        log::warn!(
            "{} zero quaternion(s) replaced by identity",
            report.zero_quaternions
        );
    }
    Ok((GaussianSplat::new(gaussians), report))
}

fn activate(raw: &[f64; 14], report: &mut PlyReport) -> Gaussian {
    let q = [raw[10], raw[11], raw[12], raw[13]];
    let n = math::quat_norm(q);
    let rotation = if n == 0.0 {
        report.zero_quaternions += 1;
        IDENTITY_QUAT
    } else if (n - 1.0).abs() > 1e-6 {
        report.renormalized += 1;
        // Rounded to file precision so a save/load cycle keeps the bits.
        q.map(|c| f64::from((c / n) as f32))
    } else {
        q
    };
    Gaussian {
        center: [raw[0], raw[1], raw[2]],
        color: [
            0.5 + SH_C0 * raw[3],
            0.5 + SH_C0 * raw[4],
            0.5 + SH_C0 * raw[5],
        ],
        opacity: sigmoid(raw[6]),
        scale: [raw[7].exp(), raw[8].exp(), raw[9].exp()],
        rotation,
    }
}

pub fn load_ply(path: &Path) -> Result<GaussianSplat> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(read_ply(&bytes)?.0)
}

/// Serializes a splat into PLY bytes.
pub fn write_ply(splat: &GaussianSplat) -> (Vec<u8>, SaveReport) {
    let mut report = SaveReport::default();
    let mut out = Vec::with_capacity(256 + splat.count() * 56);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", splat.count()).as_bytes());
    for name in LAYOUT {
        out.extend_from_slice(format!("property float {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in &splat.gaussians {
        let mut o = g.opacity;
        if !(o > 0.0 && o < 1.0) {
            report.clamped_opacities += 1;
            o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        }
        let raw = [
            g.center[0],
            g.center[1],
            g.center[2],
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            logit(o),
            g.scale[0].ln(),
            g.scale[1].ln(),
            g.scale[2].ln(),
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
        ];
        for v in raw {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if report.clamped_opacities > 0 {
        log::warn!(
            "{} opacity value(s) clamped to [{OPACITY_EPS}, {}] before logit",
            report.clamped_opacities,
            1.0 - OPACITY_EPS
        );
    }
    (out, report)
}

/// Writes a splat atomically.
pub fn save_ply(splat: &GaussianSplat, path: &Path) -> Result<SaveReport> {
    let (bytes, report) = write_ply(splat);
    crate::io::write_atomic(path, &bytes)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn header(props: &[&str], n: usize) -> Vec<u8> {
        let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
        for p in props {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str("end_header\n");
        h.into_bytes()
    }

    fn file(rows: &[[f32; 14]]) -> Vec<u8> {
        let mut b = header(&LAYOUT, rows.len());
        for r in rows {
            for v in r {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    fn random_raw_file(n: usize, seed: u64) -> Vec<u8> {
        let mut r = rng::rng(seed);
        let rows: Vec<[f32; 14]> = (0..n)
            .map(|_| {
                let mut q = [0f32; 4];
                for c in &mut q {
                    *c = r.random_range(-1.0..1.0);
                }
                [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.7..1.7),
                    r.random_range(-1.7..1.7),
                    r.random_range(-1.7..1.7),
                    r.random_range(-8.0..8.0),
                    r.random_range(-9.0..-4.6),
                    r.random_range(-9.0..-4.6),
                    r.random_range(-9.0..-4.6),
                    q[0],
                    q[1],
                    q[2],
                    q[3],
                ]
            })
            .collect();
        file(&rows)
    }

    #[test]
    fn hand_computed_activation_table() {
        let rows = [
            [0.1, -0.2, 0.3, 0.0, 1.0, -1.0, 0.0, -5.0, -4.0, -6.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0],
            [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0, -10.0, -10.0, -10.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let (s, report) = read_ply(&file(&rows)).unwrap();
        assert_eq!(s.count(), 3);
        let g = &s.gaussians;
        assert_eq!(g[0].opacity, 0.5);
        assert!((g[0].color[1] - 0.782_094_791_773_878_1).abs() < 1e-15);
        assert!((g[0].color[2] - 0.217_905_208_226_121_86).abs() < 1e-15);
        assert!((g[0].scale[0] - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!((g[1].opacity - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert_eq!(g[1].rotation, [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(g[1].scale, [1.0; 3]);
        assert!((g[2].opacity - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert_eq!(g[2].rotation, IDENTITY_QUAT);
        assert_eq!(report.zero_quaternions, 1);
        assert_eq!(report.renormalized, 1);
        assert_eq!(g[0].center, [0.1f32 as f64, -0.2f32 as f64, 0.3f32 as f64]);
    }

    #[test]
    fn empty_splat_writes_valid_header() {
        let (bytes, _) = write_ply(&GaussianSplat::default());
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(text.ends_with("end_header\n"));
        let (s, _) = read_ply(&bytes).unwrap();
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn half_opacity_stores_zero_logit() {
        let (s, _) = read_ply(&random_raw_file(1, 1)).unwrap();
        let mut s = s;
        s.gaussians[0].opacity = 0.5;
        let (bytes, _) = write_ply(&s);
        let off = bytes.len() - 14 * 4 + 6 * 4;
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 0.0);
    }

    #[test]
    fn saturated_opacity_is_clamped_and_counted() {
        let (mut s, _) = read_ply(&random_raw_file(3, 2)).unwrap();
        s.gaussians[0].opacity = 0.0;
        s.gaussians[2].opacity = 1.0;
        let (bytes, report) = write_ply(&s);
        assert_eq!(report.clamped_opacities, 2);
        let (back, _) = read_ply(&bytes).unwrap();
        assert!((back.gaussians[0].opacity - 1e-6).abs() < 1e-9);
        assert!((back.gaussians[2].opacity - (1.0 - 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn random_splat_round_trip_is_exact() {
        let original = random_raw_file(100, 3);
        let (s, _) = read_ply(&original).unwrap();
        let (bytes, _) = write_ply(&s);
        let (back, _) = read_ply(&bytes).unwrap();
        let max_diff = s
            .gaussians
            .iter()
            .zip(&back.gaussians)
            .flat_map(|(a, b)| {
                a.to_array()
                    .into_iter()
                    .zip(b.to_array())
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
        // Re-saving reproduces identical bytes.
        assert_eq!(write_ply(&back).0, bytes);
    }

    #[test]
    fn missing_property_is_named() {
        let props: Vec<&str> = LAYOUT.iter().copied().filter(|p| *p != "scale_1").collect();
        let mut b = header(&props, 1);
        b.extend_from_slice(&[0u8; 13 * 4]);
        let err = read_ply(&b).unwrap_err().to_string();
        assert!(err.contains("scale_1"), "{err}");
    }

    #[test]
    fn non_finite_value_reports_vertex() {
        let mut rows = [[0.0f32; 14]; 3];
        for r in &mut rows {
            r[10] = 1.0;
        }
        rows[2][6] = f32::NAN;
        let err = read_ply(&file(&rows)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("vertex 2"), "{err}");
    }

    #[test]
    fn extra_properties_are_ignored() {
        let mut props: Vec<&str> = vec!["nx", "ny", "nz"];
        props.extend(LAYOUT);
        props.push("f_rest_0");
        let mut b = header(&props, 1);
        let vals: [f32; 18] = [
            9.0, 9.0, 9.0, 0.25, 0.5, 0.75, 0.0, 0.0, 0.0, 0.0, -5.0, -5.0, -5.0, 1.0, 0.0, 0.0,
            0.0, 3.0,
        ];
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let (s, report) = read_ply(&b).unwrap();
        assert_eq!(report.ignored_properties, vec!["nx", "ny", "nz", "f_rest_0"]);
        assert_eq!(s.gaussians[0].center, [0.25, 0.5, 0.75]);
    }

    #[test]
    fn rejects_ascii_format() {
        let b = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn load_save_load_is_identity(seed in any::<u64>(), n in 0usize..20) {
            let (s, _) = read_ply(&random_raw_file(n, seed)).unwrap();
            let (bytes, _) = write_ply(&s);
            let (back, _) = read_ply(&bytes).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}

//! File formats: model JSON, JSON-lines datasets, binary PGM masks, OBJ meshes
//! and fit results.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HamrError, Result};
use crate::fitter::{FitResult, ParamState, Sample, StageOutcome, TraceEntry};
use crate::losses::LossBreakdown;
use crate::model::{validate_model, HandModel, Mesh};
use crate::pose::{CameraParams, Joints3D, Keypoints2D};
use crate::raster::{ImageSize, Mask};

pub const MODEL_VERSION: &str = "hamr-model/1";
/// Pose-corrective features are `R(θ_k) - R(θ*_k)` for every non-root joint.
pub const POSE_FEATURE: &str = "rotation_minus_rest";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HamrError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HamrError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| HamrError::io(path, e))
}

fn parse_err(what: impl Into<String>, e: impl ToString) -> HamrError {
    HamrError::Parse { what: what.into(), msg: e.to_string() }
}

/// Reads any JSON document, e.g. loss weights or a schedule.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| parse_err(path.display().to_string(), e))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| parse_err("json output", e))?;
    write(path, text + "\n")
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    pose_feature: String,
    #[serde(flatten)]
    model: HandModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<String>,
}

pub fn model_from_json(text: &str) -> Result<HandModel> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_err("model", e))?;
    match probe.version.as_deref() {
        Some(MODEL_VERSION) => {}
        other => {
            return Err(HamrError::Version { found: other.unwrap_or("<missing>").to_string(), expected: MODEL_VERSION });
        }
    }
    let file: ModelFile = serde_json::from_str(text).map_err(|e| parse_err("model", e))?;
    if file.pose_feature != POSE_FEATURE {
        return Err(parse_err("model", format!("unsupported pose feature `{}`", file.pose_feature)));
    }
    validate_model(&file.model).into_result()?;
    Ok(file.model)
}

pub fn model_to_json(model: &HandModel) -> Result<String> {
    let file = ModelFile { version: MODEL_VERSION.into(), pose_feature: POSE_FEATURE.into(), model: model.clone() };
    serde_json::to_string(&file).map_err(|e| parse_err("model output", e))
}

/// Loads and validates a model file.
pub fn load_model(path: &Path) -> Result<HandModel> {
    model_from_json(&read(path)?)
}

pub fn save_model(path: &Path, model: &HandModel) -> Result<()> {
    write(path, model_to_json(model)? + "\n")
}

/// One dataset line. Unavailable points are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_size: ImageSize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints2d: Option<Vec<Option<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints3d: Option<Vec<Option<[f64; 3]>>>,
    /// Relative to the dataset file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_cam: Option<[f64; 3]>,
}

fn split<const D: usize>(points: &[Option<[f64; D]>]) -> (Vec<[f64; D]>, Vec<bool>) {
    points.iter().map(|p| (p.unwrap_or([0.0; D]), p.is_some())).unzip()
}

fn join<const D: usize>(points: &[[f64; D]], visible: &[bool]) -> Vec<Option<[f64; D]>> {
    points.iter().zip(visible).map(|(p, &v)| v.then_some(*p)).collect()
}

/// Reads a JSON-lines dataset; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| HamrError::Dataset { path: path.to_path_buf(), line: i + 1, msg };
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let mask = match &rec.mask_path {
            Some(p) => {
                let full = dir.join(p);
                let m = read_pgm(&full).map_err(|e| HamrError::MissingFile { path: full.clone(), msg: e.to_string() })?;
                Some(m)
            }
            None => None,
        };
        let sample = Sample {
            id: rec.id.clone(),
            image_size: rec.image_size,
            keypoints2d: rec.keypoints2d.as_deref().map(|p| {
                let (points, visible) = split(p);
                Keypoints2D { points, visible }
            }),
            joints3d: rec.joints3d.as_deref().map(|p| {
                let (points, visible) = split(p);
                Joints3D { points, visible }
            }),
            mask,
            gt_cam: rec.gt_cam.map(|c| CameraParams::new(c[0], c[1], c[2])),
        };
        if sample.keypoints2d.is_none() && sample.joints3d.is_none() && sample.mask.is_none() {
            return Err(err(format!("sample `{}` has no annotation", rec.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Writes a JSON-lines dataset; masks go to `masks/<id>.pgm` beside it.
pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut text = String::new();
    for s in samples {
        let mask_path = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.pgm", s.id);
                write_pgm(&dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        let rec = SampleRecord {
            id: s.id.clone(),
            image_size: s.image_size,
            keypoints2d: s.keypoints2d.as_ref().map(|k| join(&k.points, &k.visible)),
            joints3d: s.joints3d.as_ref().map(|j| join(&j.points, &j.visible)),
            mask_path,
            gt_cam: s.gt_cam.map(|c| [c.s, c.tx, c.ty]),
        };
        text.push_str(&serde_json::to_string(&rec).map_err(|e| parse_err("dataset output", e))?);
        text.push('\n');
    }
    write(path, text)
}

/// Binary (P5) PGM with values scaled to `[0, 1]` by the declared maxval.
pub fn parse_pgm(bytes: &[u8]) -> Result<Mask> {
    let bad = |msg: &str| parse_err("pgm", msg);
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut num = |what: &str| -> Result<usize> { token()?.parse().map_err(|_| bad(what)) };
    let width = num("bad width")?;
    let height = num("bad height")?;
    let maxval = num("bad maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let data = bytes.get(start..start + width * height).ok_or_else(|| bad("truncated raster"))?;
    Ok(Mask { height, width, data: data.iter().map(|&b| b as f64 / maxval as f64).collect() })
}

pub fn pgm_bytes(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| HamrError::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        HamrError::Parse { msg, .. } => HamrError::Parse { what: path.display().to_string(), msg },
        other => other,
    })
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write(path, pgm_bytes(mask))
}

/// `v x y z` lines followed by 1-based `f a b c` lines.
pub fn mesh_to_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

/// Reads the subset of OBJ written by [`mesh_to_obj`]; other records are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = || parse_err("obj", format!("line {}: `{line}`", i + 1));
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts.map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if c.len() < 3 {
                    return Err(bad());
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if idx.len() != 3 || idx.iter().any(|&v| v == 0) {
                    return Err(bad());
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    if faces.iter().flatten().any(|&v| v >= vertices.len()) {
        return Err(parse_err("obj", "face index out of range"));
    }
    Ok(Mesh { vertices, faces })
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    write(path, mesh_to_obj(mesh))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&read(path)?)
}

/// Serialized outcome of one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub id: String,
    pub state: ParamState,
    pub loss: LossBreakdown,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stages: Vec<StageOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

impl FitRecord {
    pub fn new(id: &str, result: &FitResult, keep_trace: bool) -> Self {
        let last = result.trace.last();
        FitRecord {
            id: id.to_string(),
            state: result.state.clone(),
            loss: last.map(|t| t.breakdown).unwrap_or_default(),
            objective: last.map_or(f64::NAN, |t| t.objective),
            iterations: result.iterations,
            converged: result.converged,
            stages: result.stages.clone(),
            trace: if keep_trace { result.trace.clone() } else { Vec::new() },
        }
    }
}

/// One [`FitRecord`] per line.
pub fn save_fits(path: &Path, fits: &[FitRecord]) -> Result<()> {
    let mut text = String::new();
    for f in fits {
        text.push_str(&serde_json::to_string(f).map_err(|e| parse_err("fit output", e))?);
        text.push('\n');
    }
    write(path, text)
}

pub fn load_fits(path: &Path) -> Result<Vec<FitRecord>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HamrError::Dataset { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })
        })
        .collect()
}

/// `HxW`, e.g. `128x96`.
pub fn parse_resolution(text: &str) -> Result<ImageSize> {
    let bad = || HamrError::invalid(format!("resolution must look like HxW, got `{text}`"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let size = ImageSize::new(h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    size.check()?;
    Ok(size)
}

/// Resolves `rel` against the directory containing `base`.
pub fn sibling(base: &Path, rel: &str) -> PathBuf {
    base.parent().map(|d| d.join(rel)).unwrap_or_else(|| PathBuf::from(rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_model, ToyConfig};

    #[test]
    fn model_round_trip_is_exact() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let back = model_from_json(&model_to_json(&model).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn model_version_checked() {
        let model = build_toy_model(&ToyConfig::default()).unwrap();
        let text = model_to_json(&model).unwrap().replace(MODEL_VERSION, "hamr-model/9");
        assert!(matches!(model_from_json(&text), Err(HamrError::Version { .. })));
        assert!(matches!(model_from_json("{\"name\": 1}"), Err(HamrError::Version { .. })));
        assert!(matches!(model_from_json("not json"), Err(HamrError::Parse { .. })));
    }

    #[test]
    fn invalid_model_rejected() {
        let mut model = build_toy_model(&ToyConfig::default()).unwrap();
        model.skinning_weights[3][0] += 0.5;
        let text = model_to_json(&model).unwrap();
        let err = model_from_json(&text).unwrap_err();
        assert!(matches!(err, HamrError::Validation(_)));
        assert!(err.to_string().contains("skinning_weights row 3"));
    }

    #[test]
    fn pgm_round_trip() {
        let mut m = Mask::filled(3, 5, 0.0);
        m.data[2] = 1.0;
        m.data[7] = 1.0;
        let back = parse_pgm(&pgm_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pgm_with_comment_and_low_maxval() {
        let mut bytes = b"P5\n# made by hand\n2 1\n1\n".to_vec();
        bytes.extend([0u8, 1]);
        let m = parse_pgm(&bytes).unwrap();
        assert_eq!((m.height, m.width), (1, 2));
        assert_eq!(m.data, vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_errors() {
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\0\0").is_err());
    }

    #[test]
    fn obj_round_trip() {
        let mesh = Mesh { vertices: vec![[0.1, -2.0, 3.5e-7], [1.0, 0.0, 0.0], [0.0, 1.0 / 3.0, 0.0]], faces: vec![[0, 1, 2]] };
        let text = mesh_to_obj(&mesh);
        assert!(text.starts_with("v 0.1 -2 0.00000035\n"));
        assert!(text.ends_with("f 1 2 3\n"));
        assert_eq!(parse_obj(&text).unwrap(), mesh);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("128x96").unwrap(), ImageSize::new(128, 96));
        assert!(parse_resolution("128").is_err());
        assert!(parse_resolution("0x5").is_err());
    }
}

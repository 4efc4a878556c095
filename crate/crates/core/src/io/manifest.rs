//! Scene manifests: one JSON header line followed by one JSON record per view.
//!
//! ```text
//! {"format":"nerfaug-scene","version":1,"intrinsics":{...},"bounds":{...},"units":"m"}
//! {"image":"images/000.png","mask":"masks/000.png","q":[1,0,0,0],"t":[0,0,-3],"split":"train"}
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::image_io::{load_image, load_mask};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraIntrinsics, Pose, Vec3};
use crate::imaging::{Image, Mask};

pub const SCENE_FORMAT: &str = "nerfaug-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    /// As written in the manifest (relative or absolute).
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub pose: Pose,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub intrinsics: CameraIntrinsics,
    pub bounds: Aabb,
    pub units: String,
    pub views: Vec<ViewRecord>,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    intrinsics: CameraIntrinsics,
    bounds: Aabb,
    #[serde(default)]
    units: String,
}

#[derive(Serialize, Deserialize)]
struct ViewLine {
    image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<PathBuf>,
    q: [f64; 4],
    t: [f64; 3],
    split: Split,
}

/// Training views loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedViews {
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub poses: Vec<Pose>,
}

impl SceneManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn views_in(&self, split: Split) -> impl Iterator<Item = &ViewRecord> {
        self.views.iter().filter(move |v| v.split == split)
    }

    /// Loads the images and masks of one split. Missing masks become all-foreground.
    pub fn load_split(&self, split: Split) -> Result<LoadedViews> {
        let mut out = LoadedViews {
            images: Vec::new(),
            masks: Vec::new(),
            poses: Vec::new(),
        };
        for v in self.views_in(split) {
            let img = load_image(&self.resolve(&v.image))?;
            let (w, h) = (self.intrinsics.width, self.intrinsics.height);
            if img.width != w || img.height != h {
                return Err(Error::invalid(format!(
                    "{} is {}x{}, manifest intrinsics say {w}x{h}",
                    v.image.display(),
                    img.width,
                    img.height
                )));
            }
            let mask = match &v.mask {
                Some(p) => load_mask(&self.resolve(p))?,
                None => Mask::filled(w, h, true),
            };
            out.images.push(img);
            out.masks.push(mask);
            out.poses.push(v.pose);
        }
        Ok(out)
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Renormalizes a scalar-first quaternion, warning when the correction is large.
pub(crate) fn unit_quaternion(q: [f64; 4]) -> std::result::Result<UnitQuaternion<f64>, String> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite quaternion {q:?}"));
    }
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let norm = raw.norm();
    if norm < 1e-12 {
        return Err(format!("quaternion {q:?} has zero norm"));
    }
    if (norm - 1.0).abs() > 1e-3 {
        log::warn!("renormalizing quaternion {q:?} (norm {norm})");
    }
    if (norm - 1.0).abs() <= 1e-12 {
        Ok(UnitQuaternion::new_unchecked(raw))
    } else {
        Ok(UnitQuaternion::new_normalize(raw))
    }
}

pub(crate) fn parse_pose(q: [f64; 4], t: [f64; 3]) -> std::result::Result<Pose, String> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite translation {t:?}"));
    }
    Ok(Pose::new(unit_quaternion(q)?, Vec3::from(t)))
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty manifest"))?;
    let header: HeaderLine =
        serde_json::from_str(header).map_err(|e| parse_err(path, hl, format!("header: {e}")))?;
    if header.format != SCENE_FORMAT {
        return Err(parse_err(path, hl, format!("unknown format {:?}", header.format)));
    }
    if header.version != SCENE_VERSION {
        return Err(parse_err(
            path,
            hl,
            format!("unsupported version {}", header.version),
        ));
    }
    header
        .intrinsics
        .validate()
        .map_err(|e| parse_err(path, hl, e.to_string()))?;
    let bounds = Aabb::new(header.bounds.min, header.bounds.max)
        .map_err(|e| parse_err(path, hl, e.to_string()))?;

    let mut views = Vec::new();
    for (ln, line) in lines {
        let rec: ViewLine = serde_json::from_str(line)
            .map_err(|e| parse_err(path, ln, format!("record {}: {e}", views.len())))?;
        let pose = parse_pose(rec.q, rec.t).map_err(|m| {
            parse_err(
                path,
                ln,
                format!("record {} ({}): {m}", views.len(), rec.image.display()),
            )
        })?;
        views.push(ViewRecord {
            image: rec.image,
            mask: rec.mask,
            pose,
            split: rec.split,
        });
    }
    Ok(SceneManifest {
        intrinsics: header.intrinsics,
        bounds,
        units: header.units,
        views,
        base_dir: path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    })
}

pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    let header = HeaderLine {
        format: SCENE_FORMAT.into(),
        version: SCENE_VERSION,
        intrinsics: manifest.intrinsics,
        bounds: manifest.bounds,
        units: manifest.units.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for v in &manifest.views {
        let line = ViewLine {
            image: v.image.clone(),
            mask: v.mask.clone(),
            q: v.pose.wxyz(),
            t: v.pose.translation(),
            split: v.split,
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SceneManifest {
        SceneManifest {
            intrinsics: CameraIntrinsics::centered(64.0, 64, 48),
            bounds: Aabb::cube(1.0),
            units: "m".into(),
            views: vec![
                ViewRecord {
                    image: "images/a.png".into(),
                    mask: Some("masks/a.png".into()),
                    pose: Pose::from_wxyz([0.3, 0.1, -0.7, 0.2], [0.1, 2.0, -3.0]).unwrap(),
                    split: Split::Train,
                },
                ViewRecord {
                    image: "images/b.png".into(),
                    mask: None,
                    pose: Pose::identity(),
                    split: Split::Heldout,
                },
            ],
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.jsonl");
        let mut m = sample();
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        m.base_dir = dir.path().to_path_buf();
        assert_eq!(back, m);
        assert_eq!(back.resolve(Path::new("images/a.png")), dir.path().join("images/a.png"));
    }

    #[test]
    fn zero_quaternion_names_record_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.jsonl");
        save_manifest(&sample(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let bad = text.replace("\"q\":[1.0,0.0,0.0,0.0]", "\"q\":[0,0,0,0]");
        assert_ne!(bad, text);
        fs::write(&path, bad).unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("record 1"), "{message}");
                assert!(message.contains("images/b.png"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_manifest(&dir.path().join("nope.jsonl")),
            Err(Error::Io { .. })
        ));
        let path = dir.path().join("scene.jsonl");
        save_manifest(&sample(), &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"image\": 3}\n");
        fs::write(&path, &text).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 4, .. })));
        let nan = fs::read_to_string(&path)
            .unwrap()
            .lines()
            .take(2)
            .collect::<Vec<_>>()
            .join("\n")
            .replace("\"t\":[0.1,2.0,-3.0]", "\"t\":[0.1,1e999,-3.0]");
        fs::write(&path, nan).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn slightly_off_quaternions_are_renormalized() {
        let q = unit_quaternion([1.0005, 0.0, 0.0, 0.0]).unwrap();
        assert!((q.quaternion().norm() - 1.0).abs() < 1e-12);
    }
}

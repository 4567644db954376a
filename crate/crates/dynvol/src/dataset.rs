//! Multi-view video container and the dataset directory layout:
//! `cameras.json` (calibration array), `meta.json` (timing, view split),
//! `views/<id>/frame_%05d.png` (8-bit RGB frames), and for synthetic scenes a
//! `scene_spec.json` echo so the oracle can be re-evaluated later.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::imagebuf::Image;
use crate::synth::SyntheticSceneSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub fps: f64,
    pub frame_count: usize,
    pub view_ids: Vec<String>,
    #[serde(default)]
    pub heldout_view_ids: Vec<String>,
}

/// Synchronized multi-view video: frame i of every view shows time i.
#[derive(Debug, Clone)]
pub struct MultiViewVideo {
    pub cameras: Vec<CameraModel>,
    /// View ids excluded from training, evaluation only.
    pub heldout: Vec<String>,
    pub fps: f64,
    /// frames[view][t], aligned with `cameras`.
    pub frames: Vec<Vec<Image>>,
}

impl MultiViewVideo {
    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.first().map_or(0, |v| v.len())
    }

    pub fn frame(&self, view: usize, t: usize) -> &Image {
        &self.frames[view][t]
    }

    pub fn view_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn is_heldout(&self, view: usize) -> bool {
        self.heldout.iter().any(|h| *h == self.cameras[view].id)
    }

    /// Indices of views eligible for training, in camera order.
    pub fn training_views(&self) -> Vec<usize> {
        (0..self.view_count())
            .filter(|v| !self.is_heldout(*v))
            .collect()
    }

    /// Uncompressed RGB8 byte count of every frame; the honest dataset size
    /// used by the model-compactness comparison.
    pub fn raw_rgb_bytes(&self) -> usize {
        self.frames
            .iter()
            .flat_map(|v| v.iter())
            .map(|f| f.raw_rgb_bytes())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Invalid("dataset has no views".into()));
        }
        if self.cameras.len() != self.frames.len() {
            return Err(Error::Invalid(format!(
                "{} cameras but {} frame sequences",
                self.cameras.len(),
                self.frames.len()
            )));
        }
        let t = self.frame_count();
        if t == 0 {
            return Err(Error::Invalid("dataset has no frames".into()));
        }
        for (cam, seq) in self.cameras.iter().zip(&self.frames) {
            cam.validate()?;
            if seq.len() != t {
                return Err(Error::Invalid(format!(
                    "frame count mismatch: view {} has {} frames, expected {t}",
                    cam.id,
                    seq.len()
                )));
            }
            for (i, frame) in seq.iter().enumerate() {
                if frame.width != cam.width || frame.height != cam.height {
                    return Err(Error::FrameDimensionMismatch {
                        view: cam.id.clone(),
                        frame: i,
                        got_w: frame.width,
                        got_h: frame.height,
                        want_w: cam.width,
                        want_h: cam.height,
                    });
                }
            }
        }
        for h in &self.heldout {
            if self.view_index(h).is_none() {
                return Err(Error::Invalid(format!(
                    "heldout view {h} not present in cameras"
                )));
            }
        }
        Ok(())
    }
}

pub fn frame_path(dir: &Path, view_id: &str, t: usize) -> PathBuf {
    dir.join("views").join(view_id).join(format!("frame_{t:05}.png"))
}

pub fn write_dataset(
    dir: &Path,
    video: &MultiViewVideo,
    scene: Option<&SyntheticSceneSpec>,
) -> Result<()> {
    video.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write_json = |name: &str, value: &serde_json::Value| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write_json("cameras.json", &serde_json::to_value(&video.cameras)?)?;
    let meta = DatasetMeta {
        fps: video.fps,
        frame_count: video.frame_count(),
        view_ids: video.cameras.iter().map(|c| c.id.clone()).collect(),
        heldout_view_ids: video.heldout.clone(),
    };
    write_json("meta.json", &serde_json::to_value(&meta)?)?;
    if let Some(spec) = scene {
        write_json("scene_spec.json", &serde_json::to_value(spec)?)?;
    }
    for (cam, seq) in video.cameras.iter().zip(&video.frames) {
        for (t, frame) in seq.iter().enumerate() {
            frame.save_png(&frame_path(dir, &cam.id, t))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewVideo> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let cameras: Vec<CameraModel> = serde_json::from_slice(&read("cameras.json")?)?;
    let meta: DatasetMeta = serde_json::from_slice(&read("meta.json")?)?;
    if meta.view_ids.len() != cameras.len() {
        return Err(Error::Invalid(format!(
            "meta lists {} views but cameras.json holds {}",
            meta.view_ids.len(),
            cameras.len()
        )));
    }
    for id in &meta.view_ids {
        if !cameras.iter().any(|c| c.id == *id) {
            return Err(Error::Invalid(format!("meta view {id} missing from cameras.json")));
        }
    }
    // Frame-count mismatches are reported before missing files so a view with
    // a short sequence gets the clearer diagnostic.
    for cam in &cameras {
        let have = (0..)
            .take_while(|t| frame_path(dir, &cam.id, *t).exists())
            .count();
        if have != meta.frame_count {
            return Err(Error::Invalid(format!(
                "frame count mismatch: view {} has {have} frames, expected {}",
                cam.id, meta.frame_count
            )));
        }
    }
    let mut frames = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mut seq = Vec::with_capacity(meta.frame_count);
        for t in 0..meta.frame_count {
            let path = frame_path(dir, &cam.id, t);
            if !path.exists() {
                return Err(Error::MissingFrame {
                    view: cam.id.clone(),
                    frame: t,
                    path,
                });
            }
            seq.push(Image::load_png(&path)?);
        }
        frames.push(seq);
    }
    let video = MultiViewVideo {
        cameras,
        heldout: meta.heldout_view_ids,
        fps: meta.fps,
        frames,
    };
    video.validate()?;
    Ok(video)
}

/// FNV-1a over the dataset's calibration, metadata, scene echo, and every
/// frame's bytes. Keys weight-map caches: any content change invalidates them.
pub fn dataset_digest(dir: &Path) -> Result<u64> {
    let mut h = Fnv1a::new();
    for name in ["cameras.json", "meta.json", "scene_spec.json"] {
        let path = dir.join(name);
        if path.exists() {
            h.update(&std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?);
        }
    }
    let meta: DatasetMeta = serde_json::from_slice(
        &std::fs::read(dir.join("meta.json"))
            .map_err(|e| Error::io(dir.join("meta.json").display().to_string(), e))?,
    )?;
    for id in &meta.view_ids {
        for t in 0..meta.frame_count {
            let path = frame_path(dir, id, t);
            if path.exists() {
                h.update(
                    &std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?,
                );
            }
        }
    }
    Ok(h.finish())
}

/// Minimal FNV-1a; a stable non-cryptographic fingerprint is all the cache
/// logic needs.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf29ce484222325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ring_cameras, synthesize_dataset, RingSpec, SynthConfig};

    fn sample_video(dir: &Path) -> MultiViewVideo {
        let spec = SyntheticSceneSpec {
            bounds: crate::synth::Bounds {
                min: [-2.0; 3],
                max: [2.0; 3],
            },
            static_emitters: vec![crate::synth::Emitter {
                center: [0.0, 0.0, 0.2],
                radius: 0.7,
                density: 2.5,
                color: [0.8, 0.4, 0.1],
            }],
            dynamic_emitters: vec![],
        };
        let cams = ring_cameras(&RingSpec {
            count: 2,
            width: 10,
            height: 8,
            ..RingSpec::default()
        });
        let cfg = SynthConfig {
            frame_count: 3,
            samples_per_ray: 64,
            heldout: vec!["cam01".into()],
            ..SynthConfig::default()
        };
        synthesize_dataset(&spec, &cams, &cfg, Some(dir)).unwrap()
    }

    #[test]
    fn round_trip_preserves_pixels_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let video = sample_video(dir.path());
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.view_count(), 2);
        assert_eq!(loaded.frame_count(), 3);
        assert_eq!(loaded.heldout, vec!["cam01".to_string()]);
        for v in 0..2 {
            for t in 0..3 {
                for (a, b) in video.frames[v][t]
                    .data
                    .iter()
                    .zip(&loaded.frames[v][t].data)
                {
                    assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn short_view_reports_frame_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        sample_video(dir.path());
        std::fs::remove_file(frame_path(dir.path(), "cam01", 2)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame count mismatch"), "{err}");
        assert!(err.contains("cam01"), "{err}");
    }

    #[test]
    fn missing_directory_is_an_error() {
        assert!(load_dataset(Path::new("/nonexistent/dynvol-test")).is_err());
    }

    #[test]
    fn digest_tracks_content_changes() {
        let dir = tempfile::tempdir().unwrap();
        sample_video(dir.path());
        let d1 = dataset_digest(dir.path()).unwrap();
        let d2 = dataset_digest(dir.path()).unwrap();
        assert_eq!(d1, d2);
        let p = frame_path(dir.path(), "cam00", 0);
        let mut img = Image::load_png(&p).unwrap();
        img.set(0, 0, [1.0, 1.0, 1.0]);
        img.save_png(&p).unwrap();
        assert_ne!(d1, dataset_digest(dir.path()).unwrap());
    }
}

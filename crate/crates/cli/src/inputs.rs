//! Loading and pairing of command inputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evmotion::events::{load_events, slice_windows, Event, EventSlice, OrderPolicy, SensorSize};
use evmotion::geometry::{CameraIntrinsics, DepthMap};
use evmotion::groundtruth::GtFrame;
use evmotion::io::manifest::{GtManifest, SCHEMA_VERSION};
use evmotion::io::pnm;
use serde::Serialize;

use crate::WindowArgs;

pub fn intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    CameraIntrinsics::load(path).with_context(|| format!("reading intrinsics {}", path.display()))
}

pub fn events(path: &Path, sensor: SensorSize, strict: bool) -> Result<Vec<Event>> {
    let policy = if strict {
        OrderPolicy::Reject
    } else {
        OrderPolicy::StableSort
    };
    let loaded = load_events(path, sensor, policy).with_context(|| format!("reading events {}", path.display()))?;
    if loaded.out_of_order > 0 {
        eprintln!(
            "warning: {} events in {} were out of order and have been sorted",
            loaded.out_of_order,
            path.display()
        );
    }
    Ok(loaded.events)
}

/// The `2K + 1` slices of the analysis window.
pub fn window(events: &[Event], args: &WindowArgs, sensor: SensorSize) -> Result<Vec<EventSlice>> {
    let dt = args.dt_ms * 1e-3;
    let t0 = match (args.t0, events.first()) {
        (Some(t0), _) => t0,
        (None, Some(e)) => e.t,
        (None, None) => bail!("no events to slice"),
    };
    let count = 2 * args.k as usize + 1;
    Ok(slice_windows(events, t0, dt, count, sensor)?)
}

pub fn depth(path: &Path) -> Result<DepthMap> {
    let raw = pnm::read_pfm(path).with_context(|| format!("reading depth {}", path.display()))?;
    Ok(DepthMap::from_raw(raw.width(), raw.height(), raw.as_slice())?)
}

/// A ground-truth manifest together with the directory its paths are relative to.
pub struct GtSource {
    pub manifest: GtManifest,
    pub base: PathBuf,
}

impl GtSource {
    /// Accepts the manifest itself or a directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path.to_path_buf()
        };
        let manifest = GtManifest::load(&file).with_context(|| format!("reading manifest {}", file.display()))?;
        let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(GtSource { manifest, base })
    }

    pub fn frame_near(&self, t: f64) -> Result<GtFrame> {
        let entry = self.manifest.nearest(t).context("manifest lists no frames")?;
        let frame = self
            .manifest
            .load_frame(&self.base, entry)
            .with_context(|| format!("loading frame {} of the manifest", entry.index))?;
        let half = 0.5 / self.manifest.fps;
        if (frame.t - t).abs() > half + 1e-9 {
            eprintln!(
                "warning: nearest ground-truth frame is at {:.6} s, {:.1} ms from {:.6} s",
                frame.t,
                (frame.t - t).abs() * 1e3,
                t
            );
        }
        Ok(frame)
    }
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema: u32,
    #[serde(flatten)]
    body: &'a T,
}

pub fn json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Versioned {
        schema: SCHEMA_VERSION,
        body: value,
    })?;
    text.push('\n');
    Ok(text)
}

/// Writes a report with the schema field to `out`, or to stdout.
pub fn report<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = json_text(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Pairs prediction and ground-truth files by name. Two files pair directly;
/// for two directories every `*.ext` file of `gt` needs a namesake in `pred`.
pub fn pair_files(pred: &Path, gt: &Path, ext: &str) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !gt.exists() {
        return Err(std::io::Error::from(std::io::ErrorKind::NotFound))
            .with_context(|| format!("ground truth {} does not exist", gt.display()));
    }
    if !pred.exists() {
        return Err(std::io::Error::from(std::io::ErrorKind::NotFound))
            .with_context(|| format!("prediction {} does not exist", pred.display()));
    }
    match (pred.is_dir(), gt.is_dir()) {
        (false, false) => {
            let name = gt
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())])
        }
        (true, true) => {
            let mut names: Vec<String> = fs::read_dir(gt)
                .with_context(|| format!("listing {}", gt.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| Path::new(n).extension().is_some_and(|x| x == ext))
                .collect();
            names.sort();
            if names.is_empty() {
                bail!("no .{ext} files in {}", gt.display());
            }
            names
                .into_iter()
                .map(|n| {
                    let p = pred.join(&n);
                    if !p.is_file() {
                        bail!("{} has no counterpart {}", gt.join(&n).display(), p.display());
                    }
                    Ok((n.clone(), p, gt.join(&n)))
                })
                .collect()
        }
        _ => bail!("--pred and --gt must both be files or both be directories"),
    }
}

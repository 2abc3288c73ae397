//! On-disk episode directories and the dataset manifest.
//!
//! ```text
//! <root>/manifest.txt            one episode directory per line
//! <root>/episode_0000/meta.txt   key=value lines
//! <root>/episode_0000/frames.bin raw u8, frame-major, row-major
//! <root>/episode_0000/tools.txt  `t u1 v1 [u2 v2 ...]` per frame
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use visa_core::eval::EpisodeMeta;
use visa_core::synth::Episode;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const META: &str = "meta.txt";
pub const FRAMES: &str = "frames.bin";
pub const TOOLS: &str = "tools.txt";

pub fn episode_dir_name(index: usize) -> String {
    format!("episode_{index:04}")
}

pub fn meta_text(ep: &Episode) -> String {
    format!(
        "score={}\nuser_id={}\nsupertrial_id={}\ntask_id={}\nframe_count={}\nwidth={}\nheight={}\n",
        ep.score, ep.user_id, ep.supertrial_id, ep.task_id, ep.frame_count, ep.width, ep.height
    )
}

pub fn tools_text(ep: &Episode) -> String {
    let mut out = String::new();
    for (t, tools) in ep.tool_tracks.iter().enumerate() {
        let _ = write!(out, "{t}");
        for (u, v) in tools {
            let _ = write!(out, " {u} {v}");
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(CliError::io(path))
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_file(&dir.join(META), meta_text(ep).as_bytes())?;
    write_file(&dir.join(FRAMES), &ep.frames)?;
    write_file(&dir.join(TOOLS), tools_text(ep).as_bytes())
}

/// Writes `episode_XXXX` directories and the manifest under `root`.
pub fn write_dataset(root: &Path, episodes: &[Episode]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(CliError::io(root))?;
    let mut manifest = String::new();
    for (i, ep) in episodes.iter().enumerate() {
        let name = episode_dir_name(i);
        write_episode(&root.join(&name), ep)?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_file(&root.join(MANIFEST), manifest.as_bytes())
}

fn parse_meta(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::format(path, format!("expected key=value, got {line:?}")))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::format(path, format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| CliError::format(path, format!("missing {key}")))?;
    raw.parse()
        .map_err(|_| CliError::format(path, format!("cannot parse {key}={raw}")))
}

fn parse_tools(path: &Path, text: &str, frames: usize) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut tracks = Vec::with_capacity(frames);
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: String| CliError::format(path, format!("line {}: {msg}", i + 1));
        let mut fields = line.split_whitespace();
        let t: usize = fields
            .next()
            .ok_or_else(|| bad("empty line".into()))?
            .parse()
            .map_err(|_| bad("bad frame index".into()))?;
        if t != i {
            return Err(bad(format!("expected frame {i}, got {t}")));
        }
        let coords = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad coordinate {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if coords.len() % 2 != 0 {
            return Err(bad("odd number of coordinates".into()));
        }
        tracks.push(coords.chunks_exact(2).map(|c| (c[0], c[1])).collect());
    }
    if tracks.len() != frames {
        return Err(CliError::format(path, format!("{} lines for {frames} frames", tracks.len())));
    }
    Ok(tracks)
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let meta_path = dir.join(META);
    let text = std::fs::read_to_string(&meta_path).map_err(CliError::io(&meta_path))?;
    let meta = parse_meta(&meta_path, &text)?;
    let frame_count: usize = field(&meta_path, &meta, "frame_count")?;
    let width: usize = field(&meta_path, &meta, "width")?;
    let height: usize = field(&meta_path, &meta, "height")?;
    let frames_path = dir.join(FRAMES);
    let frames = std::fs::read(&frames_path).map_err(CliError::io(&frames_path))?;
    if Some(frames.len()) != frame_count.checked_mul(width).and_then(|n| n.checked_mul(height)) {
        return Err(CliError::format(
            &frames_path,
            format!("{} bytes for {frame_count} frames of {width}x{height}", frames.len()),
        ));
    }
    let tools_path = dir.join(TOOLS);
    let tools = std::fs::read_to_string(&tools_path).map_err(CliError::io(&tools_path))?;
    Ok(Episode {
        frames,
        frame_count,
        width,
        height,
        score: field(&meta_path, &meta, "score")?,
        user_id: field(&meta_path, &meta, "user_id")?,
        supertrial_id: field(&meta_path, &meta, "supertrial_id")?,
        task_id: field(&meta_path, &meta, "task_id")?,
        tool_tracks: parse_tools(&tools_path, &tools, frame_count)?,
    })
}

/// Episode directories listed by the manifest, resolved against `root`.
pub fn read_manifest(root: &Path) -> Result<Vec<PathBuf>> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let dirs: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| root.join(l))
        .collect();
    if dirs.is_empty() {
        return Err(CliError::format(path, "manifest lists no episodes"));
    }
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<Episode>> {
    read_manifest(root)?.iter().map(|d| read_episode(d)).collect()
}

pub fn metadata(episodes: &[Episode]) -> Vec<EpisodeMeta> {
    episodes
        .iter()
        .map(|e| EpisodeMeta {
            user_id: Some(e.user_id),
            supertrial_id: Some(e.supertrial_id),
        })
        .collect()
}

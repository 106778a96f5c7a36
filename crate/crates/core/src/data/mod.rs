//! Frame files, trajectory windows, splits and synthetic scenes.

mod scene;
mod split;
mod synth;
mod window;

use std::path::Path;

use thiserror::Error;

pub use scene::{
    parse_scene, parse_scene_str, write_scene, write_scene_string, Observation, Scene,
    DEFAULT_FRAME_INTERVAL,
};
pub use split::{leave_one_out_split, Fold};
pub use synth::{synth_generate, synth_generate_with, AgentKind, SynthConfig, SynthMix, SynthScene};
pub use window::{
    denormalize_window, normalize_window, window_scene, windows_from_archive, windows_to_archive, Horizon,
    TrajectoryWindow, MIN_OBSERVED,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene has no observations")]
    EmptyScene,
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads every `*.txt` frame file in `dir`, sorted by file name. Scene
/// names are the file stems.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<(String, Scene)>, DataError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Invalid(format!("no .txt scene files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let scene = parse_scene(&p).map_err(|e| match e {
                DataError::Parse { line, msg } => DataError::Parse {
                    line,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })?;
            Ok((name, scene))
        })
        .collect()
}
